#include "ibcircuit/toy.hpp"

#include <cmath>
#include <random>

#include "ibcircuit/errors.hpp"
#include "ibcircuit/metrics.hpp"
#include "ibcircuit/optim.hpp"

namespace ibc {

void PretrainConfig::validate() const {
  if (steps < 1) throw ConfigError("pretrain.steps must be >= 1");
  if (batch_size < 1) throw ConfigError("pretrain.batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("pretrain.lr must be > 0");
  if (eval_every < 1) throw ConfigError("pretrain.eval_every must be >= 1");
  if (!(corrupted_rate >= 0.0 && corrupted_rate <= 1.0)) throw ConfigError("pretrain.corrupted_rate must lie in [0, 1]");
}

double default_floor(TaskKind kind) { return kind == TaskKind::Ioi ? 2.0 : 0.5; }

std::vector<double> answer_target(const TaskSample& sample, std::size_t vocab_size) {
  std::vector<double> t(vocab_size, 0.0);
  if (const auto* ld = std::get_if<LogitDiff>(&sample.metric)) {
    t.at(static_cast<std::size_t>(ld->io_token)) = 1.0;
    return t;
  }
  const auto& gp = std::get<GreaterProb>(sample.metric);
  const int n = gp.year_count - 1 - gp.threshold;
  if (n < 1) throw DomainError("no year above the threshold");
  for (int y = gp.threshold + 1; y < gp.year_count; ++y) t.at(static_cast<std::size_t>(gp.year_begin + y)) = 1.0 / n;
  return t;
}

namespace {

// Greater-Than prompts never start at 01, so the model would never learn that year. Now and then
// a corrupted prompt is trained on as a prompt of its own (start year 01, any later year valid).
TaskSample corrupted_as_prompt(const TaskSample& s) {
  TaskSample out = s;
  out.clean = s.corrupted;
  std::get<GreaterProb>(out.metric).threshold = 1;
  return out;
}

}  // namespace

PretrainResult pretrain_toy(const ModelConfig& cfg, TaskKind kind, std::span<const TaskSample> train,
                            std::span<const TaskSample> heldout, const PretrainConfig& config) {
  config.validate();
  cfg.validate();
  if (train.empty() || heldout.empty()) throw ShapeError("pretraining needs train and held-out samples");
  if (static_cast<std::size_t>(cfg.vocab_size) != Vocab::toy().size()) {
    throw ConfigError("model.vocab_size must be " + std::to_string(Vocab::toy().size()) + " for the toy tasks");
  }
  const double floor = std::isnan(config.floor) ? default_floor(kind) : config.floor;

  PretrainResult result;
  result.model = Model::init_random(cfg, derive_seed({config.seed, 0x696E6974}));
  Model& model = result.model;
  model.set_trainable(true);
  auto params = model.named_parameters();
  std::vector<Adam> adams;
  adams.reserve(params.size());
  for (auto& [name, t] : params) adams.emplace_back(t->numel());

  const PromptBatch eval_batch = clean_batch(heldout);
  std::mt19937_64 rng(derive_seed({config.seed, 0x62617463}));
  std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
  std::bernoulli_distribution start_at_01(config.corrupted_rate);
  const std::size_t B = static_cast<std::size_t>(config.batch_size), V = cfg.vocab_size;

  for (int step = 0; step < config.steps; ++step) {
    std::vector<TaskSample> mb;
    mb.reserve(B);
    for (std::size_t i = 0; i < B; ++i) {
      const TaskSample& s = train[pick(rng)];
      mb.push_back(kind == TaskKind::GreaterThan && start_at_01(rng) ? corrupted_as_prompt(s) : s);
    }
    const PromptBatch batch = clean_batch(mb);
    std::vector<double> target;
    target.reserve(B * V);
    for (const auto& s : mb) {
      const auto t = answer_target(s, V);
      target.insert(target.end(), t.begin(), t.end());
    }

    for (auto& [name, t] : params) t->zero_grad();
    const Tensor rows = gather_positions(model.forward(batch.tokens), batch.answer_positions);
    const Tensor loss = scale(sum(mul(log_softmax(rows), Tensor::from({B, V}, std::move(target)))),
                              -1.0 / static_cast<double>(B));
    backward(loss);
    result.final_loss = loss.item();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const std::vector<double> g = params[i].second->grad();
      adams[i].step(params[i].second->mutable_values(), g, config.lr);
    }
    result.steps_run = step + 1;

    if ((step + 1) % config.eval_every == 0 || step + 1 == config.steps) {
      NoGradGuard guard;
      result.heldout_metric = mean_task_metric(model.forward(eval_batch.tokens), heldout);
      if (config.progress) config.progress(result.steps_run, result.final_loss, result.heldout_metric);
      if (result.heldout_metric >= floor && step + 1 >= config.min_steps) break;
    }
  }
  model.set_trainable(false);
  if (!(result.heldout_metric >= floor)) {
    throw TrainingError("pretraining reached held-out metric " + std::to_string(result.heldout_metric) +
                        " below the floor " + std::to_string(floor) + " after " +
                        std::to_string(result.steps_run) + " steps");
  }
  return result;
}

ActivationCache mean_patch(const ActivationCache& cache, std::span<const ComponentId> ids) {
  ActivationCache out;
  for (const ComponentId& id : ids) {
    auto it = cache.find(id);
    if (it == cache.end()) throw LookupError("no cached activation for " + to_string(id));
    const Tensor& h = it->second;
    const std::size_t B = h.dim(0), slab = h.numel() / B;
    std::vector<double> mean(slab, 0.0);
    auto v = h.values();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < slab; ++i) mean[i] += v[b * slab + i];
    for (double& x : mean) x /= static_cast<double>(B);
    std::vector<double> tiled(h.numel());
    for (std::size_t b = 0; b < B; ++b) std::copy(mean.begin(), mean.end(), tiled.begin() + b * slab);
    out.emplace(id, Tensor::from(h.shape(), std::move(tiled)));
  }
  return out;
}

CanonicalCircuit canonical_from_oracle(const Model& model, std::span<const TaskSample> samples, double delta) {
  NoGradGuard guard;
  const PromptBatch batch = clean_batch(samples);
  const CachedRun clean = run_with_cache(model, batch.tokens);
  const double clean_metric = mean_task_metric(clean.logits, samples);
  CanonicalCircuit out;
  out.delta = delta;
  for (const ComponentId& head : head_components(model.config())) {
    const ComponentId ids[] = {head};
    const Tensor logits = run_with_patch(model, batch.tokens, mean_patch(clean.cache, ids));
    const double drop = clean_metric - mean_task_metric(logits, samples);
    out.drops.emplace(head, drop);
    if (drop > delta) out.members.push_back(head);
  }
  return out;
}

namespace {

class EdgeMeanAblation : public Intervention {
 public:
  EdgeMeanAblation(const EdgeId& edge, const Tensor& mean) : edge_(edge), mean_(mean) {}
  bool per_target() const override { return true; }
  Tensor on_target(const TargetId& id, std::span<const SourceOutput> sources) override {
    if (!(id == edge_.dst)) return sum_sources(sources);
    std::vector<SourceOutput> rebuilt(sources.begin(), sources.end());
    for (auto& s : rebuilt)
      if (s.id == edge_.src) s.value = mean_;
    return sum_sources(rebuilt);
  }

 private:
  EdgeId edge_;
  Tensor mean_;
};

}  // namespace

CanonicalEdges canonical_edges_from_oracle(const Model& model, std::span<const TaskSample> samples, double delta) {
  NoGradGuard guard;
  const PromptBatch batch = clean_batch(samples);
  const CachedRun clean = run_with_cache(model, batch.tokens);
  const double clean_metric = mean_task_metric(clean.logits, samples);
  const auto sources = source_components(model.config());
  const ActivationCache means = mean_patch(clean.cache, sources);
  CanonicalEdges out;
  out.delta = delta;
  for (const EdgeId& e : enumerate_edges(model.config())) {
    EdgeMeanAblation hooks(e, means.at(e.src));
    const double drop = clean_metric - mean_task_metric(model.run(batch.tokens, hooks), samples);
    out.drops.emplace(e, drop);
    if (drop > delta) out.members.push_back(e);
  }
  return out;
}

}  // namespace ibc
