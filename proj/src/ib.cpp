#include "ibcircuit/ib.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "ibcircuit/errors.hpp"
#include "ibcircuit/ibck.hpp"
#include "ibcircuit/optim.hpp"

namespace ibc {

std::string to_string(Level level) { return level == Level::Node ? "node" : "edge"; }

std::string to_string(Variant variant) {
  switch (variant) {
    case Variant::IB: return "ib";
    case Variant::HardConcrete: return "hard_concrete";
    case Variant::SPObjective: return "sp_objective";
  }
  return "?";
}

Level parse_level(std::string_view text) {
  if (text == "node") return Level::Node;
  if (text == "edge") return Level::Edge;
  throw FormatError("unknown level '" + std::string(text) + "'");
}

Variant parse_variant(std::string_view text) {
  if (text == "ib") return Variant::IB;
  if (text == "hard_concrete") return Variant::HardConcrete;
  if (text == "sp_objective") return Variant::SPObjective;
  throw FormatError("unknown variant '" + std::string(text) + "'");
}

// ---- statistics -------------------------------------------------------------

BatchStats compute_batch_stats(const ActivationCache& cache) {
  if (cache.empty()) throw ShapeError("compute_batch_stats: empty cache");
  BatchStats stats;
  for (const auto& [id, t] : cache) {
    const std::size_t d = t.shape().back();
    const std::size_t rows = t.numel() / d;
    auto v = t.values();
    GaussianStats s;
    s.mu.assign(d, 0.0);
    s.sigma.assign(d, 0.0);
    // Welford per dimension.
    std::vector<double> m2(d, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double n = static_cast<double>(r + 1);
      for (std::size_t j = 0; j < d; ++j) {
        const double x = v[r * d + j];
        const double delta = x - s.mu[j];
        s.mu[j] += delta / n;
        m2[j] += delta * (x - s.mu[j]);
      }
    }
    for (std::size_t j = 0; j < d; ++j) {
      s.sigma[j] = std::max(kSigmaFloor, std::sqrt(m2[j] / static_cast<double>(rows)));
    }
    stats.emplace(id, std::move(s));
  }
  return stats;
}

// ---- layout ------------------------------------------------------------------

GateLayout GateLayout::for_model(const ModelConfig& cfg, Level level) {
  GateLayout layout;
  layout.level = level;
  if (level == Level::Node) {
    layout.nodes = head_components(cfg);
  } else {
    layout.edges = enumerate_edges(cfg);
  }
  return layout;
}

std::string GateLayout::site_name(std::size_t i) const {
  return level == Level::Node ? to_string(nodes.at(i)) : to_string(edges.at(i));
}

// ---- perturbation ------------------------------------------------------------

namespace {

Tensor one_minus(const Tensor& x) { return add_scalar(scale(x, -1.0), 1.0); }

void check_gate(const Tensor& lambda) {
  if (lambda.numel() != 1) throw ShapeError("gate must be a single value, got " + shape_str(lambda.shape()));
}

}  // namespace

Tensor perturb_node(const Tensor& h, const Tensor& lambda, const Tensor& eps) {
  check_gate(lambda);
  if (h.shape() != eps.shape()) {
    throw ShapeError("perturb_node: activation " + shape_str(h.shape()) + " vs noise " + shape_str(eps.shape()));
  }
  return add(mul(h, lambda), mul(eps, one_minus(lambda)));
}

Tensor perturb_edge_sum(std::span<const GatedSource> sources) {
  if (sources.empty()) throw ShapeError("perturb_edge_sum: no sources");
  Tensor acc;
  for (const GatedSource& s : sources) {
    if (s.h.shape() != sources[0].h.shape()) throw ShapeError("perturb_edge_sum: sources disagree in shape");
    Tensor term = perturb_node(s.h, s.lambda, s.eps);
    acc = acc.defined() ? add(acc, term) : term;
  }
  return acc;
}

Tensor NoiseSampler::draw(std::size_t site, const GaussianStats& stats, const Shape& shape) const {
  const std::size_t d = shape.back();
  if (stats.mu.size() != d || stats.sigma.size() != d) throw ShapeError("noise stats do not match activation width");
  std::mt19937_64 rng(derive_seed({seed_, step_, static_cast<std::uint64_t>(site)}));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> values(shape_numel(shape));
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::size_t j = i % d;
    values[i] = stats.mu[j] + stats.sigma[j] * normal(rng);
  }
  return Tensor::from(shape, std::move(values));
}

namespace {

const GaussianStats& stats_for(const BatchStats& stats, const ComponentId& id) {
  auto it = stats.find(id);
  if (it == stats.end()) throw LookupError("no batch statistics for " + to_string(id));
  return it->second;
}

class NodeGates : public Intervention {
 public:
  NodeGates(const GateLayout& layout, const Tensor& lambdas, const BatchStats& stats, const NoiseSampler& noise)
      : lambdas_(lambdas), stats_(stats), noise_(noise) {
    for (std::size_t i = 0; i < layout.nodes.size(); ++i) index_.emplace(layout.nodes[i], i);
  }

  Tensor on_source(const ComponentId& id, Tensor contribution) override {
    auto it = index_.find(id);
    if (it == index_.end()) return contribution;
    const std::size_t site = it->second;
    Tensor eps = noise_.draw(site, stats_for(stats_, id), contribution.shape());
    return perturb_node(contribution, slice(lambdas_, 0, site, site + 1), eps);
  }

 private:
  std::map<ComponentId, std::size_t> index_;
  const Tensor& lambdas_;
  const BatchStats& stats_;
  const NoiseSampler& noise_;
};

class EdgeGates : public Intervention {
 public:
  EdgeGates(const GateLayout& layout, const Tensor& lambdas, const BatchStats& stats, const NoiseSampler& noise)
      : lambdas_(lambdas), stats_(stats), noise_(noise) {
    for (std::size_t i = 0; i < layout.edges.size(); ++i) index_.emplace(layout.edges[i], i);
  }

  bool per_target() const override { return true; }

  Tensor on_target(const TargetId& target, std::span<const SourceOutput> sources) override {
    std::vector<GatedSource> gated;
    gated.reserve(sources.size());
    for (const SourceOutput& s : sources) {
      auto it = index_.find(EdgeId{target, s.id});
      if (it == index_.end()) throw LookupError("no gate for edge " + to_string(s.id) + "->" + to_string(target));
      const std::size_t site = it->second;
      gated.push_back({s.value, slice(lambdas_, 0, site, site + 1),
                       noise_.draw(site, stats_for(stats_, s.id), s.value.shape())});
    }
    return perturb_edge_sum(gated);
  }

 private:
  std::map<EdgeId, std::size_t> index_;
  const Tensor& lambdas_;
  const BatchStats& stats_;
  const NoiseSampler& noise_;
};

}  // namespace

Tensor forward_distorted(const Model& model, const TokenBatch& tokens, const GateLayout& layout, const Tensor& lambdas,
                         const BatchStats& stats, const NoiseSampler& noise) {
  if (lambdas.numel() != layout.size()) {
    throw ShapeError("forward_distorted: " + std::to_string(lambdas.numel()) + " gates for " +
                     std::to_string(layout.size()) + " sites");
  }
  if (layout.level == Level::Node) {
    NodeGates hooks(layout, lambdas, stats, noise);
    return model.run(tokens, hooks);
  }
  EdgeGates hooks(layout, lambdas, stats, noise);
  return model.run(tokens, hooks);
}

// ---- losses --------------------------------------------------------------------

Tensor kl_output_loss(const Tensor& clean_logits, const Tensor& distorted_logits, std::span<const std::size_t> positions) {
  if (clean_logits.shape() != distorted_logits.shape()) {
    throw ShapeError("kl_output_loss: " + shape_str(clean_logits.shape()) + " vs " + shape_str(distorted_logits.shape()));
  }
  Tensor clean_rows;
  {
    NoGradGuard guard;
    clean_rows = gather_positions(clean_logits.detach(), positions);
  }
  const Tensor dist_rows = gather_positions(distorted_logits, positions);
  const std::size_t B = clean_rows.dim(0), V = clean_rows.dim(1);

  // p and log p are constants; written as sum p (log p - log q) so identical rows give exactly 0.
  Tensor p, logp;
  {
    NoGradGuard guard;
    logp = log_softmax(clean_rows);
    std::vector<double> probs(B * V);
    for (std::size_t i = 0; i < probs.size(); ++i) probs[i] = std::exp(logp.at(i));
    p = Tensor::from({B, V}, std::move(probs));
  }
  return scale(sum(mul(p, sub(logp, log_softmax(dist_rows)))), 1.0 / static_cast<double>(B));
}

double gaussian_gate_kl(double lambda, double h, double mu, double sigma) {
  if (!(lambda >= 0.0 && lambda < 1.0)) throw DomainError("gate must lie in [0, 1), got " + std::to_string(lambda));
  const double one_m = 1.0 - lambda;
  const double z = (h - mu) / sigma;
  return -std::log(one_m) + (one_m * one_m - 1.0) / 2.0 + lambda * lambda * z * z / 2.0;
}

std::vector<double> normalized_deviation(const ActivationCache& cache, const BatchStats& stats, const GateLayout& layout) {
  std::map<ComponentId, double> per_source;
  auto deviation_of = [&](const ComponentId& id) {
    auto hit = per_source.find(id);
    if (hit != per_source.end()) return hit->second;
    auto it = cache.find(id);
    if (it == cache.end()) throw LookupError("no cached activation for " + to_string(id));
    const GaussianStats& s = stats_for(stats, id);
    auto v = it->second.values();
    const std::size_t d = s.mu.size();
    double total = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double z = (v[i] - s.mu[i % d]) / s.sigma[i % d];
      total += z * z;
    }
    const double dev = total / static_cast<double>(v.size());
    per_source.emplace(id, dev);
    return dev;
  };
  std::vector<double> out(layout.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = deviation_of(layout.source_of(i));
  return out;
}

Tensor mi_loss(const Tensor& lambdas, std::span<const double> deviation) {
  if (deviation.size() != lambdas.numel()) throw ShapeError("mi_loss: one deviation per gate required");
  for (double l : lambdas.values()) {
    if (!(l >= 0.0 && l < 1.0)) throw DomainError("mi_loss: gate must lie in [0, 1), got " + std::to_string(l));
  }
  const Tensor dev = Tensor::from(lambdas.shape(), std::vector<double>(deviation.begin(), deviation.end()));
  const Tensor keep = one_minus(lambdas);
  const Tensor log_term = scale(log(keep), -1.0);
  const Tensor var_term = scale(add_scalar(mul(keep, keep), -1.0), 0.5);
  const Tensor mean_term = scale(mul(mul(lambdas, lambdas), dev), 0.5);
  return mean(add(add(log_term, var_term), mean_term));
}

Tensor total_objective(const Tensor& kl, const Tensor& mi, double beta) {
  if (!(beta >= 0.0)) throw DomainError("beta must be >= 0");
  return add(kl, scale(mi, beta));
}

// ---- hard concrete ---------------------------------------------------------------

Tensor HardConcrete::sample(const Tensor& log_alpha, std::mt19937_64& rng) const {
  std::uniform_real_distribution<double> uniform(1e-12, 1.0 - 1e-12);
  std::vector<double> logistic(log_alpha.numel());
  for (double& x : logistic) {
    const double u = uniform(rng);
    x = std::log(u) - std::log1p(-u);
  }
  const Tensor noise = Tensor::from(log_alpha.shape(), std::move(logistic));
  const Tensor s = sigmoid(scale(add(log_alpha, noise), 1.0 / temperature));
  return clamp(add_scalar(scale(s, upper - lower), lower), 0.0, 1.0);
}

double HardConcrete::expected_gate(double log_alpha) const {
  // E[z] = int_0^1 P(z > t) dt, with P(s <= x) = sigmoid(temperature * logit(x) - log_alpha).
  auto survival = [&](double t) {
    const double x = (t - lower) / (upper - lower);
    const double a = temperature * std::log(x / (1.0 - x)) - log_alpha;
    return 1.0 - 1.0 / (1.0 + std::exp(-a));
  };
  constexpr int kIntervals = 2048;  // Simpson, even count
  const double h = 1.0 / kIntervals;
  double acc = survival(0.0) + survival(1.0);
  for (int i = 1; i < kIntervals; ++i) acc += (i % 2 ? 4.0 : 2.0) * survival(i * h);
  return acc * h / 3.0;
}

double HardConcrete::nonzero_probability(double log_alpha) const {
  const double a = log_alpha - temperature * std::log(-lower / upper);
  return 1.0 / (1.0 + std::exp(-a));
}

Tensor HardConcrete::nonzero_probability(const Tensor& log_alpha) const {
  return sigmoid(add_scalar(log_alpha, -temperature * std::log(-lower / upper)));
}

Tensor sp_penalty(const Tensor& gates) {
  for (double g : gates.values()) {
    if (g < 0.0 || g > 1.0) throw DomainError("sp_penalty: gate outside [0, 1]");
  }
  return mean(gates);
}

// ---- training ----------------------------------------------------------------------

TrainConfig TrainConfig::node_defaults() { return TrainConfig{}; }

TrainConfig TrainConfig::edge_defaults() {
  TrainConfig c;
  c.level = Level::Edge;
  c.lr = 0.1;
  c.steps = 3000;
  c.warmup_steps = 200;
  c.beta = 0.1;
  return c;
}

void TrainConfig::validate() const {
  if (!(beta >= 0.0)) throw ConfigError("train.beta must be >= 0");
  if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
  if (steps < 1) throw ConfigError("train.steps must be >= 1");
  if (warmup_steps < 0 || warmup_steps > steps) throw ConfigError("train.warmup_steps must lie in [0, steps]");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
}

std::vector<double> IBWeights::gates() const {
  std::vector<double> out(omega.size());
  const HardConcrete hc;
  for (std::size_t i = 0; i < omega.size(); ++i) {
    if (variant == Variant::HardConcrete) {
      out[i] = hc.expected_gate(omega[i]);
    } else {
      out[i] = std::clamp(1.0 / (1.0 + std::exp(-omega[i])), kLambdaMin, kLambdaMax);
    }
  }
  return out;
}

double IBWeights::mean_gate() const {
  const auto g = gates();
  double total = 0.0;
  for (double x : g) total += x;
  return g.empty() ? 0.0 : total / static_cast<double>(g.size());
}

IBWeights initial_weights(const ModelConfig& cfg, Level level, Variant variant) {
  IBWeights w;
  w.level = level;
  w.variant = variant;
  w.layout = GateLayout::for_model(cfg, level);
  w.omega.assign(w.layout.size(), std::log(kInitialLambda / (1.0 - kInitialLambda)));
  return w;
}

namespace {

constexpr std::uint64_t kNoiseStream = 0x6E6F697365ULL;
constexpr std::uint64_t kGateStream = 0x6761746573ULL;

Tensor training_gates(const Tensor& omega, const TrainConfig& cfg, std::size_t step) {
  if (cfg.variant == Variant::HardConcrete) {
    std::mt19937_64 rng(derive_seed({cfg.seed, kGateStream, step}));
    return clamp(HardConcrete{}.sample(omega, rng), kLambdaMin, kLambdaMax);
  }
  return clamp(sigmoid(omega), kLambdaMin, kLambdaMax);
}

}  // namespace

TrainResult train(const Model& model, const Batcher& batcher, const TrainConfig& config) {
  config.validate();
  IBWeights weights = initial_weights(model.config(), config.level, config.variant);
  const GateLayout& layout = weights.layout;
  Tensor omega = Tensor::from({layout.size()}, weights.omega, true);
  Adam adam(layout.size());
  const std::uint64_t noise_seed = derive_seed({config.seed, kNoiseStream});

  BatchStats frozen;
  std::vector<TrajectoryPoint> trajectory;
  trajectory.reserve(static_cast<std::size_t>(config.steps));
  for (std::size_t step = 0; step < static_cast<std::size_t>(config.steps); ++step) {
    const PromptBatch batch = batcher(step);
    CachedRun clean;
    {
      NoGradGuard guard;
      clean = run_with_cache(model, batch.tokens);
    }
    BatchStats stats;
    if (config.freeze_stats && step > 0) {
      stats = frozen;
    } else {
      stats = compute_batch_stats(clean.cache);
      if (config.freeze_stats) frozen = stats;
    }
    const std::vector<double> deviation = normalized_deviation(clean.cache, stats, layout);

    TrajectoryPoint point;
    try {
      omega.zero_grad();
      const Tensor gates = training_gates(omega, config, step);
      const Tensor logits =
          forward_distorted(model, batch.tokens, layout, gates, stats, NoiseSampler(noise_seed, step));
      const Tensor kl = kl_output_loss(clean.logits, logits, batch.answer_positions);
      const Tensor mi = mi_loss(gates, deviation);
      const Tensor penalty = config.variant == Variant::SPObjective ? sp_penalty(gates) : mi;
      const Tensor objective = total_objective(kl, penalty, config.beta);
      backward(objective);
      point.kl_loss = kl.item();
      point.mi_loss = mi.item();
      point.objective = objective.item();
    } catch (const NumericError& e) {
      throw TrainingError("objective diverged at step " + std::to_string(step) + ": " + e.what());
    }
    if (!std::isfinite(point.objective)) throw TrainingError("objective diverged at step " + std::to_string(step));

    weights.omega.assign(omega.values().begin(), omega.values().end());
    point.step = static_cast<int>(step);
    point.mean_lambda = weights.mean_gate();
    point.lr = warmup_lr(config.lr, step, static_cast<std::size_t>(config.warmup_steps));
    trajectory.push_back(point);

    const std::vector<double> grad = omega.grad();
    adam.step(omega.mutable_values(), grad, point.lr);
  }
  weights.omega.assign(omega.values().begin(), omega.values().end());
  return {std::move(weights), std::move(trajectory)};
}

LossPoint evaluate_losses(const Model& model, const IBWeights& weights, const PromptBatch& batch,
                          std::uint64_t noise_seed) {
  NoGradGuard guard;
  const CachedRun clean = run_with_cache(model, batch.tokens);
  const BatchStats stats = compute_batch_stats(clean.cache);
  std::vector<double> g = weights.gates();
  for (double& x : g) x = std::clamp(x, kLambdaMin, kLambdaMax);
  const Tensor gates = Tensor::from({g.size()}, g);
  const Tensor logits = forward_distorted(model, batch.tokens, weights.layout, gates, stats, NoiseSampler(noise_seed, 0));
  LossPoint out;
  out.kl = kl_output_loss(clean.logits, logits, batch.answer_positions).item();
  out.mi = mi_loss(gates, normalized_deviation(clean.cache, stats, weights.layout)).item();
  return out;
}

std::string trajectory_csv(std::span<const TrajectoryPoint> points) {
  std::string out = "step,kl_loss,mi_loss,mean_lambda,objective,lr\n";
  char line[256];
  for (const auto& p : points) {
    std::snprintf(line, sizeof line, "%d,%.17g,%.17g,%.17g,%.17g,%.17g\n", p.step, p.kl_loss, p.mi_loss,
                  p.mean_lambda, p.objective, p.lr);
    out += line;
  }
  return out;
}

// ---- persistence -------------------------------------------------------------------

namespace {

std::string node_tensor_name(const ComponentId& id) {
  return "ibw/node/" + std::to_string(id.layer) + "." + std::to_string(id.head);
}

}  // namespace

void save_ib_weights(const IBWeights& weights, const ModelConfig& cfg, const std::filesystem::path& path) {
  IbckFile file;
  nlohmann::json edges = nlohmann::json::array();
  for (std::size_t i = 0; i < weights.layout.edges.size(); ++i) {
    const EdgeId& e = weights.layout.edges[i];
    edges.push_back({{"index", i}, {"src", to_string(e.src)}, {"dst", to_string(e.dst)}});
  }
  file.header = {{"kind", "ib_weights"},
                 {"level", to_string(weights.level)},
                 {"variant", to_string(weights.variant)},
                 {"model_config", cfg.to_json()},
                 {"edges", edges}};
  for (std::size_t i = 0; i < weights.omega.size(); ++i) {
    const std::string name = weights.level == Level::Node ? node_tensor_name(weights.layout.nodes[i])
                                                          : "ibw/edge/" + std::to_string(i);
    file.tensors.push_back({name, {1}, {weights.omega[i]}});
  }
  write_ibck(path, file);
}

IBWeights load_ib_weights(const std::filesystem::path& path, const ModelConfig& cfg) {
  const IbckFile file = read_ibck(path);
  if (file.header.value("kind", "") != "ib_weights") throw FormatError(path.string() + " does not hold IB weights");
  IBWeights w;
  try {
    w = initial_weights(cfg, parse_level(file.header.at("level").get<std::string>()),
                        parse_variant(file.header.at("variant").get<std::string>()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad IB weight header: ") + e.what());
  }
  if (w.level == Level::Edge) {
    const auto& table = file.header.at("edges");
    if (table.size() != w.layout.edges.size()) throw ShapeError("edge table does not match the model's edge graph");
    for (std::size_t i = 0; i < table.size(); ++i) {
      if (table[i].at("src").get<std::string>() != to_string(w.layout.edges[i].src) ||
          table[i].at("dst").get<std::string>() != to_string(w.layout.edges[i].dst)) {
        throw ShapeError("edge table entry " + std::to_string(i) + " does not match the model's edge graph");
      }
    }
  }
  for (std::size_t i = 0; i < w.omega.size(); ++i) {
    const std::string name =
        w.level == Level::Node ? node_tensor_name(w.layout.nodes[i]) : "ibw/edge/" + std::to_string(i);
    const NamedTensor* t = file.find(name);
    if (!t || t->values.size() != 1) throw ShapeError("IB weight tensor " + name + " missing or not scalar");
    w.omega[i] = t->values[0];
  }
  if (file.tensors.size() != w.omega.size()) throw ShapeError("IB weight file has unexpected extra tensors");
  return w;
}

}  // namespace ibc
