#include "ibcircuit/baselines.hpp"

#include <cmath>
#include <cstdio>

#include "ibcircuit/errors.hpp"
#include "ibcircuit/eval.hpp"
#include "ibcircuit/metrics.hpp"

namespace ibc {

namespace {

void check_aligned(const PromptBatch& clean, const PromptBatch& corrupted, std::span<const TaskSample> samples) {
  if (clean.tokens.batch != corrupted.tokens.batch || clean.tokens.seq != corrupted.tokens.seq ||
      clean.tokens.batch != samples.size()) {
    throw ShapeError("clean batch, corrupted batch and samples must align sample-wise");
  }
}

double dot(std::span<const double> delta_of, std::span<const double> clean, std::span<const double> grad) {
  double total = 0.0;
  for (std::size_t i = 0; i < grad.size(); ++i) total += (delta_of[i] - clean[i]) * grad[i];
  return total;
}

// Adds a zero leaf to every head output so its gradient is d metric / d head.
class HeadProbe : public Intervention {
 public:
  Tensor on_source(const ComponentId& id, Tensor contribution) override {
    if (id.kind != SourceKind::Head) return contribution;
    clean.emplace(id, contribution.detach());
    Tensor z = Tensor::zeros(contribution.shape(), true);
    probes.emplace(id, z);
    return add(contribution, z);
  }
  ActivationCache clean, probes;
};

// Adds a zero leaf to every target input.
class TargetProbe : public Intervention {
 public:
  bool per_target() const override { return true; }
  Tensor on_target(const TargetId& id, std::span<const SourceOutput> sources) override {
    for (const auto& s : sources) clean.try_emplace(s.id, s.value.detach());
    const Tensor input = sum_sources(sources);
    Tensor z = Tensor::zeros(input.shape(), true);
    probes.emplace(id, z);
    return add(input, z);
  }
  ActivationCache clean;
  std::map<TargetId, Tensor> probes;
};

}  // namespace

AttributionScores attribution_patching_node(const Model& model, const PromptBatch& clean, const PromptBatch& corrupted,
                                            std::span<const TaskSample> samples) {
  check_aligned(clean, corrupted, samples);
  ActivationCache corrupt;
  {
    NoGradGuard guard;
    corrupt = run_with_cache(model, corrupted.tokens).cache;
  }
  HeadProbe probe;
  backward(task_metric_tensor(model.run(clean.tokens, probe), samples));

  AttributionScores out;
  out.layout = GateLayout::for_model(model.config(), Level::Node);
  for (const ComponentId& head : out.layout.nodes) {
    const std::vector<double> g = probe.probes.at(head).grad();
    out.scores.push_back(std::fabs(dot(corrupt.at(head).values(), probe.clean.at(head).values(), g)));
  }
  return out;
}

AttributionScores eap_edge(const Model& model, const PromptBatch& clean, const PromptBatch& corrupted,
                           std::span<const TaskSample> samples) {
  check_aligned(clean, corrupted, samples);
  ActivationCache corrupt;
  {
    NoGradGuard guard;
    corrupt = run_with_cache(model, corrupted.tokens).cache;
  }
  TargetProbe probe;
  backward(task_metric_tensor(model.run(clean.tokens, probe), samples));

  AttributionScores out;
  out.layout = GateLayout::for_model(model.config(), Level::Edge);
  std::map<TargetId, std::vector<double>> grads;
  for (const auto& [id, z] : probe.probes) grads.emplace(id, z.grad());
  for (const EdgeId& e : out.layout.edges) {
    out.scores.push_back(
        std::fabs(dot(corrupt.at(e.src).values(), probe.clean.at(e.src).values(), grads.at(e.dst))));
  }
  return out;
}

std::string scores_csv(const AttributionScores& s) {
  std::string out = "component_id,score\n";
  char num[40];
  for (std::size_t i : rank_order(s.scores)) {
    std::snprintf(num, sizeof num, ",%.17g\n", s.scores[i]);
    out += s.layout.site_name(i) + num;
  }
  return out;
}

}  // namespace ibc
