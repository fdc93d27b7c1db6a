#include "ibcircuit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "ibcircuit/errors.hpp"
#include "ibcircuit/metrics.hpp"

namespace ibc {

std::vector<double> default_fractions() {
  std::vector<double> f;
  for (int i = 1; i <= 10; ++i) f.push_back(i / 10.0);
  return f;
}

std::vector<std::size_t> rank_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

namespace {

// ceil(f * n) without 0.3 * 10 rounding up to 4.
std::size_t top_count(double fraction, std::size_t n) {
  const double x = fraction * static_cast<double>(n);
  return std::min(n, static_cast<std::size_t>(std::ceil(x - 1e-9)));
}

}  // namespace

RocCurve roc_curve(std::span<const double> scores, const std::vector<bool>& canonical,
                   std::span<const double> fractions) {
  const std::size_t n = scores.size();
  if (canonical.size() != n) throw ShapeError("roc_curve: one canonical flag per score required");
  const std::size_t positives = static_cast<std::size_t>(std::count(canonical.begin(), canonical.end(), true));
  if (positives == 0) throw DomainError("roc_curve: empty canonical set");
  const std::size_t negatives = n - positives;
  for (double f : fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw DomainError("roc_curve: fractions must lie in (0, 1]");
  }
  std::vector<double> sorted(fractions.begin(), fractions.end());
  std::sort(sorted.begin(), sorted.end());

  const auto order = rank_order(scores);
  RocCurve roc;
  roc.points.push_back({0.0, 0.0});
  for (double f : sorted) {
    const std::size_t top = top_count(f, n);
    std::size_t tp = 0;
    for (std::size_t i = 0; i < top; ++i) tp += canonical[order[i]] ? 1 : 0;
    const double fpr = negatives ? static_cast<double>(top - tp) / static_cast<double>(negatives) : 0.0;
    roc.points.push_back({fpr, static_cast<double>(tp) / static_cast<double>(positives)});
  }
  roc.points.push_back({1.0, 1.0});
  for (std::size_t i = 1; i < roc.points.size(); ++i) {
    const auto& a = roc.points[i - 1];
    const auto& b = roc.points[i];
    roc.auc += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2.0;
  }
  return roc;
}

RocCurve roc_curve(const GateLayout& layout, std::span<const double> scores, std::span<const ComponentId> canonical,
                   std::span<const double> fractions) {
  if (layout.level != Level::Node) throw DomainError("node canonical set given for an edge layout");
  std::vector<bool> flags(layout.size(), false);
  for (const auto& c : canonical) {
    auto it = std::find(layout.nodes.begin(), layout.nodes.end(), c);
    if (it == layout.nodes.end()) throw LookupError("canonical member " + to_string(c) + " is not ranked");
    flags[static_cast<std::size_t>(it - layout.nodes.begin())] = true;
  }
  return roc_curve(scores, flags, fractions);
}

RocCurve roc_curve(const GateLayout& layout, std::span<const double> scores, std::span<const EdgeId> canonical,
                   std::span<const double> fractions) {
  if (layout.level != Level::Edge) throw DomainError("edge canonical set given for a node layout");
  std::vector<bool> flags(layout.size(), false);
  for (const auto& c : canonical) {
    auto it = std::find(layout.edges.begin(), layout.edges.end(), c);
    if (it == layout.edges.end()) throw LookupError("canonical member " + to_string(c) + " is not ranked");
    flags[static_cast<std::size_t>(it - layout.edges.begin())] = true;
  }
  return roc_curve(scores, flags, fractions);
}

std::string roc_csv(const RocCurve& roc) {
  std::string out = "fpr,tpr\n";
  char line[96];
  for (const auto& p : roc.points) {
    std::snprintf(line, sizeof line, "%.17g,%.17g\n", p.fpr, p.tpr);
    out += line;
  }
  return out;
}

nlohmann::json roc_summary(const RocCurve& roc) { return {{"auc", roc.auc}}; }

std::string metric_name(TaskKind kind) { return kind == TaskKind::Ioi ? "logit_difference" : "greater_probability"; }

std::vector<int> k_for_fractions(std::size_t n_sites, std::span<const double> fractions) {
  std::vector<int> out;
  for (double f : fractions) out.push_back(static_cast<int>(top_count(f, n_sites)));
  return out;
}

std::vector<MetricReport> pareto_sweep(const Model& model, const GateLayout& layout, std::span<const double> values,
                                       std::span<const TaskSample> samples, const CorruptedCache& cache,
                                       std::span<const int> k_list, std::uint64_t seed, const std::string& method) {
  if (k_list.empty()) throw DomainError("pareto_sweep: empty k list");
  if (!std::is_sorted(k_list.begin(), k_list.end())) throw DomainError("pareto_sweep: k list must be ascending");
  NoGradGuard guard;
  const PromptBatch batch = clean_batch(samples);
  const Tensor clean = model.forward(batch.tokens);
  const std::string name =
      std::holds_alternative<LogitDiff>(samples[0].metric) ? "logit_difference" : "greater_probability";
  std::vector<MetricReport> out;
  for (int k : k_list) {
    const Circuit circuit = form_circuit(layout, values, k);
    const Tensor logits = ablate(model, batch.tokens, circuit, cache, seed);
    MetricReport r;
    r.method = method;
    r.level = layout.level;
    r.k = k;
    r.metric_name = name;
    r.metric_value = mean_task_metric(logits, samples);
    r.kl_divergence = kl_faithfulness(clean, logits, batch.answer_positions);
    r.seed = seed;
    out.push_back(std::move(r));
  }
  return out;
}

std::string reports_csv(std::span<const MetricReport> reports) {
  std::string out = "method,level,k,metric_name,metric_value,kl_divergence,seed\n";
  char nums[128];
  for (const auto& r : reports) {
    std::snprintf(nums, sizeof nums, "%d,", r.k);
    out += r.method + "," + to_string(r.level) + "," + nums + r.metric_name + ",";
    std::snprintf(nums, sizeof nums, "%.17g,%.17g,%llu\n", r.metric_value, r.kl_divergence,
                  static_cast<unsigned long long>(r.seed));
    out += nums;
  }
  return out;
}

std::vector<double> normalize_scores(std::span<const double> scores) {
  double top = 0.0;
  for (double s : scores) {
    if (!std::isfinite(s) || s < 0.0) throw DomainError("normalize_scores: scores must be finite and >= 0");
    top = std::max(top, s);
  }
  std::vector<double> out(scores.begin(), scores.end());
  if (top > 0.0)
    for (double& s : out) s /= top;
  return out;
}

}  // namespace ibc
