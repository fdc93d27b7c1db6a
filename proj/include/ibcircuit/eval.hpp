#pragma once

// ROC against a ground-truth circuit and budget sweeps over ablated circuits.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ibcircuit/circuit.hpp"
#include "ibcircuit/task.hpp"

namespace ibc {

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  bool operator==(const RocPoint&) const = default;
};

struct RocCurve {
  std::vector<RocPoint> points;
  double auc = 0.0;
};

std::vector<double> default_fractions();  // 0.1, 0.2, ..., 1.0

// Order used for every top-k cut: score descending, then index ascending.
std::vector<std::size_t> rank_order(std::span<const double> scores);

// Top ceil(f * n) selection per fraction; points closed with (0,0) and (1,1); trapezoid AUC.
RocCurve roc_curve(std::span<const double> scores, const std::vector<bool>& canonical,
                   std::span<const double> fractions);
RocCurve roc_curve(const GateLayout& layout, std::span<const double> scores, std::span<const ComponentId> canonical,
                   std::span<const double> fractions);
RocCurve roc_curve(const GateLayout& layout, std::span<const double> scores, std::span<const EdgeId> canonical,
                   std::span<const double> fractions);

std::string roc_csv(const RocCurve& roc);
nlohmann::json roc_summary(const RocCurve& roc);

struct MetricReport {
  std::string method;
  Level level = Level::Node;
  int k = 0;
  std::string metric_name;
  double metric_value = 0.0;
  double kl_divergence = 0.0;
  std::uint64_t seed = 0;
};

std::string metric_name(TaskKind kind);

// One report per k: form the circuit from `values` (in [0, 1]), ablate with corrupted
// draws, then score the task metric and KL against the clean model on `samples`.
std::vector<MetricReport> pareto_sweep(const Model& model, const GateLayout& layout, std::span<const double> values,
                                       std::span<const TaskSample> samples, const CorruptedCache& cache,
                                       std::span<const int> k_list, std::uint64_t seed, const std::string& method);

// k values for fractions of a site count, rounded up.
std::vector<int> k_for_fractions(std::size_t n_sites, std::span<const double> fractions);

std::string reports_csv(std::span<const MetricReport> reports);

// Divides by the maximum so attribution scores can be cut like gates.
std::vector<double> normalize_scores(std::span<const double> scores);

}  // namespace ibc
