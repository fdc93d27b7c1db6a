#pragma once

// Discrete circuits: budgeted selection from gate values, persistence, and ablation.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ibcircuit/ib.hpp"
#include "ibcircuit/model.hpp"

namespace ibc {

struct Selection {
  std::vector<std::size_t> members;  // ascending indices
  double tau = 0.0;
};

// tau = inf{t : #(value > t) <= k}, i.e. the (k+1)-th largest value (-1 when k >= n).
// Members are the indices with value strictly above tau, so ties at tau are dropped.
Selection select_budget(std::span<const double> values, std::size_t k);

struct Circuit {
  Level level = Level::Node;
  std::vector<ComponentId> nodes;
  std::vector<EdgeId> edges;
  int budget_k = 0;
  double threshold_tau = 0.0;
  std::string source_run_id;

  std::size_t size() const { return level == Level::Node ? nodes.size() : edges.size(); }
  bool contains(const ComponentId& id) const;
  bool contains(const EdgeId& id) const;
  void validate() const;
  bool operator==(const Circuit&) const = default;
};

// `values` are aligned with the layout's sites and must lie in [0, 1].
Circuit form_circuit(const GateLayout& layout, std::span<const double> values, int k, std::string source_run_id = "");
Circuit form_circuit(const IBWeights& weights, int k, std::string source_run_id = "");

// Every member's value exceeds tau and every non-member's does not.
void check_threshold(const Circuit& circuit, const GateLayout& layout, std::span<const double> values);

nlohmann::json circuit_to_json(const Circuit& c);
Circuit circuit_from_json(const nlohmann::json& j);
void save_circuit(const Circuit& c, const std::filesystem::path& path);
Circuit load_circuit(const std::filesystem::path& path);

// Source contributions from the corrupted dataset; ablation draws whole [seq, d_model] slabs.
class CorruptedCache {
 public:
  static CorruptedCache build(const Model& model, const TokenBatch& corrupted);

  const ActivationCache& stacks() const { return stacks_; }
  std::size_t samples() const { return samples_; }
  std::size_t seq() const { return seq_; }
  // [batch, seq, d_model]: for each row an independently drawn corrupted sample of `id`.
  Tensor draw(const ComponentId& id, std::size_t batch, std::mt19937_64& rng) const;

 private:
  ActivationCache stacks_;
  std::size_t samples_ = 0, seq_ = 0;
};

// Node level: non-member heads take corrupted draws. Edge level: each non-member edge's
// source contribution is replaced, per edge, by a corrupted draw of that source.
Tensor ablate(const Model& model, const TokenBatch& tokens, const Circuit& circuit, const CorruptedCache& cache,
              std::uint64_t seed);

}  // namespace ibc
