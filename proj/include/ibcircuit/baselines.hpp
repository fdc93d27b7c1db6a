#pragma once

// First-order attribution baselines: attribution patching over heads and its edge version.

#include <span>
#include <string>
#include <vector>

#include "ibcircuit/ib.hpp"
#include "ibcircuit/task.hpp"

namespace ibc {

struct AttributionScores {
  GateLayout layout;
  std::vector<double> scores;  // aligned with layout sites, all >= 0
};

// score(head) = |sum over positions and dims of (h_corrupt - h_clean) * d metric / d h|, averaged
// over the batch, with the gradient taken on the clean run.
AttributionScores attribution_patching_node(const Model& model, const PromptBatch& clean, const PromptBatch& corrupted,
                                            std::span<const TaskSample> samples);

// score(j -> i) uses the gradient with respect to target i's input instead.
AttributionScores eap_edge(const Model& model, const PromptBatch& clean, const PromptBatch& corrupted,
                           std::span<const TaskSample> samples);

// `component_id,score`, highest first (ties by site order).
std::string scores_csv(const AttributionScores& s);

}  // namespace ibc
