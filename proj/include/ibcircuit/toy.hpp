#pragma once

// Toy-model pretraining and the ablation oracle that defines ground-truth circuits.

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <vector>

#include "ibcircuit/model.hpp"
#include "ibcircuit/task.hpp"

namespace ibc {

struct PretrainConfig {
  int steps = 4000;
  int batch_size = 32;
  double lr = 3e-3;
  int eval_every = 100;
  // Keep training at least this long even once the floor is met.
  int min_steps = 600;
  std::uint64_t seed = 0;
  // Greater-Than only: chance that a drawn sample is replaced by its corrupted prompt (start year
  // 01, target any later year), so year 01 is as familiar as any other start year.
  double corrupted_rate = 1.0 / 97.0;
  // Task-metric floor on the held-out set; NaN picks the task default (IOI 2.0, Greater-Than 0.5).
  double floor = std::numeric_limits<double>::quiet_NaN();
  // Called at every evaluation with (steps run, last training loss, held-out metric).
  std::function<void(int, double, double)> progress;

  void validate() const;
};

double default_floor(TaskKind kind);

struct PretrainResult {
  Model model;
  int steps_run = 0;
  double heldout_metric = 0.0;
  double final_loss = 0.0;
};

// Cross-entropy at answer positions on all parameters; throws TrainingError when the
// held-out metric never reaches the floor.
PretrainResult pretrain_toy(const ModelConfig& cfg, TaskKind kind, std::span<const TaskSample> train,
                            std::span<const TaskSample> heldout, const PretrainConfig& config);

// Target distribution at the answer position: one-hot IO name, or uniform over years > YY.
std::vector<double> answer_target(const TaskSample& sample, std::size_t vocab_size);

// Replaces one component's contribution by its per-position mean over the batch.
ActivationCache mean_patch(const ActivationCache& cache, std::span<const ComponentId> ids);

struct CanonicalCircuit {
  std::vector<ComponentId> members;
  double delta = 0.0;
  std::map<ComponentId, double> drops;  // clean metric minus single-head mean-ablated metric
};

CanonicalCircuit canonical_from_oracle(const Model& model, std::span<const TaskSample> samples, double delta);

// Edge analogue: one edge at a time has its source contribution replaced by the per-position mean.
struct CanonicalEdges {
  std::vector<EdgeId> members;
  double delta = 0.0;
  std::map<EdgeId, double> drops;
};

CanonicalEdges canonical_edges_from_oracle(const Model& model, std::span<const TaskSample> samples, double delta);

}  // namespace ibc
