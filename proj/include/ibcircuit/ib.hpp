#pragma once

// Information-bottleneck gates over transformer components.
//
// Every gated site i carries a logit omega_i and a gate lambda_i = sigmoid(omega_i).
// A gated activation mixes signal with Gaussian noise drawn from the site's batch
// statistics, h' = lambda * h + (1 - lambda) * eps, eps ~ N(mu, sigma^2).
// Training minimizes KL(clean || distorted) at the answer positions plus beta
// times the closed-form KL between the gated distribution and the noise prior.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ibcircuit/model.hpp"
#include "ibcircuit/tensor.hpp"

namespace ibc {

enum class Level { Node, Edge };
enum class Variant { IB, HardConcrete, SPObjective };

std::string to_string(Level level);
std::string to_string(Variant variant);
Level parse_level(std::string_view text);
Variant parse_variant(std::string_view text);

// Gates are clamped into [kLambdaMin, kLambdaMax] before use so -log(1 - lambda) stays finite.
inline constexpr double kLambdaMin = 1e-10;
inline constexpr double kLambdaMax = 1.0 - 1e-10;
inline constexpr double kSigmaFloor = 1e-4;
inline constexpr double kInitialLambda = 0.9;

struct GaussianStats {
  std::vector<double> mu;
  std::vector<double> sigma;
};
using BatchStats = std::map<ComponentId, GaussianStats>;

// Per component and hidden dimension: mean and population std over (batch x positions),
// std floored at kSigmaFloor.
BatchStats compute_batch_stats(const ActivationCache& cache);

// Which sites carry gates: heads (node level) or residual edges (edge level).
struct GateLayout {
  Level level = Level::Node;
  std::vector<ComponentId> nodes;
  std::vector<EdgeId> edges;

  static GateLayout for_model(const ModelConfig& cfg, Level level);
  std::size_t size() const { return level == Level::Node ? nodes.size() : edges.size(); }
  std::string site_name(std::size_t i) const;
  // Component whose activation feeds site i.
  const ComponentId& source_of(std::size_t i) const { return level == Level::Node ? nodes[i] : edges[i].src; }
};

Tensor perturb_node(const Tensor& h, const Tensor& lambda, const Tensor& eps);

struct GatedSource {
  Tensor h;
  Tensor lambda;
  Tensor eps;
};
Tensor perturb_edge_sum(std::span<const GatedSource> sources);

// Noise reproducible from (seed, step, site).
class NoiseSampler {
 public:
  NoiseSampler(std::uint64_t seed, std::uint64_t step) : seed_(seed), step_(step) {}
  Tensor draw(std::size_t site, const GaussianStats& stats, const Shape& shape) const;

 private:
  std::uint64_t seed_, step_;
};

// lambdas: [layout.size()] gates already in [0, 1]. Gradients reach only `lambdas`
// (model parameters are expected to be frozen).
Tensor forward_distorted(const Model& model, const TokenBatch& tokens, const GateLayout& layout, const Tensor& lambdas,
                         const BatchStats& stats, const NoiseSampler& noise);

// Mean over the batch of KL(softmax(clean) || softmax(distorted)) at the answer positions.
Tensor kl_output_loss(const Tensor& clean_logits, const Tensor& distorted_logits, std::span<const std::size_t> positions);

// KL(N(lambda h + (1 - lambda) mu, (1 - lambda)^2 sigma^2) || N(mu, sigma^2)).
double gaussian_gate_kl(double lambda, double h, double mu, double sigma);

// Per site: mean over (batch, positions, dims) of (h - mu)^2 / sigma^2 for the site's source.
std::vector<double> normalized_deviation(const ActivationCache& cache, const BatchStats& stats, const GateLayout& layout);

// Mean over sites of -log(1 - l) + ((1 - l)^2 - 1) / 2 + l^2 * dev / 2. Requires lambda < 1.
Tensor mi_loss(const Tensor& lambdas, std::span<const double> deviation);

Tensor total_objective(const Tensor& kl, const Tensor& mi, double beta);

// ---- hard-concrete and SP variants -------------------------------------------

struct HardConcrete {
  double temperature = 2.0 / 3.0;
  double lower = -0.1;
  double upper = 1.1;

  // Stretched, clipped concrete sample; differentiable in log_alpha.
  Tensor sample(const Tensor& log_alpha, std::mt19937_64& rng) const;
  // E[gate], integrating the closed-form CDF of the stretched concrete.
  double expected_gate(double log_alpha) const;
  // P(gate != 0).
  double nonzero_probability(double log_alpha) const;
  Tensor nonzero_probability(const Tensor& log_alpha) const;
};

// Mean probability of a gate being non-zero; for deterministic gates in [0, 1], their mean.
Tensor sp_penalty(const Tensor& gates);

// ---- training ------------------------------------------------------------------

struct TrainConfig {
  double beta = 1.0;
  double lr = 0.05;
  int steps = 1300;
  int warmup_steps = 0;
  int batch_size = 16;
  std::uint64_t seed = 0;
  Level level = Level::Node;
  Variant variant = Variant::IB;
  bool freeze_stats = false;

  static TrainConfig node_defaults();
  static TrainConfig edge_defaults();
  void validate() const;
};

struct IBWeights {
  Level level = Level::Node;
  Variant variant = Variant::IB;
  GateLayout layout;
  std::vector<double> omega;

  // Evaluation-time gates: clamped sigmoid, or the expected hard-concrete gate.
  std::vector<double> gates() const;
  double mean_gate() const;
};

struct TrajectoryPoint {
  int step = 0;
  double kl_loss = 0.0;
  double mi_loss = 0.0;
  double mean_lambda = 0.0;
  double objective = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  IBWeights weights;
  std::vector<TrajectoryPoint> trajectory;
};

using Batcher = std::function<PromptBatch(std::size_t step)>;

// Adam on omega only; throws TrainingError if the objective turns non-finite.
TrainResult train(const Model& model, const Batcher& batcher, const TrainConfig& config);

// Deterministic evaluation of both loss terms at fixed weights and a fixed noise seed.
struct LossPoint {
  double kl = 0.0;
  double mi = 0.0;
};
LossPoint evaluate_losses(const Model& model, const IBWeights& weights, const PromptBatch& batch,
                          std::uint64_t noise_seed);

IBWeights initial_weights(const ModelConfig& cfg, Level level, Variant variant);

std::string trajectory_csv(std::span<const TrajectoryPoint> points);

void save_ib_weights(const IBWeights& weights, const ModelConfig& cfg, const std::filesystem::path& path);
IBWeights load_ib_weights(const std::filesystem::path& path, const ModelConfig& cfg);

}  // namespace ibc
