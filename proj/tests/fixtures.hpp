#pragma once

#include <cstdint>
#include <vector>

#include "ibcircuit/model.hpp"
#include "ibcircuit/task.hpp"

namespace fx {

// Random model whose weights have standard deviation `scale` (layer norms stay identity).
ibc::Model random_model(const ibc::ModelConfig& cfg, std::uint64_t seed, double scale = 0.3);

ibc::ModelConfig small_config(int layers = 1, int heads = 2);

ibc::TokenBatch random_tokens(std::size_t batch, std::size_t seq, int vocab, std::uint64_t seed);

ibc::PromptBatch random_prompts(std::size_t batch, std::size_t seq, int vocab, std::uint64_t seed);

// One layer, three heads over one-hot token and position subspaces. Head 0 attends from the
// last position to position 2 and writes that token back; heads 1 and 2 have W_O = 0 and the
// MLP is zero, so only head 0 moves information.
ibc::Model copy_head_model();

// ABBA IOI prompts over every ordered pair of the first `pool` names, so each name is the IO
// equally often.
std::vector<ibc::TaskSample> balanced_abba(std::size_t pool);

// No final layer norm, zero MLP: logits are affine in every head output.
ibc::Model linear_readout_model(std::uint64_t seed);

}  // namespace fx

namespace fx {

// Monte-Carlo KL(N(lambda h + (1 - lambda) mu, (1 - lambda)^2 sigma^2) || N(mu, sigma^2)): the
// mean log-density ratio over n draws from the first Gaussian. Draws are stratified (one
// uniform per stratum of width 1/n, mapped through the normal quantile) to keep the
// estimator's variance small at small lambda.
double monte_carlo_gate_kl(double lambda, double h, double mu, double sigma, std::size_t n, std::uint64_t seed);

}  // namespace fx

namespace fx {

// Confusion-matrix ROC for labels already in rank order, at fractions tenths[i] / 10, with the
// top-count ceil(tenths * n / 10) done in integers. Points are closed with (0,0) and (1,1);
// the AUC is summed exactly in integers and divided once.
struct RocOracle {
  std::vector<std::pair<double, double>> points;  // (fpr, tpr)
  double auc = 0.0;
};
RocOracle roc_oracle(const std::vector<bool>& labels_in_rank_order, const std::vector<int>& tenths);

}  // namespace fx
