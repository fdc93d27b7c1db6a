#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "fixtures.hpp"
#include "ibcircuit/errors.hpp"
#include "ibcircuit/ib.hpp"
#include "ibcircuit/ibck.hpp"

using namespace ibc;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "ibcircuit_test_ib";
  fs::create_directories(dir);
  return dir / name;
}

Tensor gates_of(const Tensor& omega) { return clamp(sigmoid(omega), kLambdaMin, kLambdaMax); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a.at(i) - b.at(i)));
  return worst;
}

struct Fixture {
  Model model;
  PromptBatch batch;
  CachedRun clean;
  BatchStats stats;
};

Fixture make_setup(const ModelConfig& cfg, std::uint64_t seed, std::size_t batch = 4) {
  Fixture s{fx::random_model(cfg, seed), fx::random_prompts(batch, 5, cfg.vocab_size, seed + 1), {}, {}};
  NoGradGuard guard;
  s.clean = run_with_cache(s.model, s.batch.tokens);
  s.stats = compute_batch_stats(s.clean.cache);
  return s;
}

}  // namespace

// ---- batch statistics --------------------------------------------------------

TEST(BatchStats, ConstantActivationsHitTheFloor) {
  ActivationCache cache;
  cache.emplace(ComponentId::mlp(0), Tensor::full({2, 3, 4}, 1.5));
  const auto stats = compute_batch_stats(cache);
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_EQ(stats.at(ComponentId::mlp(0)).mu[j], 1.5);
    EXPECT_EQ(stats.at(ComponentId::mlp(0)).sigma[j], kSigmaFloor);
  }
}

TEST(BatchStats, PlusMinusOne) {
  ActivationCache cache;
  cache.emplace(ComponentId::mlp(0), Tensor::from({2, 1, 1}, {1.0, -1.0}));
  const auto all = compute_batch_stats(cache);
  const auto& s = all.at(ComponentId::mlp(0));
  EXPECT_EQ(s.mu[0], 0.0);
  EXPECT_EQ(s.sigma[0], 1.0);
}

TEST(BatchStats, MatchesTwoPassOracle) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(2.0, 3.0);
  std::vector<double> v(5 * 7 * 6);
  for (double& x : v) x = n(rng);
  ActivationCache cache;
  cache.emplace(ComponentId::attn_head(0, 0), Tensor::from({5, 7, 6}, v));
  const auto all = compute_batch_stats(cache);
  const auto& s = all.at(ComponentId::attn_head(0, 0));
  for (std::size_t j = 0; j < 6; ++j) {
    double m = 0.0, var = 0.0;
    for (std::size_t r = 0; r < 35; ++r) m += v[r * 6 + j];
    m /= 35;
    for (std::size_t r = 0; r < 35; ++r) var += (v[r * 6 + j] - m) * (v[r * 6 + j] - m);
    EXPECT_NEAR(s.mu[j], m, 1e-12);
    EXPECT_NEAR(s.sigma[j], std::sqrt(var / 35), 1e-12);
  }
  EXPECT_THROW(compute_batch_stats({}), ShapeError);
}

// ---- perturbation --------------------------------------------------------------

TEST(Perturb, NodeExamples) {
  const Tensor h = Tensor::from({3}, {1, -2, 3});
  const Tensor eps = Tensor::from({3}, {7, 8, 9});
  EXPECT_EQ(perturb_node(h, Tensor::scalar(1.0), eps).values()[1], -2.0);
  EXPECT_EQ(perturb_node(h, Tensor::scalar(0.0), eps).values()[2], 9.0);
  EXPECT_EQ(perturb_node(Tensor::from({1}, {2}), Tensor::scalar(0.5), Tensor::from({1}, {0})).item(), 1.0);
  EXPECT_THROW(perturb_node(h, Tensor::scalar(0.5), Tensor::zeros({2})), ShapeError);
}

TEST(Perturb, EdgeExamples) {
  const GatedSource a{Tensor::from({1}, {1}), Tensor::scalar(0.5), Tensor::from({1}, {0})};
  const GatedSource b{Tensor::from({1}, {2}), Tensor::scalar(0.5), Tensor::from({1}, {0})};
  const std::vector<GatedSource> two = {a, b};
  EXPECT_EQ(perturb_edge_sum(two).item(), 1.5);
  const std::vector<GatedSource> noise_only = {{Tensor::from({1}, {4}), Tensor::scalar(0.0), Tensor::from({1}, {-3})}};
  EXPECT_EQ(perturb_edge_sum(noise_only).item(), -3.0);
  EXPECT_THROW(perturb_edge_sum({}), ShapeError);
  const std::vector<GatedSource> bad = {a, {Tensor::zeros({2}), Tensor::scalar(0.5), Tensor::zeros({2})}};
  EXPECT_THROW(perturb_edge_sum(bad), ShapeError);
}

TEST(Perturb, LayoutSizes) {
  const ModelConfig cfg = fx::small_config(2, 3);
  EXPECT_EQ(GateLayout::for_model(cfg, Level::Node).size(), 6u);
  EXPECT_EQ(GateLayout::for_model(cfg, Level::Edge).size(), enumerate_edges(cfg).size());
  EXPECT_EQ(GateLayout::for_model(cfg, Level::Node).site_name(4), "L1H1");
}

// ---- losses --------------------------------------------------------------------

TEST(KlLoss, Examples) {
  const std::vector<std::size_t> pos = {0};
  const Tensor clean = Tensor::from({1, 1, 2}, {0.0, std::log(2.0)});
  const Tensor flat = Tensor::from({1, 1, 2}, {0.0, 0.0});
  const double oracle = (1.0 / 3.0) * std::log((1.0 / 3.0) / 0.5) + (2.0 / 3.0) * std::log((2.0 / 3.0) / 0.5);
  EXPECT_NEAR(kl_output_loss(clean, flat, pos).item(), oracle, 1e-14);
  EXPECT_NEAR(oracle, 0.0566, 5e-5);
  EXPECT_NEAR(kl_output_loss(clean, clean, pos).item(), 0.0, 1e-15);
  const Tensor shifted = Tensor::from({1, 1, 2}, {5.0, 5.0});
  EXPECT_NEAR(kl_output_loss(clean, shifted, pos).item(), oracle, 1e-14);
  const Tensor clean_shifted = Tensor::from({1, 1, 2}, {-3.0, std::log(2.0) - 3.0});
  EXPECT_NEAR(kl_output_loss(clean_shifted, flat, pos).item(), oracle, 1e-14);
  const std::vector<std::size_t> bad = {1};
  EXPECT_THROW(kl_output_loss(clean, flat, bad), LookupError);
  EXPECT_THROW(kl_output_loss(clean, Tensor::zeros({1, 1, 3}), pos), ShapeError);
}

TEST(MiLoss, ClosedFormExamples) {
  EXPECT_NEAR(gaussian_gate_kl(0.5, 1.0, 0.0, 1.0), 0.443147, 1e-6);
  EXPECT_NEAR(gaussian_gate_kl(0.5, 0.0, 0.0, 1.0), 0.318147, 1e-6);
  EXPECT_NEAR(gaussian_gate_kl(0.5, 3.0 + 2.0, 3.0, 2.0), 0.443147, 1e-6);
}

TEST(MiLoss, ZeroGatesGiveExactlyZero) {
  const std::vector<double> dev = {0.0, 1.0, 17.5};
  EXPECT_EQ(mi_loss(Tensor::zeros({3}), dev).item(), 0.0);
  EXPECT_THROW(mi_loss(Tensor::from({1}, {1.0}), std::vector<double>{1.0}), DomainError);
  EXPECT_THROW(mi_loss(Tensor::from({1}, {-0.1}), std::vector<double>{1.0}), DomainError);
  EXPECT_THROW(mi_loss(Tensor::zeros({2}), std::vector<double>{1.0}), ShapeError);
}

TEST(MiLoss, NondecreasingInEachGate) {
  double prev = -1.0;
  for (double l = 0.0; l < 0.99; l += 0.01) {
    const double v = mi_loss(Tensor::from({1}, {l}), std::vector<double>{0.3}).item();
    EXPECT_GE(v, prev);
    EXPECT_GE(v, 0.0);
    prev = v;
  }
}

TEST(MiLoss, MatchesMonteCarlo) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> lam(0.05, 0.95), sig(0.5, 2.0), loc(-2.0, 2.0);
  for (int i = 0; i < 20; ++i) {
    const double l = lam(rng), mu = loc(rng), s = sig(rng), h = mu + loc(rng) * s;
    const double closed = gaussian_gate_kl(l, h, mu, s);
    const double mc = fx::monte_carlo_gate_kl(l, h, mu, s, 1'000'000, 100 + i);
    EXPECT_LT(std::abs(closed - mc) / closed, 0.02) << "lambda " << l << " closed " << closed << " mc " << mc;
  }
}

// The batch-level loss is the site-mean of the closed form averaged over the site's activations.
TEST(MiLoss, AgreesWithPerElementClosedForm) {
  const Fixture s = make_setup(fx::small_config(1, 2), 5);
  const GateLayout layout = GateLayout::for_model(s.model.config(), Level::Node);
  const std::vector<double> lam = {0.3, 0.8};
  const double got = mi_loss(Tensor::from({2}, lam), normalized_deviation(s.clean.cache, s.stats, layout)).item();
  double expect = 0.0;
  for (std::size_t i = 0; i < 2; ++i) {
    const Tensor& h = s.clean.cache.at(layout.nodes[i]);
    const auto& st = s.stats.at(layout.nodes[i]);
    const std::size_t d = st.mu.size();
    double acc = 0.0;
    for (std::size_t k = 0; k < h.numel(); ++k) acc += gaussian_gate_kl(lam[i], h.at(k), st.mu[k % d], st.sigma[k % d]);
    expect += acc / static_cast<double>(h.numel()) / 2.0;
  }
  EXPECT_NEAR(got, expect, 1e-12);
}

TEST(Objective, Arithmetic) {
  EXPECT_NEAR(total_objective(Tensor::scalar(0.2), Tensor::scalar(0.4), 1.0).item(), 0.6, 1e-15);
  EXPECT_EQ(total_objective(Tensor::scalar(0.2), Tensor::scalar(0.4), 0.0).item(), 0.2);
  EXPECT_THROW(total_objective(Tensor::scalar(0.2), Tensor::scalar(0.4), -1.0), DomainError);
}

// ---- distorted forward -----------------------------------------------------------

TEST(Distorted, GradientMatchesFiniteDifferences) {
  for (Level level : {Level::Node, Level::Edge}) {
    const Fixture s = make_setup(fx::small_config(1, 2), 7);
    const GateLayout layout = GateLayout::for_model(s.model.config(), level);
    const auto dev = normalized_deviation(s.clean.cache, s.stats, layout);
    const NoiseSampler noise(99, 3);
    auto objective = [&](const Tensor& omega) {
      const Tensor g = gates_of(omega);
      const Tensor logits = forward_distorted(s.model, s.batch.tokens, layout, g, s.stats, noise);
      return total_objective(kl_output_loss(s.clean.logits, logits, s.batch.answer_positions), mi_loss(g, dev), 1.0);
    };
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    std::vector<double> w(layout.size());
    for (double& x : w) x = u(rng);
    EXPECT_LT(finite_diff_check(objective, Tensor::from({w.size()}, w)), 1e-4) << to_string(level);
  }
}

TEST(Distorted, NoiselessLimitIsTheCleanModel) {
  for (Level level : {Level::Node, Level::Edge}) {
    const Fixture s = make_setup(fx::small_config(2, 2), 9);
    const GateLayout layout = GateLayout::for_model(s.model.config(), level);
    const Tensor g = Tensor::full({layout.size()}, kLambdaMax);
    const Tensor logits = forward_distorted(s.model, s.batch.tokens, layout, g, s.stats, NoiseSampler(1, 0));
    EXPECT_LT(max_abs_diff(logits, s.clean.logits), 1e-6) << to_string(level);
    EXPECT_LT(kl_output_loss(s.clean.logits, logits, s.batch.answer_positions).item(), 1e-6);
  }
}

TEST(Distorted, FloorNoiseApproachesMeanAblation) {
  const Fixture s = make_setup(fx::small_config(2, 2), 10, 6);
  const GateLayout layout = GateLayout::for_model(s.model.config(), Level::Node);
  BatchStats tight = s.stats;
  for (auto& [id, st] : tight) std::fill(st.sigma.begin(), st.sigma.end(), kSigmaFloor);
  const Tensor g = Tensor::full({layout.size()}, kLambdaMin);
  const Tensor logits = forward_distorted(s.model, s.batch.tokens, layout, g, tight, NoiseSampler(2, 0));
  ActivationCache means;
  for (const auto& id : layout.nodes) {
    const Tensor& h = s.clean.cache.at(id);
    const auto& mu = tight.at(id).mu;
    std::vector<double> v(h.numel());
    for (std::size_t k = 0; k < v.size(); ++k) v[k] = mu[k % mu.size()];
    means.emplace(id, Tensor::from(h.shape(), v));
  }
  const Tensor oracle = run_with_patch(s.model, s.batch.tokens, means);
  EXPECT_LT(max_abs_diff(logits, oracle), 1e-2);
  EXPECT_GT(max_abs_diff(oracle, s.clean.logits), 1e-2);
}

TEST(Distorted, DeterministicUnderFixedSeed) {
  const Fixture s = make_setup(fx::small_config(2, 2), 12);
  for (Level level : {Level::Node, Level::Edge}) {
    const GateLayout layout = GateLayout::for_model(s.model.config(), level);
    const Tensor g = Tensor::full({layout.size()}, 0.4);
    const Tensor a = forward_distorted(s.model, s.batch.tokens, layout, g, s.stats, NoiseSampler(5, 1));
    const Tensor b = forward_distorted(s.model, s.batch.tokens, layout, g, s.stats, NoiseSampler(5, 1));
    const Tensor c = forward_distorted(s.model, s.batch.tokens, layout, g, s.stats, NoiseSampler(5, 2));
    EXPECT_EQ(max_abs_diff(a, b), 0.0);
    EXPECT_GT(max_abs_diff(a, c), 0.0);
  }
}

TEST(Distorted, Errors) {
  const Fixture s = make_setup(fx::small_config(1, 2), 13);
  const GateLayout layout = GateLayout::for_model(s.model.config(), Level::Node);
  EXPECT_THROW(forward_distorted(s.model, s.batch.tokens, layout, Tensor::full({3}, 0.5), s.stats, NoiseSampler(0, 0)),
               ShapeError);
  BatchStats missing = s.stats;
  missing.erase(ComponentId::attn_head(0, 1));
  EXPECT_THROW(forward_distorted(s.model, s.batch.tokens, layout, Tensor::full({2}, 0.5), missing, NoiseSampler(0, 0)),
               LookupError);
}

// ---- variants ------------------------------------------------------------------

TEST(HardConcrete, ExpectedGateMatchesSamples) {
  const HardConcrete hc;
  for (double la : {-3.0, -1.0, 0.0, 0.7, 2.5}) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(la * 100 + 1000));
    const std::size_t n = 100'000;
    const Tensor s = hc.sample(Tensor::full({n}, la), rng);
    double mean = 0.0, nonzero = 0.0;
    for (double x : s.values()) {
      mean += x;
      nonzero += x > 0.0;
    }
    mean /= n;
    nonzero /= n;
    EXPECT_LT(std::abs(mean - hc.expected_gate(la)) / hc.expected_gate(la), 0.01) << la;
    EXPECT_NEAR(nonzero, hc.nonzero_probability(la), 0.01) << la;
  }
}

TEST(HardConcrete, Limits) {
  const HardConcrete hc;
  std::mt19937_64 rng(1);
  EXPECT_EQ(hc.sample(Tensor::full({50}, 60.0), rng).values()[7], 1.0);
  EXPECT_EQ(hc.sample(Tensor::full({50}, -60.0), rng).values()[7], 0.0);
  EXPECT_NEAR(hc.expected_gate(60.0), 1.0, 1e-9);
  EXPECT_NEAR(hc.expected_gate(-60.0), 0.0, 1e-9);
  EXPECT_LT(finite_diff_check(
                [&](const Tensor& x) {
                  std::mt19937_64 r(4);
                  return hc.sample(x, r);
                },
                Tensor::from({3}, {-0.2, 0.1, 0.4})),
            1e-4);
}

TEST(SpPenalty, Examples) {
  EXPECT_EQ(sp_penalty(Tensor::zeros({4})).item(), 0.0);
  EXPECT_EQ(sp_penalty(Tensor::full({4}, 1.0)).item(), 1.0);
  EXPECT_EQ(sp_penalty(Tensor::from({2}, {0.0, 1.0})).item(), 0.5);
  EXPECT_THROW(sp_penalty(Tensor::from({1}, {1.5})), DomainError);
}

// ---- training ------------------------------------------------------------------

namespace {

Batcher prompt_batcher(int vocab, std::uint64_t seed) {
  return [=](std::size_t step) { return fx::random_prompts(8, 5, vocab, seed * 1000 + step); };
}

}  // namespace

TEST(Train, ZeroBetaKeepsGatesOpenAndShrinksKl) {
  const ModelConfig cfg = fx::small_config(2, 2);
  const Model m = fx::random_model(cfg, 14);
  TrainConfig tc;
  tc.beta = 0.0;
  tc.steps = 80;
  tc.seed = 3;
  const auto fixed = fx::random_prompts(8, 5, cfg.vocab_size, 77);
  const TrainResult r = train(m, [&](std::size_t) { return fixed; }, tc);
  for (const auto& p : r.trajectory) EXPECT_GE(p.mean_lambda, kInitialLambda - 0.05);
  const IBWeights init = initial_weights(cfg, Level::Node, Variant::IB);
  double before = 0.0, after = 0.0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    before += evaluate_losses(m, init, fixed, s).kl;
    after += evaluate_losses(m, r.weights, fixed, s).kl;
  }
  EXPECT_LT(after, before);
}

TEST(Train, DeterministicTrajectories) {
  const ModelConfig cfg = fx::small_config(1, 2);
  const Model m = fx::random_model(cfg, 15);
  for (Variant v : {Variant::IB, Variant::HardConcrete, Variant::SPObjective}) {
    TrainConfig tc = TrainConfig::edge_defaults();
    tc.variant = v;
    tc.steps = 12;
    tc.warmup_steps = 4;
    tc.seed = 21;
    const TrainResult a = train(m, prompt_batcher(cfg.vocab_size, 1), tc);
    const TrainResult b = train(m, prompt_batcher(cfg.vocab_size, 1), tc);
    EXPECT_EQ(trajectory_csv(a.trajectory), trajectory_csv(b.trajectory)) << to_string(v);
    EXPECT_EQ(a.weights.omega, b.weights.omega);
    tc.seed = 22;
    EXPECT_NE(train(m, prompt_batcher(cfg.vocab_size, 1), tc).weights.omega, a.weights.omega);
  }
}

TEST(Train, WarmupRampsTheLearningRate) {
  const ModelConfig cfg = fx::small_config(1, 1);
  TrainConfig tc = TrainConfig::edge_defaults();
  tc.steps = 6;
  tc.warmup_steps = 4;
  const TrainResult r = train(fx::random_model(cfg, 16), prompt_batcher(cfg.vocab_size, 2), tc);
  EXPECT_DOUBLE_EQ(r.trajectory[0].lr, tc.lr / 4);
  EXPECT_DOUBLE_EQ(r.trajectory[2].lr, tc.lr * 3 / 4);
  EXPECT_DOUBLE_EQ(r.trajectory[5].lr, tc.lr);
  EXPECT_EQ(trajectory_csv(r.trajectory).substr(0, 45), "step,kl_loss,mi_loss,mean_lambda,objective,lr");
}

TEST(Train, ConfigValidation) {
  TrainConfig tc;
  tc.steps = 0;
  EXPECT_THROW(tc.validate(), ConfigError);
  tc = TrainConfig{};
  tc.beta = -1;
  EXPECT_THROW(tc.validate(), ConfigError);
  tc = TrainConfig{};
  tc.warmup_steps = tc.steps + 1;
  EXPECT_THROW(tc.validate(), ConfigError);
  EXPECT_EQ(TrainConfig::node_defaults().lr, 0.05);
  EXPECT_EQ(TrainConfig::node_defaults().beta, 1.0);
  EXPECT_EQ(TrainConfig::edge_defaults().lr, 0.1);
  EXPECT_EQ(TrainConfig::edge_defaults().warmup_steps, 200);
}

TEST(IBWeightsFile, RoundTrip) {
  const ModelConfig cfg = fx::small_config(2, 2);
  for (Level level : {Level::Node, Level::Edge}) {
    IBWeights w = initial_weights(cfg, level, Variant::IB);
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n;
    for (double& x : w.omega) x = n(rng);
    save_ib_weights(w, cfg, scratch("w.ibck"));
    const IBWeights back = load_ib_weights(scratch("w.ibck"), cfg);
    EXPECT_EQ(back.omega, w.omega);
    EXPECT_EQ(back.level, level);
    save_ib_weights(back, cfg, scratch("w2.ibck"));
    EXPECT_EQ(read_file(scratch("w.ibck")), read_file(scratch("w2.ibck")));
    EXPECT_THROW(load_ib_weights(scratch("w.ibck"), fx::small_config(3, 2)), ShapeError);
  }
  EXPECT_THROW(load_ib_weights(scratch("absent.ibck"), cfg), IoError);
}
