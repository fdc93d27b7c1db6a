#include "fixtures.hpp"

#include <boost/math/special_functions/erf.hpp>
#include <algorithm>
#include <cmath>
#include <random>

namespace fx {

using namespace ibc;

Model random_model(const ModelConfig& cfg, std::uint64_t seed, double scale) {
  Model m = Model::init_random(cfg, seed);
  std::mt19937_64 rng(seed ^ 0xABCDEF);
  std::normal_distribution<double> normal(0.0, scale);
  for (auto& [name, t] : m.named_parameters()) {
    if (name.find("ln") != std::string::npos) continue;
    for (double& v : t->mutable_values()) v = normal(rng);
  }
  return m;
}

ModelConfig small_config(int layers, int heads) {
  ModelConfig c;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_head = 4;
  c.d_model = heads * 4;
  c.d_mlp = 16;
  c.vocab_size = 11;
  c.max_seq_len = 6;
  return c;
}

TokenBatch random_tokens(std::size_t batch, std::size_t seq, int vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(0, vocab - 1);
  TokenBatch t{batch, seq, {}};
  for (std::size_t i = 0; i < batch * seq; ++i) t.ids.push_back(tok(rng));
  return t;
}

PromptBatch random_prompts(std::size_t batch, std::size_t seq, int vocab, std::uint64_t seed) {
  PromptBatch p;
  p.tokens = random_tokens(batch, seq, vocab, seed);
  std::mt19937_64 rng(seed + 1);
  std::uniform_int_distribution<std::size_t> pos(0, seq - 1);
  for (std::size_t b = 0; b < batch; ++b) p.answer_positions.push_back(pos(rng));
  return p;
}

Model copy_head_model() {
  const Vocab& v = Vocab::toy();
  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 3;
  c.d_head = 56;
  c.d_model = 168;
  c.d_mlp = 4;
  c.vocab_size = static_cast<int>(v.size());
  c.max_seq_len = 12;
  Model m = Model::init_random(c, 0);
  auto zero = [](Tensor& t) {
    for (double& x : t.mutable_values()) x = 0.0;
  };
  for (auto& [name, t] : m.named_parameters()) {
    if (name.find("ln") == std::string::npos) zero(*t);
  }
  const std::size_t V = v.size(), pos0 = V;
  auto set = [](Tensor& t, std::size_t r, std::size_t col, double x) { t.mutable_values()[r * t.dim(1) + col] = x; };
  for (std::size_t i = 0; i < V; ++i) set(m.tok_embed(), i, i, 1.0);
  for (std::size_t p = 0; p < 12; ++p) set(m.pos_embed(), p, pos0 + p, 1.0);
  for (std::size_t i = 0; i < V; ++i) set(m.unembed(), i, i, 1.0);

  HeadParams& h = m.layer(0).heads[0];
  set(h.w_q, pos0 + 11, 0, 1.0);
  set(h.w_k, pos0 + 2, 0, 1.0);
  for (std::size_t n = 0; n < v.name_count(); ++n) {
    const auto tok = static_cast<std::size_t>(v.name(n));
    set(h.w_v, tok, n, 1.0);
    set(h.w_o, n, tok, 1.0);
  }
  return m;
}

std::vector<TaskSample> balanced_abba(std::size_t pool) {
  const Vocab& v = Vocab::toy();
  std::vector<TaskSample> out;
  for (std::size_t a = 0; a < pool; ++a) {
    for (std::size_t b = 0; b < pool; ++b) {
      if (a == b) continue;
      const int A = v.name(a), B = v.name(b);
      TaskSample s;
      s.clean = {v.bos(), v.id("when"), A, v.id("and"), B, v.id("went"), v.id("to"), v.id("store"), B,
                 v.id("gave"), v.id("drink"), v.id("to")};
      s.corrupted = s.clean;
      s.corrupted[2] = v.name((a + 1) % pool == b ? (a + 2) % pool : (a + 1) % pool);
      s.answer_position = 11;
      s.metric = LogitDiff{A, B};
      out.push_back(s);
    }
  }
  return out;
}

Model linear_readout_model(std::uint64_t seed) {
  ModelConfig c = small_config(1, 1);
  c.final_layer_norm = false;
  Model m = random_model(c, seed, 0.5);
  for (auto* t : {&m.layer(0).w_in, &m.layer(0).b_in, &m.layer(0).w_out, &m.layer(0).b_out})
    for (double& x : t->mutable_values()) x = 0.0;
  return m;
}

double monte_carlo_gate_kl(double lambda, double h, double mu, double sigma, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double mq = lambda * h + (1.0 - lambda) * mu;
  const double sq = (1.0 - lambda) * sigma;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = (static_cast<double>(i) + u(rng)) / static_cast<double>(n);
    const double z = std::sqrt(2.0) * boost::math::erf_inv(2.0 * p - 1.0);
    const double x = mq + sq * z;
    const double log_q = -std::log(sq) - 0.5 * z * z;
    const double log_p = -std::log(sigma) - 0.5 * (x - mu) * (x - mu) / (sigma * sigma);
    total += log_q - log_p;
  }
  return total / static_cast<double>(n);
}

RocOracle roc_oracle(const std::vector<bool>& labels, const std::vector<int>& tenths) {
  const long n = static_cast<long>(labels.size());
  const long pos = std::count(labels.begin(), labels.end(), true), neg = n - pos;
  std::vector<std::pair<long, long>> counts = {{0, 0}};  // (fp, tp)
  for (int t : tenths) {
    const long top = (t * n + 9) / 10;
    long tp = 0;
    for (long i = 0; i < top; ++i) tp += labels[static_cast<std::size_t>(i)];
    counts.push_back({top - tp, tp});
  }
  RocOracle out;
  for (const auto& [fp, tp] : counts) {
    out.points.push_back({neg ? static_cast<double>(fp) / static_cast<double>(neg) : 0.0,
                          static_cast<double>(tp) / static_cast<double>(pos)});
  }
  out.points.push_back({1.0, 1.0});
  // Twice the area in units of 1 / (neg * pos); with no negatives, every point before the
  // closing one sits at fpr 0.
  counts.push_back({neg, pos});
  if (neg == 0) {
    out.auc = (1.0 + out.points[out.points.size() - 2].second) / 2.0;
    return out;
  }
  long twice = 0;
  for (std::size_t i = 1; i < counts.size(); ++i)
    twice += (counts[i].first - counts[i - 1].first) * (counts[i].second + counts[i - 1].second);
  out.auc = static_cast<double>(twice) / static_cast<double>(2 * neg * pos);
  return out;
}

}  // namespace fx
