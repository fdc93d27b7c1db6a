#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <set>

#include "fixtures.hpp"
#include "ibcircuit/errors.hpp"
#include "ibcircuit/ibck.hpp"
#include "ibcircuit/metrics.hpp"
#include "ibcircuit/task.hpp"
#include "ibcircuit/toy.hpp"

using namespace ibc;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "ibcircuit_test_tasks";
  fs::create_directories(dir);
  return dir / name;
}

bool is_name(int tok) {
  const Vocab& v = Vocab::toy();
  return tok >= v.name(0) && tok <= v.name(v.name_count() - 1);
}

}  // namespace

TEST(Vocab, Layout) {
  const Vocab& v = Vocab::toy();
  EXPECT_EQ(v.token(v.bos()), "<bos>");
  EXPECT_EQ(v.token(v.year(1)), "01");
  EXPECT_EQ(v.year(99) - v.year(0), 99);
  for (int yy = 0; yy < 100; ++yy) EXPECT_EQ(v.year(yy), v.year_begin() + yy);
  EXPECT_EQ(v.name_count(), 40u);
  EXPECT_THROW(v.id("zebra"), LookupError);
  EXPECT_NO_THROW(v.check_json(v.to_json()));
  nlohmann::json bad = v.to_json();
  bad["Mary"] = 0;
  EXPECT_THROW(v.check_json(bad), FormatError);
}

TEST(ToyIoi, Construction) {
  const Vocab& v = Vocab::toy();
  const auto samples = gen_toy_ioi(500, 3, 40);
  ASSERT_EQ(samples.size(), 500u);
  std::size_t abba = 0;
  for (const auto& s : samples) {
    ASSERT_EQ(s.clean.size(), s.corrupted.size());
    ASSERT_LT(s.answer_position, s.clean.size());
    const auto& m = std::get<LogitDiff>(s.metric);
    EXPECT_NE(m.io_token, m.s_token);
    // The repeated name is the subject; the other one is the answer.
    EXPECT_EQ(s.clean[8], m.s_token);
    EXPECT_TRUE((s.clean[2] == m.io_token && s.clean[4] == m.s_token) ||
                (s.clean[2] == m.s_token && s.clean[4] == m.io_token));
    abba += s.clean[2] == m.io_token;
    // Corrupted prompt: both names replaced by two fresh, distinct names.
    const int c = s.corrupted[2], d = s.corrupted[4];
    EXPECT_TRUE(is_name(c) && is_name(d));
    EXPECT_NE(c, d);
    for (int x : {c, d}) EXPECT_TRUE(x != m.io_token && x != m.s_token);
    for (std::size_t i = 0; i < s.clean.size(); ++i) {
      if (i != 2 && i != 4 && i != 8) EXPECT_EQ(s.clean[i], s.corrupted[i]);
    }
    EXPECT_EQ(s.clean[0], v.bos());
  }
  EXPECT_GT(abba, 200u);
  EXPECT_LT(abba, 300u);
  EXPECT_THROW(gen_toy_ioi(5, 0, 2), DomainError);
  EXPECT_THROW(gen_toy_ioi(5, 0, 41), DomainError);
  EXPECT_THROW(gen_toy_ioi(0, 0, 5), DomainError);
}

TEST(ToyIoi, NameFrequenciesAreBinomial) {
  const std::size_t n = 10000, pool = 40;
  const auto samples = gen_toy_ioi(n, 17, pool);
  std::map<int, int> count;
  for (const auto& s : samples) ++count[std::get<LogitDiff>(s.metric).io_token];
  const double p = 1.0 / pool, mean = n * p, sd = std::sqrt(n * p * (1 - p));
  EXPECT_EQ(count.size(), pool);
  for (const auto& [tok, c] : count) EXPECT_LE(std::abs(c - mean), 3 * sd) << Vocab::toy().token(tok);
}

TEST(ToyIoi, SmallestPool) {
  // Only one name lies outside {A, B}: it takes the corrupted IO slot, the subject slot any other name.
  for (const auto& s : gen_toy_ioi(50, 5, 3)) {
    const auto& m = std::get<LogitDiff>(s.metric);
    const int io_slot = s.clean[2] == m.io_token ? 2 : 4, s_slot = 6 - io_slot;
    EXPECT_NE(s.corrupted[io_slot], m.io_token);
    EXPECT_NE(s.corrupted[io_slot], m.s_token);
    EXPECT_NE(s.corrupted[io_slot], s.corrupted[s_slot]);
    EXPECT_EQ(s.corrupted[8], s.corrupted[s_slot]);
  }
}

TEST(ToyGreaterThan, Construction) {
  const Vocab& v = Vocab::toy();
  for (const auto& s : gen_toy_greater_than(300, 4)) {
    const auto& m = std::get<GreaterProb>(s.metric);
    const int yy = s.clean[6] - v.year_begin();
    EXPECT_EQ(m.threshold, yy);
    EXPECT_GE(yy, 2);
    EXPECT_LE(yy, 98);
    EXPECT_EQ(s.corrupted[6], v.year(1));
    EXPECT_EQ(m.year_begin, v.year_begin());
    EXPECT_EQ(m.year_count, 100);
    EXPECT_EQ(s.answer_position, s.clean.size() - 1);
  }
}

TEST(Generators, DeterministicAndRoundTrip) {
  for (TaskKind kind : {TaskKind::Ioi, TaskKind::GreaterThan}) {
    const auto a = generate(kind, 64, 9), b = generate(kind, 64, 9), c = generate(kind, 64, 10);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, c);
    write_jsonl(scratch("s.jsonl"), a);
    EXPECT_EQ(read_jsonl(scratch("s.jsonl")), a);
    write_jsonl(scratch("s2.jsonl"), read_jsonl(scratch("s.jsonl")));
    EXPECT_EQ(read_file(scratch("s.jsonl")), read_file(scratch("s2.jsonl")));
  }
  write_file(scratch("bad.jsonl"), "{\"clean_tokens\": [1]}\n");
  EXPECT_THROW(read_jsonl(scratch("bad.jsonl")), FormatError);
  EXPECT_EQ(parse_task("greater_than"), TaskKind::GreaterThan);
  EXPECT_THROW(parse_task("sst2"), FormatError);
}

TEST(Batches, Layout) {
  const auto samples = gen_toy_ioi(3, 1, 10);
  const PromptBatch c = clean_batch(samples), k = corrupted_batch(samples);
  EXPECT_EQ(c.tokens.batch, 3u);
  EXPECT_EQ(c.tokens.seq, 12u);
  EXPECT_EQ(c.answer_positions, (std::vector<std::size_t>{11, 11, 11}));
  EXPECT_EQ(k.tokens.ids[12 + 2], samples[1].corrupted[2]);
}

TEST(Canonical, CopyHeadIsTheWholeCircuit) {
  const Model m = fx::copy_head_model();
  const auto samples = fx::balanced_abba(8);
  const double clean = mean_task_metric(m.forward(clean_batch(samples).tokens), samples);
  ASSERT_GT(clean, 0.0);
  for (double delta : {1e-6, 0.25 * clean, 0.5 * clean, 0.99 * clean}) {
    const auto c = canonical_from_oracle(m, samples, delta);
    EXPECT_EQ(c.members, std::vector<ComponentId>{ComponentId::attn_head(0, 0)}) << delta;
  }
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_TRUE(canonical_from_oracle(m, samples, inf).members.empty());
  EXPECT_EQ(canonical_from_oracle(m, samples, -inf).members.size(), 3u);
}

TEST(Pretrain, UntrainedModelHasNoPreference) {
  const auto samples = gen_toy_ioi(1000, 2, 40);
  const Model m = Model::init_random(ModelConfig{}, 3);
  EXPECT_LT(std::abs(mean_task_metric(m.forward(clean_batch(samples).tokens), samples)), 0.5);
}

TEST(Pretrain, DeterministicUnderSeed) {
  const auto train = gen_toy_ioi(64, 1, 10), held = gen_toy_ioi(32, 2, 10);
  PretrainConfig pc;
  pc.steps = 20;
  pc.min_steps = 20;
  pc.eval_every = 10;
  pc.floor = -1e9;
  const ModelConfig cfg = fx::small_config(1, 2);
  ModelConfig toy = ModelConfig{};
  toy.n_layers = 1;
  toy.d_model = 16;
  toy.d_head = 4;
  toy.d_mlp = 32;
  const auto a = pretrain_toy(toy, TaskKind::Ioi, train, held, pc);
  const auto b = pretrain_toy(toy, TaskKind::Ioi, train, held, pc);
  EXPECT_EQ(a.heldout_metric, b.heldout_metric);
  EXPECT_EQ(a.final_loss, b.final_loss);
  pc.floor = 1e9;
  EXPECT_THROW(pretrain_toy(toy, TaskKind::Ioi, train, held, pc), TrainingError);
  EXPECT_THROW(pretrain_toy(cfg, TaskKind::Ioi, train, held, pc), ConfigError);
}

// Default 2x4 model on each task: reaches its floor, and the corruption breaks the behavior.
TEST(Pretrain, ReachesFloorAndCorruptionIsValid) {
  for (TaskKind kind : {TaskKind::Ioi, TaskKind::GreaterThan}) {
    const auto train = generate(kind, 2000, 11), held = generate(kind, 500, 12);
    PretrainConfig pc;
    pc.seed = 0;
    const PretrainResult r = pretrain_toy(ModelConfig{}, kind, train, held, pc);
    EXPECT_GE(r.heldout_metric, default_floor(kind)) << to_string(kind);
    const double clean = mean_task_metric(r.model.forward(clean_batch(held).tokens), held);
    const double corrupt = mean_task_metric(r.model.forward(corrupted_batch(held).tokens), held);
    EXPECT_NEAR(clean, r.heldout_metric, 1e-9);
    if (kind == TaskKind::Ioi) {
      EXPECT_LT(corrupt, 0.25 * clean);
    } else {
      EXPECT_LE(corrupt, 0.5 * clean);
    }
    const auto canon = canonical_from_oracle(r.model, held, 0.1 * clean);
    EXPECT_EQ(canon.drops.size(), 8u);
    // Greater-Than heads are redundant: no single one carries 10% of the metric.
    if (kind == TaskKind::Ioi) EXPECT_FALSE(canon.members.empty());
  }
}

TEST(Pretrain, AnswerTargets) {
  const auto ioi = gen_toy_ioi(1, 0, 5)[0];
  const auto t = answer_target(ioi, Vocab::toy().size());
  EXPECT_EQ(t[std::get<LogitDiff>(ioi.metric).io_token], 1.0);
  const auto gt = gen_toy_greater_than(1, 0)[0];
  const auto g = answer_target(gt, Vocab::toy().size());
  const auto& m = std::get<GreaterProb>(gt.metric);
  double total = 0.0;
  for (double x : g) total += x;
  EXPECT_NEAR(total, 1.0, 1e-12);
  EXPECT_EQ(g[m.year_begin + m.threshold], 0.0);
  EXPECT_GT(g[m.year_begin + m.threshold + 1], 0.0);
}
