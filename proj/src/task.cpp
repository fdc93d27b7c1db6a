#include "ibcircuit/task.hpp"

#include <random>
#include <sstream>

#include "ibcircuit/errors.hpp"
#include "ibcircuit/ibck.hpp"
#include "ibcircuit/optim.hpp"

namespace ibc {

namespace {

const char* const kWords[] = {"when", "and", "went", "to", "store", "gave", "drink",
                              "war", "lasted", "from", "year", "seventeen"};

const char* const kNames[] = {"Mary",  "John",   "Alice", "Bob",   "Carol", "Dave",  "Eve",    "Frank",
                              "Grace", "Heidi",  "Ivan",  "Judy",  "Karl",  "Laura", "Mike",   "Nina",
                              "Oscar", "Peggy",  "Quinn", "Rita",  "Sam",   "Tina",  "Uma",    "Victor",
                              "Wendy", "Xavier", "Yara",  "Zach",  "Amy",   "Ben",   "Chloe",  "Dan",
                              "Ella",  "Fred",   "Gina",  "Hank",  "Iris",  "Jack",  "Kate",   "Leo"};

std::string year_token(int yy) {
  char buf[3];
  buf[0] = static_cast<char>('0' + yy / 10);
  buf[1] = static_cast<char>('0' + yy % 10);
  buf[2] = 0;
  return buf;
}

}  // namespace

Vocab::Vocab() {
  tokens_.push_back("<bos>");
  for (const char* w : kWords) tokens_.push_back(w);
  name_begin_ = static_cast<int>(tokens_.size());
  for (const char* n : kNames) tokens_.push_back(n);
  n_names_ = std::size(kNames);
  year_begin_ = static_cast<int>(tokens_.size());
  for (int yy = 0; yy < kYearCount; ++yy) tokens_.push_back(year_token(yy));
  for (std::size_t i = 0; i < tokens_.size(); ++i) ids_.emplace(tokens_[i], static_cast<int>(i));
}

const Vocab& Vocab::toy() {
  static const Vocab v;
  return v;
}

int Vocab::id(const std::string& token) const {
  auto it = ids_.find(token);
  if (it == ids_.end()) throw LookupError("token '" + token + "' not in vocabulary");
  return it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw LookupError("token id out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

int Vocab::name(std::size_t i) const {
  if (i >= n_names_) throw LookupError("name index out of range");
  return name_begin_ + static_cast<int>(i);
}

int Vocab::year(int yy) const {
  if (yy < 0 || yy >= kYearCount) throw DomainError("year must lie in [0, 99]");
  return year_begin_ + yy;
}

nlohmann::json Vocab::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < tokens_.size(); ++i) j[tokens_[i]] = i;
  return j;
}

void Vocab::check_json(const nlohmann::json& j) const {
  if (!j.is_object() || j.size() != tokens_.size()) throw FormatError("vocabulary size mismatch");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!it.value().is_number_integer() || it.value().get<int>() != id(it.key())) {
      throw FormatError("vocabulary entry '" + it.key() + "' disagrees");
    }
  }
}

std::string to_string(TaskKind kind) { return kind == TaskKind::Ioi ? "ioi" : "greater_than"; }

TaskKind parse_task(std::string_view text) {
  if (text == "ioi") return TaskKind::Ioi;
  if (text == "greater_than") return TaskKind::GreaterThan;
  throw FormatError("unknown task '" + std::string(text) + "'");
}

// ---- generators ------------------------------------------------------------------

std::vector<TaskSample> gen_toy_ioi(std::size_t n, std::uint64_t seed, std::size_t name_pool_size) {
  const Vocab& v = Vocab::toy();
  if (name_pool_size < 3) throw DomainError("IOI name pool needs at least 3 names");
  if (name_pool_size > v.name_count()) {
    throw DomainError("IOI name pool larger than the vocabulary's " + std::to_string(v.name_count()) + " names");
  }
  if (n < 1) throw DomainError("need at least one sample");
  std::mt19937_64 rng(derive_seed({seed, 0x494F49}));
  std::uniform_int_distribution<std::size_t> pick(0, name_pool_size - 1);
  std::bernoulli_distribution coin(0.5);

  auto prompt = [&](int io, int s, bool abba) {
    const int x1 = abba ? io : s;
    const int x2 = abba ? s : io;
    return std::vector<int>{v.bos(),        v.id("when"), x1, v.id("and"), x2, v.id("went"), v.id("to"),
                            v.id("store"), s,            v.id("gave"), v.id("drink"), v.id("to")};
  };

  std::vector<TaskSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t a = pick(rng);
    std::size_t b = pick(rng);
    while (b == a) b = pick(rng);
    const bool abba = coin(rng);
    // Fresh names for the corrupted prompt, outside {A, B} whenever the pool allows.
    std::size_t c, d;
    if (name_pool_size >= 4) {
      do c = pick(rng); while (c == a || c == b);
      do d = pick(rng); while (d == a || d == b || d == c);
    } else {
      c = 3 - a - b;  // the single name outside {A, B}
      do d = pick(rng); while (d == c);
    }
    TaskSample s;
    s.clean = prompt(v.name(a), v.name(b), abba);
    s.corrupted = prompt(v.name(c), v.name(d), abba);
    s.answer_position = s.clean.size() - 1;
    s.metric = LogitDiff{v.name(a), v.name(b)};
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<TaskSample> gen_toy_greater_than(std::size_t n, std::uint64_t seed) {
  const Vocab& v = Vocab::toy();
  if (n < 1) throw DomainError("need at least one sample");
  std::mt19937_64 rng(derive_seed({seed, 0x4754}));
  std::uniform_int_distribution<int> start(2, 98);
  auto prompt = [&](int yy) {
    return std::vector<int>{v.bos(),          v.id("war"), v.id("lasted"), v.id("from"), v.id("year"),
                            v.id("seventeen"), v.year(yy), v.id("to"),     v.id("year"), v.id("seventeen")};
  };
  std::vector<TaskSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int yy = start(rng);
    TaskSample s;
    s.clean = prompt(yy);
    s.corrupted = prompt(1);
    s.answer_position = s.clean.size() - 1;
    s.metric = GreaterProb{yy, v.year_begin(), Vocab::kYearCount};
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<TaskSample> generate(TaskKind kind, std::size_t n, std::uint64_t seed, std::size_t name_pool_size) {
  return kind == TaskKind::Ioi ? gen_toy_ioi(n, seed, name_pool_size) : gen_toy_greater_than(n, seed);
}

// ---- batches -----------------------------------------------------------------------

namespace {

PromptBatch make_batch(std::span<const TaskSample> samples, bool corrupted) {
  if (samples.empty()) throw ShapeError("empty sample list");
  PromptBatch b;
  b.tokens.batch = samples.size();
  b.tokens.seq = samples[0].clean.size();
  b.tokens.ids.reserve(b.tokens.batch * b.tokens.seq);
  for (const TaskSample& s : samples) {
    const auto& ids = corrupted ? s.corrupted : s.clean;
    if (ids.size() != b.tokens.seq) throw ShapeError("samples in a batch must share one length");
    b.tokens.ids.insert(b.tokens.ids.end(), ids.begin(), ids.end());
    b.answer_positions.push_back(s.answer_position);
  }
  return b;
}

}  // namespace

PromptBatch clean_batch(std::span<const TaskSample> samples) { return make_batch(samples, false); }
PromptBatch corrupted_batch(std::span<const TaskSample> samples) { return make_batch(samples, true); }

// ---- JSON lines ------------------------------------------------------------------

nlohmann::json sample_to_json(const TaskSample& s) {
  nlohmann::json j = {{"clean_tokens", s.clean}, {"corrupted_tokens", s.corrupted},
                      {"answer_position", s.answer_position}};
  if (const auto* ld = std::get_if<LogitDiff>(&s.metric)) {
    j["metric"] = {{"kind", "logit_diff"}, {"io_token", ld->io_token}, {"s_token", ld->s_token}};
  } else {
    const auto& gp = std::get<GreaterProb>(s.metric);
    j["metric"] = {{"kind", "greater_prob"},
                   {"threshold", gp.threshold},
                   {"year_begin", gp.year_begin},
                   {"year_count", gp.year_count}};
  }
  return j;
}

TaskSample sample_from_json(const nlohmann::json& j) {
  TaskSample s;
  try {
    s.clean = j.at("clean_tokens").get<std::vector<int>>();
    s.corrupted = j.at("corrupted_tokens").get<std::vector<int>>();
    s.answer_position = j.at("answer_position").get<std::size_t>();
    const auto& m = j.at("metric");
    const std::string kind = m.at("kind").get<std::string>();
    if (kind == "logit_diff") {
      s.metric = LogitDiff{m.at("io_token").get<int>(), m.at("s_token").get<int>()};
    } else if (kind == "greater_prob") {
      s.metric = GreaterProb{m.at("threshold").get<int>(), m.at("year_begin").get<int>(),
                             m.at("year_count").get<int>()};
    } else {
      throw FormatError("unknown metric kind '" + kind + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad sample: ") + e.what());
  }
  if (s.clean.size() != s.corrupted.size()) throw FormatError("clean and corrupted lengths differ");
  if (s.answer_position >= s.clean.size()) throw FormatError("answer position out of range");
  return s;
}

void write_jsonl(const std::filesystem::path& path, std::span<const TaskSample> samples) {
  std::string out;
  for (const TaskSample& s : samples) {
    out += sample_to_json(s).dump();
    out += '\n';
  }
  write_file(path, out);
}

std::vector<TaskSample> read_jsonl(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<TaskSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(sample_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (out.empty()) throw FormatError(path.string() + " holds no samples");
  return out;
}

}  // namespace ibc
