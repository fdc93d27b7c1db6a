#pragma once

// Synthetic IOI and Greater-Than prompts over a single-symbol vocabulary.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "ibcircuit/model.hpp"

namespace ibc {

// Fixed toy vocabulary: BOS, template words, 40 names, then the years 00..99 as one contiguous block.
class Vocab {
 public:
  static const Vocab& toy();

  std::size_t size() const { return tokens_.size(); }
  int id(const std::string& token) const;  // LookupError when absent
  const std::string& token(int id) const;

  int bos() const { return 0; }
  int name(std::size_t i) const;
  std::size_t name_count() const { return n_names_; }
  int year(int yy) const;  // yy in [0, 99]
  int year_begin() const { return year_begin_; }
  static constexpr int kYearCount = 100;

  nlohmann::json to_json() const;
  // Checks that `j` describes exactly this vocabulary.
  void check_json(const nlohmann::json& j) const;

 private:
  Vocab();
  std::vector<std::string> tokens_;
  std::map<std::string, int> ids_;
  int name_begin_ = 0;
  std::size_t n_names_ = 0;
  int year_begin_ = 0;
};

enum class TaskKind { Ioi, GreaterThan };
std::string to_string(TaskKind kind);
TaskKind parse_task(std::string_view text);

struct LogitDiff {
  int io_token = 0;
  int s_token = 0;
  bool operator==(const LogitDiff&) const = default;
};

struct GreaterProb {
  int threshold = 0;  // start year YY
  int year_begin = 0;
  int year_count = Vocab::kYearCount;
  bool operator==(const GreaterProb&) const = default;
};

using MetricSpec = std::variant<LogitDiff, GreaterProb>;

struct TaskSample {
  std::vector<int> clean;
  std::vector<int> corrupted;
  std::size_t answer_position = 0;
  MetricSpec metric;
  bool operator==(const TaskSample&) const = default;
};

// [BOS] when X1 and X2 went to store S gave drink to  -> IO
// ABBA and BABA orders alternate at random; S is always the repeated name.
std::vector<TaskSample> gen_toy_ioi(std::size_t n, std::uint64_t seed, std::size_t name_pool_size);
// [BOS] war lasted from year 17 YY to year 17  -> any year > YY
std::vector<TaskSample> gen_toy_greater_than(std::size_t n, std::uint64_t seed);
std::vector<TaskSample> generate(TaskKind kind, std::size_t n, std::uint64_t seed, std::size_t name_pool_size = 40);

PromptBatch clean_batch(std::span<const TaskSample> samples);
PromptBatch corrupted_batch(std::span<const TaskSample> samples);

nlohmann::json sample_to_json(const TaskSample& s);
TaskSample sample_from_json(const nlohmann::json& j);
void write_jsonl(const std::filesystem::path& path, std::span<const TaskSample> samples);
std::vector<TaskSample> read_jsonl(const std::filesystem::path& path);

}  // namespace ibc
