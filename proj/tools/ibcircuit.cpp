// ibcircuit <command> --config <path> [--key value ...]
//
// Commands: gen pretrain discover form ablate baseline roc sweep. Every command writes into
// <workdir>/<command>/<run id>/ where the run id hashes the config sections it depends on,
// including those of its upstream commands.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ibcircuit/baselines.hpp"
#include "ibcircuit/circuit.hpp"
#include "ibcircuit/errors.hpp"
#include "ibcircuit/eval.hpp"
#include "ibcircuit/ib.hpp"
#include "ibcircuit/ibck.hpp"
#include "ibcircuit/metrics.hpp"
#include "ibcircuit/optim.hpp"
#include "ibcircuit/task.hpp"
#include "ibcircuit/toy.hpp"

#ifndef IBCIRCUIT_VERSION
#define IBCIRCUIT_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ibc;

namespace {

// ---- config ----------------------------------------------------------------------

const std::map<std::string, std::vector<std::string>> kSections = {
    {"model", {"n_layers", "n_heads", "d_model", "d_head", "d_mlp", "vocab_size", "max_seq_len", "final_layer_norm"}},
    {"data", {"n_train", "n_heldout", "name_pool_size"}},
    {"pretrain", {"steps", "batch_size", "lr", "eval_every", "min_steps", "floor", "corrupted_rate"}},
    {"train", {"beta", "lr", "steps", "warmup_steps", "batch_size", "level", "variant", "freeze_stats"}},
    {"eval", {"k_list", "fractions", "eval_batch", "budget_k", "canonical_delta"}},
    {"paths", {"workdir"}},
};

struct DataConfig {
  std::size_t n_train = 4000;
  std::size_t n_heldout = 256;
  std::size_t name_pool_size = 40;
};

struct EvalConfig {
  std::vector<int> k_list;  // empty: 25/50/75/100% of the sites
  std::vector<double> fractions = default_fractions();
  std::size_t eval_batch = 128;
  int budget_k = -1;              // -1: half of the sites, rounded up
  double canonical_delta = 0.1;  // fraction of the clean metric
};

struct RunConfig {
  json resolved;
  TaskKind task = TaskKind::Ioi;
  std::uint64_t seed = 0;
  ModelConfig model;
  DataConfig data;
  PretrainConfig pretrain;
  TrainConfig train;
  EvalConfig eval;
  fs::path workdir;
};

void set_dotted(json& root, const std::string& key, const std::string& raw) {
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json* node = &root;
  std::size_t start = 0;
  for (std::size_t dot; (dot = key.find('.', start)) != std::string::npos; start = dot + 1) {
    node = &(*node)[key.substr(start, dot - start)];
    if (!node->is_object() && !node->is_null()) throw ConfigError("override " + key + " descends into a non-object");
  }
  (*node)[key.substr(start)] = value;
}

template <class T>
void take(const json& section, const char* key, T& field) {
  if (section.contains(key)) field = section.at(key).get<T>();
}

RunConfig load_config(const fs::path& path, const std::vector<std::pair<std::string, std::string>>& overrides) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  for (const auto& [k, v] : overrides) set_dotted(j, k, v);

  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() == "task" || it.key() == "seed") continue;
    auto sec = kSections.find(it.key());
    if (sec == kSections.end()) throw ConfigError("unknown config section '" + it.key() + "'");
    if (!it.value().is_object()) throw ConfigError("config section '" + it.key() + "' must be an object");
    for (auto f = it.value().begin(); f != it.value().end(); ++f) {
      if (std::find(sec->second.begin(), sec->second.end(), f.key()) == sec->second.end()) {
        throw ConfigError("unknown config key '" + it.key() + "." + f.key() + "'");
      }
    }
  }
  if (!j.contains("seed")) throw ConfigError("config needs a seed");

  RunConfig rc;
  try {
    rc.task = parse_task(j.value("task", std::string("ioi")));
    rc.seed = j.at("seed").get<std::uint64_t>();
    const json empty = json::object();
    const json& m = j.value("model", empty);
    json model_json = ModelConfig{}.to_json();
    model_json.update(m);
    rc.model = ModelConfig::from_json(model_json);

    const json& d = j.value("data", empty);
    take(d, "n_train", rc.data.n_train);
    take(d, "n_heldout", rc.data.n_heldout);
    take(d, "name_pool_size", rc.data.name_pool_size);

    const json& p = j.value("pretrain", empty);
    take(p, "steps", rc.pretrain.steps);
    take(p, "batch_size", rc.pretrain.batch_size);
    take(p, "lr", rc.pretrain.lr);
    take(p, "eval_every", rc.pretrain.eval_every);
    take(p, "min_steps", rc.pretrain.min_steps);
    take(p, "floor", rc.pretrain.floor);
    take(p, "corrupted_rate", rc.pretrain.corrupted_rate);
    rc.pretrain.seed = rc.seed;

    const json& t = j.value("train", empty);
    const Level level = parse_level(t.value("level", std::string("node")));
    rc.train = level == Level::Edge ? TrainConfig::edge_defaults() : TrainConfig::node_defaults();
    take(t, "beta", rc.train.beta);
    take(t, "lr", rc.train.lr);
    take(t, "steps", rc.train.steps);
    take(t, "warmup_steps", rc.train.warmup_steps);
    take(t, "batch_size", rc.train.batch_size);
    take(t, "freeze_stats", rc.train.freeze_stats);
    if (t.contains("variant")) rc.train.variant = parse_variant(t.at("variant").get<std::string>());
    rc.train.seed = rc.seed;

    const json& e = j.value("eval", empty);
    take(e, "k_list", rc.eval.k_list);
    take(e, "fractions", rc.eval.fractions);
    take(e, "eval_batch", rc.eval.eval_batch);
    take(e, "budget_k", rc.eval.budget_k);
    take(e, "canonical_delta", rc.eval.canonical_delta);

    std::string workdir = j.value("paths", empty).value("workdir", std::string());
    if (workdir.empty()) {
      if (const char* env = std::getenv("IBCIRCUIT_WORKDIR")) workdir = env;
    }
    if (workdir.empty()) throw ConfigError("no workdir: set paths.workdir or IBCIRCUIT_WORKDIR");
    rc.workdir = (fs::path(workdir).is_absolute() ? fs::path(workdir) : path.parent_path() / workdir).lexically_normal();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  rc.model.validate();
  rc.pretrain.validate();
  rc.train.validate();
  if (rc.data.n_train < 1 || rc.data.n_heldout < 1) throw ConfigError("data sizes must be >= 1");
  if (rc.eval.eval_batch < 1) throw ConfigError("eval.eval_batch must be >= 1");
  if (!std::is_sorted(rc.eval.k_list.begin(), rc.eval.k_list.end())) throw ConfigError("eval.k_list must be ascending");

  // Resolved view: every field the run actually used.
  rc.resolved = {
      {"task", to_string(rc.task)},
      {"seed", rc.seed},
      {"model", rc.model.to_json()},
      {"data", {{"n_train", rc.data.n_train}, {"n_heldout", rc.data.n_heldout}, {"name_pool_size", rc.data.name_pool_size}}},
      {"pretrain",
       {{"steps", rc.pretrain.steps},
        {"batch_size", rc.pretrain.batch_size},
        {"lr", rc.pretrain.lr},
        {"eval_every", rc.pretrain.eval_every},
        {"min_steps", rc.pretrain.min_steps},
        {"corrupted_rate", rc.pretrain.corrupted_rate},
        {"floor", std::isnan(rc.pretrain.floor) ? default_floor(rc.task) : rc.pretrain.floor}}},
      {"train",
       {{"beta", rc.train.beta},
        {"lr", rc.train.lr},
        {"steps", rc.train.steps},
        {"warmup_steps", rc.train.warmup_steps},
        {"batch_size", rc.train.batch_size},
        {"level", to_string(rc.train.level)},
        {"variant", to_string(rc.train.variant)},
        {"freeze_stats", rc.train.freeze_stats}}},
      {"eval",
       {{"k_list", rc.eval.k_list},
        {"fractions", rc.eval.fractions},
        {"eval_batch", rc.eval.eval_batch},
        {"budget_k", rc.eval.budget_k},
        {"canonical_delta", rc.eval.canonical_delta}}},
  };
  return rc;
}

// ---- run ids and manifests ------------------------------------------------------------

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

json pick(const json& resolved, std::initializer_list<const char*> paths) {
  json out = json::object();
  for (const char* p : paths) {
    const std::string key(p);
    const auto dot = key.find('.');
    if (dot == std::string::npos) {
      out[key] = resolved.at(key);
    } else {
      out[key] = resolved.at(key.substr(0, dot)).at(key.substr(dot + 1));
    }
  }
  return out;
}

// The config slice each command depends on, chained through its upstream commands.
json run_key(const std::string& cmd, const RunConfig& rc) {
  const json& r = rc.resolved;
  if (cmd == "gen") return {{"gen", pick(r, {"task", "seed", "data"})}};
  if (cmd == "pretrain") return {{"pretrain", pick(r, {"model", "pretrain"})}, {"up", run_key("gen", rc)}};
  if (cmd == "discover") return {{"discover", pick(r, {"train"})}, {"up", run_key("pretrain", rc)}};
  if (cmd == "form") return {{"form", pick(r, {"eval.budget_k"})}, {"up", run_key("discover", rc)}};
  if (cmd == "ablate") return {{"ablate", pick(r, {"eval.eval_batch"})}, {"up", run_key("form", rc)}};
  if (cmd == "baseline") {
    return {{"baseline", pick(r, {"train.level", "eval.eval_batch"})}, {"up", run_key("pretrain", rc)}};
  }
  if (cmd == "roc") {
    return {{"roc", pick(r, {"eval.fractions", "eval.canonical_delta", "eval.eval_batch"})},
            {"up", {run_key("discover", rc), run_key("baseline", rc)}}};
  }
  if (cmd == "sweep") {
    return {{"sweep", pick(r, {"eval.k_list", "eval.eval_batch"})},
            {"up", {run_key("discover", rc), run_key("baseline", rc)}}};
  }
  throw ConfigError("unknown command '" + cmd + "'");
}

std::string run_id(const std::string& cmd, const RunConfig& rc) { return hex(fnv1a(run_key(cmd, rc).dump())); }

fs::path run_dir(const std::string& cmd, const RunConfig& rc) { return rc.workdir / cmd / run_id(cmd, rc); }

fs::path upstream(const std::string& cmd, const RunConfig& rc, const std::string& file) {
  const fs::path p = run_dir(cmd, rc) / file;
  if (!fs::exists(p)) throw IoError("missing upstream artifact " + p.string() + " (run `" + cmd + "` first)");
  return p;
}

void write_manifest(const std::string& cmd, const RunConfig& rc, const std::vector<std::string>& artifacts) {
  json m = {{"command", cmd},
            {"run_id", run_id(cmd, rc)},
            {"config_hash", hex(fnv1a(rc.resolved.dump()))},
            {"seed", rc.seed},
            {"version", IBCIRCUIT_VERSION},
            {"config", rc.resolved},
            {"artifacts", artifacts}};
  write_file(run_dir(cmd, rc) / "manifest.json", m.dump(2) + "\n");
}

// ---- shared loading -----------------------------------------------------------------

std::vector<TaskSample> load_split(const RunConfig& rc, const char* name) {
  return read_jsonl(upstream("gen", rc, name));
}

Model load_model(const RunConfig& rc) { return load_checkpoint(upstream("pretrain", rc, "model.ibck"), rc.model); }

std::vector<TaskSample> eval_samples(const RunConfig& rc) {
  auto held = load_split(rc, "heldout.jsonl");
  if (held.size() > rc.eval.eval_batch) held.resize(rc.eval.eval_batch);
  return held;
}

std::string site_values_csv(const GateLayout& layout, std::span<const double> values, const char* column) {
  std::string out = std::string("component_id,") + column + "\n";
  char num[40];
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::snprintf(num, sizeof num, ",%.17g\n", values[i]);
    out += layout.site_name(i) + num;
  }
  return out;
}

std::vector<double> read_scores(const fs::path& path, const GateLayout& layout) {
  std::map<std::string, double> by_name;
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) throw FormatError(path.string() + ": malformed row");
    by_name[line.substr(0, comma)] = std::stod(line.substr(comma + 1));
  }
  std::vector<double> out;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    auto it = by_name.find(layout.site_name(i));
    if (it == by_name.end()) throw FormatError(path.string() + ": no score for " + layout.site_name(i));
    out.push_back(it->second);
  }
  return out;
}

const char* baseline_name(Level level) { return level == Level::Node ? "ap" : "eap"; }

// ---- commands -----------------------------------------------------------------------

void cmd_gen(const RunConfig& rc) {
  const fs::path dir = run_dir("gen", rc);
  const auto train = generate(rc.task, rc.data.n_train, derive_seed({rc.seed, 1}), rc.data.name_pool_size);
  const auto held = generate(rc.task, rc.data.n_heldout, derive_seed({rc.seed, 2}), rc.data.name_pool_size);
  write_jsonl(dir / "train.jsonl", train);
  write_jsonl(dir / "heldout.jsonl", held);
  write_file(dir / "vocab.json", Vocab::toy().to_json().dump(2) + "\n");
  write_manifest("gen", rc, {"train.jsonl", "heldout.jsonl", "vocab.json"});
}

void cmd_pretrain(const RunConfig& rc) {
  Vocab::toy().check_json(json::parse(read_file(upstream("gen", rc, "vocab.json"))));
  const auto train = load_split(rc, "train.jsonl");
  const auto held = load_split(rc, "heldout.jsonl");
  std::string log = "step,loss,heldout_metric\n";
  PretrainConfig pc = rc.pretrain;
  pc.progress = [&](int step, double loss, double metric) {
    char line[96];
    std::snprintf(line, sizeof line, "%d,%.17g,%.17g\n", step, loss, metric);
    log += line;
    std::fprintf(stderr, "pretrain step %d loss %.4f heldout %s %.4f\n", step, loss, metric_name(rc.task).c_str(),
                 metric);
  };
  const PretrainResult r = pretrain_toy(rc.model, rc.task, train, held, pc);
  const fs::path dir = run_dir("pretrain", rc);
  save_checkpoint(r.model, dir / "model.ibck");
  write_file(dir / "pretrain.csv", log);
  write_manifest("pretrain", rc, {"model.ibck", "pretrain.csv"});
}

void cmd_discover(const RunConfig& rc) {
  const Model model = load_model(rc);
  const auto train_set = load_split(rc, "train.jsonl");
  const std::size_t B = static_cast<std::size_t>(rc.train.batch_size);
  const Batcher batcher = [&](std::size_t step) {
    std::mt19937_64 rng(derive_seed({rc.seed, 0x6261746368, step}));
    std::uniform_int_distribution<std::size_t> pick_row(0, train_set.size() - 1);
    std::vector<TaskSample> mb;
    for (std::size_t i = 0; i < B; ++i) mb.push_back(train_set[pick_row(rng)]);
    return clean_batch(mb);
  };
  const TrainResult r = train(model, batcher, rc.train);
  const fs::path dir = run_dir("discover", rc);
  save_ib_weights(r.weights, rc.model, dir / "ib_weights.ibck");
  write_file(dir / "trajectory.csv", trajectory_csv(r.trajectory));
  write_file(dir / "gates.csv", site_values_csv(r.weights.layout, r.weights.gates(), "lambda"));
  write_manifest("discover", rc, {"ib_weights.ibck", "trajectory.csv", "gates.csv"});
}

int budget_for(const RunConfig& rc, std::size_t n_sites) {
  return rc.eval.budget_k >= 0 ? rc.eval.budget_k : static_cast<int>((n_sites + 1) / 2);
}

void cmd_form(const RunConfig& rc) {
  const IBWeights w = load_ib_weights(upstream("discover", rc, "ib_weights.ibck"), rc.model);
  const Circuit c = form_circuit(w, budget_for(rc, w.layout.size()), run_id("discover", rc));
  save_circuit(c, run_dir("form", rc) / "circuit.json");
  write_manifest("form", rc, {"circuit.json"});
}

void cmd_ablate(const RunConfig& rc) {
  const Model model = load_model(rc);
  const Circuit circuit = load_circuit(upstream("form", rc, "circuit.json"));
  const auto samples = eval_samples(rc);
  const PromptBatch clean = clean_batch(samples);
  const CorruptedCache cache = CorruptedCache::build(model, corrupted_batch(samples).tokens);
  NoGradGuard guard;
  const Tensor clean_logits = model.forward(clean.tokens);
  const Tensor logits = ablate(model, clean.tokens, circuit, cache, rc.seed);
  MetricReport full{"clean", circuit.level, -1, metric_name(rc.task), mean_task_metric(clean_logits, samples), 0.0, rc.seed};
  MetricReport ib{"ib", circuit.level, static_cast<int>(circuit.size()), metric_name(rc.task),
                  mean_task_metric(logits, samples), kl_faithfulness(clean_logits, logits, clean.answer_positions),
                  rc.seed};
  const MetricReport rows[] = {full, ib};
  write_file(run_dir("ablate", rc) / "report.csv", reports_csv(rows));
  write_manifest("ablate", rc, {"report.csv"});
}

void cmd_baseline(const RunConfig& rc) {
  const Model model = load_model(rc);
  const auto samples = eval_samples(rc);
  const PromptBatch clean = clean_batch(samples), corrupt = corrupted_batch(samples);
  const AttributionScores s = rc.train.level == Level::Node ? attribution_patching_node(model, clean, corrupt, samples)
                                                            : eap_edge(model, clean, corrupt, samples);
  write_file(run_dir("baseline", rc) / "scores.csv", scores_csv(s));
  write_manifest("baseline", rc, {"scores.csv"});
}

void cmd_roc(const RunConfig& rc) {
  const Model model = load_model(rc);
  const IBWeights w = load_ib_weights(upstream("discover", rc, "ib_weights.ibck"), rc.model);
  const auto base = read_scores(upstream("baseline", rc, "scores.csv"), w.layout);
  const auto samples = eval_samples(rc);
  const double clean = mean_task_metric(model.forward(clean_batch(samples).tokens), samples);
  const double delta = rc.eval.canonical_delta * clean;

  json canonical = {{"delta", delta}, {"members", json::array()}};
  RocCurve ib_roc, base_roc;
  const auto gates = w.gates();
  if (w.level == Level::Node) {
    const CanonicalCircuit cc = canonical_from_oracle(model, samples, delta);
    for (const auto& m : cc.members) canonical["members"].push_back(to_string(m));
    ib_roc = roc_curve(w.layout, gates, cc.members, rc.eval.fractions);
    base_roc = roc_curve(w.layout, base, cc.members, rc.eval.fractions);
  } else {
    const CanonicalEdges ce = canonical_edges_from_oracle(model, samples, delta);
    for (const auto& m : ce.members) canonical["members"].push_back(to_string(m));
    ib_roc = roc_curve(w.layout, gates, ce.members, rc.eval.fractions);
    base_roc = roc_curve(w.layout, base, ce.members, rc.eval.fractions);
  }
  const fs::path dir = run_dir("roc", rc);
  const std::string bname = baseline_name(w.level);
  write_file(dir / "canonical.json", canonical.dump(2) + "\n");
  write_file(dir / "roc_ib.csv", roc_csv(ib_roc));
  write_file(dir / ("roc_" + bname + ".csv"), roc_csv(base_roc));
  write_file(dir / "roc.json", json{{"ib", roc_summary(ib_roc)}, {bname, roc_summary(base_roc)}}.dump(2) + "\n");
  write_manifest("roc", rc, {"canonical.json", "roc_ib.csv", "roc_" + bname + ".csv", "roc.json"});
}

void cmd_sweep(const RunConfig& rc) {
  const Model model = load_model(rc);
  const IBWeights w = load_ib_weights(upstream("discover", rc, "ib_weights.ibck"), rc.model);
  const auto base = normalize_scores(read_scores(upstream("baseline", rc, "scores.csv"), w.layout));
  const auto samples = eval_samples(rc);
  const CorruptedCache cache = CorruptedCache::build(model, corrupted_batch(samples).tokens);
  std::vector<int> ks = rc.eval.k_list;
  if (ks.empty()) {
    const double quarters[] = {0.25, 0.5, 0.75, 1.0};
    ks = k_for_fractions(w.layout.size(), quarters);
  }
  auto reports = pareto_sweep(model, w.layout, w.gates(), samples, cache, ks, rc.seed, "ib");
  const auto more = pareto_sweep(model, w.layout, base, samples, cache, ks, rc.seed, baseline_name(w.level));
  reports.insert(reports.end(), more.begin(), more.end());
  write_file(run_dir("sweep", rc) / "reports.csv", reports_csv(reports));
  write_manifest("sweep", rc, {"reports.csv"});
}

int exit_code(const std::string& kind) {
  if (kind == "config" || kind == "format") return 2;
  if (kind == "io") return 3;
  if (kind == "training") return 4;
  return 1;
}

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  const std::map<std::string, void (*)(const RunConfig&)> commands = {
      {"gen", cmd_gen},     {"pretrain", cmd_pretrain}, {"discover", cmd_discover}, {"form", cmd_form},
      {"ablate", cmd_ablate}, {"baseline", cmd_baseline}, {"roc", cmd_roc},         {"sweep", cmd_sweep}};

  CLI::App app{"Information-bottleneck circuit discovery on toy transformers"};
  app.set_version_flag("--version", IBCIRCUIT_VERSION);
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> extras;
  for (const auto& [name, fn] : commands) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "JSON run config")->required();
    sub->allow_extras();
  }
  CLI11_PARSE(app, argc, argv);

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    extras = app.get_subcommands().front()->remaining();
    std::vector<std::pair<std::string, std::string>> overrides;
    for (std::size_t i = 0; i < extras.size(); ++i) {
      std::string key = extras[i];
      if (key.rfind("--", 0) != 0 || i + 1 >= extras.size()) {
        throw ConfigError("overrides take the form --section.key value, got '" + key + "'");
      }
      key = key.substr(2);
      if (key == "level") key = "train.level";
      overrides.emplace_back(key, extras[++i]);
    }
    const RunConfig rc = load_config(config_path, overrides);
    commands.at(cmd)(rc);
    std::cout << (rc.workdir / cmd / run_id(cmd, rc)).string() << "\n";
    return 0;
  } catch (const Error& e) {
    std::cerr << "error kind=" << e.kind() << " command=" << cmd << " message=" << one_line(e.what()) << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error kind=internal command=" << cmd << " message=" << one_line(e.what()) << "\n";
    return 1;
  }
}
