#include "ibcircuit/circuit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "ibcircuit/errors.hpp"
#include "ibcircuit/ibck.hpp"
#include "ibcircuit/optim.hpp"

namespace ibc {

Selection select_budget(std::span<const double> values, std::size_t k) {
  Selection s;
  // With room for every site the infimum is unbounded below; any tau under the [0, 1] domain will do.
  s.tau = -1.0;
  if (k < values.size()) {
    std::vector<double> sorted(values.begin(), values.end());
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k), sorted.end(),
                     std::greater<double>());
    s.tau = sorted[k];
  }
  for (std::size_t i = 0; i < values.size(); ++i)
    if (values[i] > s.tau) s.members.push_back(i);
  return s;
}

bool Circuit::contains(const ComponentId& id) const { return std::find(nodes.begin(), nodes.end(), id) != nodes.end(); }
bool Circuit::contains(const EdgeId& id) const { return std::find(edges.begin(), edges.end(), id) != edges.end(); }

void Circuit::validate() const {
  if (budget_k < 0) throw ConfigError("circuit budget_k must be >= 0");
  if (!std::isfinite(threshold_tau)) throw ConfigError("circuit threshold_tau must be finite");
  if (size() > static_cast<std::size_t>(budget_k)) {
    throw ConfigError("circuit has " + std::to_string(size()) + " members but budget_k is " + std::to_string(budget_k));
  }
  if (level == Level::Node) {
    if (!edges.empty()) throw ConfigError("node circuit carries edges");
    std::set<ComponentId> seen;
    for (const auto& n : nodes) {
      if (n.kind != SourceKind::Head) throw ConfigError("node circuit member " + to_string(n) + " is not a head");
      if (!seen.insert(n).second) throw ConfigError("duplicate member " + to_string(n));
    }
  } else {
    if (!nodes.empty()) throw ConfigError("edge circuit carries nodes");
    std::set<EdgeId> seen;
    for (const auto& e : edges) {
      if (!precedes(e.src, e.dst)) throw ConfigError("edge " + to_string(e) + " violates layer order");
      if (!seen.insert(e).second) throw ConfigError("duplicate member " + to_string(e));
    }
  }
}

Circuit form_circuit(const GateLayout& layout, std::span<const double> values, int k, std::string source_run_id) {
  if (k < 0) throw DomainError("budget k must be >= 0");
  if (values.size() != layout.size()) throw ShapeError("form_circuit: one value per site required");
  for (double v : values) {
    if (!(v >= 0.0 && v <= 1.0)) throw DomainError("form_circuit: values must lie in [0, 1]");
  }
  const Selection sel = select_budget(values, static_cast<std::size_t>(k));
  Circuit c;
  c.level = layout.level;
  c.budget_k = k;
  c.threshold_tau = sel.tau;
  c.source_run_id = std::move(source_run_id);
  for (std::size_t i : sel.members) {
    if (layout.level == Level::Node) {
      c.nodes.push_back(layout.nodes[i]);
    } else {
      c.edges.push_back(layout.edges[i]);
    }
  }
  return c;
}

Circuit form_circuit(const IBWeights& weights, int k, std::string source_run_id) {
  const auto g = weights.gates();
  return form_circuit(weights.layout, g, k, std::move(source_run_id));
}

void check_threshold(const Circuit& circuit, const GateLayout& layout, std::span<const double> values) {
  if (values.size() != layout.size()) throw ShapeError("check_threshold: one value per site required");
  for (std::size_t i = 0; i < values.size(); ++i) {
    const bool member = layout.level == Level::Node ? circuit.contains(layout.nodes[i]) : circuit.contains(layout.edges[i]);
    if (member != (values[i] > circuit.threshold_tau)) {
      throw ConfigError("site " + layout.site_name(i) + " disagrees with threshold " +
                        std::to_string(circuit.threshold_tau));
    }
  }
}

// ---- JSON --------------------------------------------------------------------------

nlohmann::json circuit_to_json(const Circuit& c) {
  nlohmann::json members = nlohmann::json::array();
  int n_layers = 0;
  if (c.level == Level::Node) {
    for (const auto& n : c.nodes) members.push_back(to_string(n));
  } else {
    for (const auto& e : c.edges) {
      members.push_back({{"src", to_string(e.src)}, {"dst", to_string(e.dst)}});
      if (e.dst.kind == TargetKind::FinalRead) n_layers = e.dst.layer;
    }
  }
  nlohmann::json j = {{"level", to_string(c.level)},
                      {"budget_k", c.budget_k},
                      {"threshold_tau", c.threshold_tau},
                      {"members", members},
                      {"source_run_id", c.source_run_id}};
  if (c.level == Level::Edge) j["n_layers"] = n_layers;
  return j;
}

Circuit circuit_from_json(const nlohmann::json& j) {
  Circuit c;
  try {
    c.level = parse_level(j.at("level").get<std::string>());
    c.budget_k = j.at("budget_k").get<int>();
    c.threshold_tau = j.at("threshold_tau").get<double>();
    c.source_run_id = j.at("source_run_id").get<std::string>();
    const auto& members = j.at("members");
    if (!members.is_array()) throw FormatError("circuit members must be an array");
    if (c.level == Level::Node) {
      for (const auto& m : members) c.nodes.push_back(parse_component(m.get<std::string>()));
    } else {
      const int n_layers = j.value("n_layers", 0);
      for (const auto& m : members) {
        c.edges.push_back({parse_target(m.at("dst").get<std::string>(), n_layers),
                           parse_component(m.at("src").get<std::string>())});
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad circuit JSON: ") + e.what());
  }
  c.validate();
  return c;
}

void save_circuit(const Circuit& c, const std::filesystem::path& path) {
  c.validate();
  write_file(path, circuit_to_json(c).dump(2) + "\n");
}

Circuit load_circuit(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return circuit_from_json(j);
}

// ---- corrupted cache -------------------------------------------------------------

CorruptedCache CorruptedCache::build(const Model& model, const TokenBatch& corrupted) {
  if (corrupted.batch == 0) throw ShapeError("corrupted batch is empty");
  NoGradGuard guard;
  CorruptedCache c;
  c.stacks_ = run_with_cache(model, corrupted).cache;
  c.samples_ = corrupted.batch;
  c.seq_ = corrupted.seq;
  return c;
}

Tensor CorruptedCache::draw(const ComponentId& id, std::size_t batch, std::mt19937_64& rng) const {
  auto it = stacks_.find(id);
  if (it == stacks_.end()) throw LookupError("corrupted cache has no entry for " + to_string(id));
  const Tensor& stack = it->second;
  const std::size_t slab = stack.numel() / samples_;
  std::uniform_int_distribution<std::size_t> pick(0, samples_ - 1);
  std::vector<double> out(batch * slab);
  auto v = stack.values();
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t r = pick(rng);
    std::copy(v.begin() + static_cast<std::ptrdiff_t>(r * slab), v.begin() + static_cast<std::ptrdiff_t>((r + 1) * slab),
              out.begin() + static_cast<std::ptrdiff_t>(b * slab));
  }
  Shape shape = stack.shape();
  shape[0] = batch;
  return Tensor::from(std::move(shape), std::move(out));
}

namespace {

std::uint64_t component_key(const ComponentId& id) {
  return (static_cast<std::uint64_t>(id.layer + 1) << 32) ^ (static_cast<std::uint64_t>(id.kind) << 16) ^
         static_cast<std::uint64_t>(id.head + 1);
}

class EdgeAblation : public Intervention {
 public:
  EdgeAblation(const Circuit& circuit, const CorruptedCache& cache, const EdgeGraph& graph, std::size_t batch,
               std::uint64_t seed)
      : circuit_(circuit), cache_(cache), graph_(graph), batch_(batch), seed_(seed) {}

  bool per_target() const override { return true; }

  Tensor on_target(const TargetId& target, std::span<const SourceOutput> sources) override {
    std::vector<SourceOutput> rebuilt(sources.begin(), sources.end());
    for (SourceOutput& s : rebuilt) {
      const EdgeId e{target, s.id};
      if (circuit_.contains(e)) continue;
      std::mt19937_64 rng(derive_seed({seed_, 0x65646765, graph_.index_of(s.id, target)}));
      s.value = cache_.draw(s.id, batch_, rng);
    }
    return sum_sources(rebuilt);
  }

 private:
  const Circuit& circuit_;
  const CorruptedCache& cache_;
  const EdgeGraph& graph_;
  std::size_t batch_;
  std::uint64_t seed_;
};

}  // namespace

Tensor ablate(const Model& model, const TokenBatch& tokens, const Circuit& circuit, const CorruptedCache& cache,
              std::uint64_t seed) {
  if (tokens.seq != cache.seq()) throw ShapeError("corrupted cache sequence length differs from the prompts");
  NoGradGuard guard;
  if (circuit.level == Level::Node) {
    ActivationCache patches;
    for (const ComponentId& head : head_components(model.config())) {
      if (circuit.contains(head)) continue;
      std::mt19937_64 rng(derive_seed({seed, 0x6E6F6465, component_key(head)}));
      patches.emplace(head, cache.draw(head, tokens.batch, rng));
    }
    return run_with_patch(model, tokens, patches);
  }
  const EdgeGraph graph(model.config());
  EdgeAblation hooks(circuit, cache, graph, tokens.batch, seed);
  return model.run(tokens, hooks);
}

}  // namespace ibc
