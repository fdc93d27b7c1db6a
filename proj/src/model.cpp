#include "ibcircuit/model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <random>

#include "ibcircuit/errors.hpp"
#include "ibcircuit/ibck.hpp"

namespace ibc {

// ---- config ------------------------------------------------------------------

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw ConfigError(std::string("model.") + name + " must be >= 1, got " + std::to_string(v));
  };
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(d_model, "d_model");
  positive(d_head, "d_head");
  positive(d_mlp, "d_mlp");
  positive(vocab_size, "vocab_size");
  positive(max_seq_len, "max_seq_len");
  if (d_model != n_heads * d_head) {
    throw ConfigError("model.d_model (" + std::to_string(d_model) + ") must equal n_heads * d_head (" +
                      std::to_string(n_heads * d_head) + ")");
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"n_layers", n_layers},       {"n_heads", n_heads},         {"d_model", d_model},
          {"d_head", d_head},           {"d_mlp", d_mlp},             {"vocab_size", vocab_size},
          {"max_seq_len", max_seq_len}, {"final_layer_norm", final_layer_norm}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_head = j.at("d_head").get<int>();
    c.d_mlp = j.at("d_mlp").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.final_layer_norm = j.value("final_layer_norm", true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---- ids ---------------------------------------------------------------------

std::string to_string(const ComponentId& id) {
  switch (id.kind) {
    case SourceKind::TokenEmbed: return "tok_embed";
    case SourceKind::PosEmbed: return "pos_embed";
    case SourceKind::Head: return "L" + std::to_string(id.layer) + "H" + std::to_string(id.head);
    case SourceKind::Mlp: return "L" + std::to_string(id.layer) + "MLP";
  }
  return "?";
}

std::string to_string(const TargetId& id) {
  const std::string head = "L" + std::to_string(id.layer) + "H" + std::to_string(id.head);
  switch (id.kind) {
    case TargetKind::QInput: return head + ".q";
    case TargetKind::KInput: return head + ".k";
    case TargetKind::VInput: return head + ".v";
    case TargetKind::MlpInput: return "L" + std::to_string(id.layer) + "MLP.in";
    case TargetKind::FinalRead: return "final";
  }
  return "?";
}

std::string to_string(const EdgeId& id) { return to_string(id.src) + "->" + to_string(id.dst); }

namespace {

// Parses "L<int>" then returns the rest.
bool parse_layer_prefix(std::string_view& text, int& layer) {
  if (text.size() < 2 || text[0] != 'L') return false;
  auto [ptr, ec] = std::from_chars(text.data() + 1, text.data() + text.size(), layer);
  if (ec != std::errc() || ptr == text.data() + 1 || layer < 0) return false;
  text.remove_prefix(static_cast<std::size_t>(ptr - text.data()));
  return true;
}

bool parse_head_suffix(std::string_view& text, int& head) {
  if (text.size() < 2 || text[0] != 'H') return false;
  auto [ptr, ec] = std::from_chars(text.data() + 1, text.data() + text.size(), head);
  if (ec != std::errc() || ptr == text.data() + 1 || head < 0) return false;
  text.remove_prefix(static_cast<std::size_t>(ptr - text.data()));
  return true;
}

}  // namespace

ComponentId parse_component(std::string_view text) {
  const std::string original(text);
  if (text == "tok_embed") return ComponentId::tok_embed();
  if (text == "pos_embed") return ComponentId::pos_embed();
  int layer = 0, head = 0;
  if (parse_layer_prefix(text, layer)) {
    if (text == "MLP") return ComponentId::mlp(layer);
    if (parse_head_suffix(text, head) && text.empty()) return ComponentId::attn_head(layer, head);
  }
  throw FormatError("bad component id '" + original + "'");
}

TargetId parse_target(std::string_view text, int n_layers) {
  const std::string original(text);
  if (text == "final") return TargetId::final_read(n_layers);
  int layer = 0, head = 0;
  if (parse_layer_prefix(text, layer)) {
    if (text == "MLP.in") return TargetId::mlp_in(layer);
    if (parse_head_suffix(text, head)) {
      if (text == ".q") return TargetId::q(layer, head);
      if (text == ".k") return TargetId::k(layer, head);
      if (text == ".v") return TargetId::v(layer, head);
    }
  }
  throw FormatError("bad target id '" + original + "'");
}

bool precedes(const ComponentId& src, const TargetId& dst) {
  if (src.kind == SourceKind::TokenEmbed || src.kind == SourceKind::PosEmbed) return true;
  switch (dst.kind) {
    case TargetKind::QInput:
    case TargetKind::KInput:
    case TargetKind::VInput: return src.layer < dst.layer;
    case TargetKind::MlpInput: return src.layer < dst.layer || (src.layer == dst.layer && src.is_head());
    case TargetKind::FinalRead: return true;
  }
  return false;
}

std::vector<ComponentId> source_components(const ModelConfig& cfg) {
  std::vector<ComponentId> out{ComponentId::tok_embed(), ComponentId::pos_embed()};
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (int h = 0; h < cfg.n_heads; ++h) out.push_back(ComponentId::attn_head(l, h));
    out.push_back(ComponentId::mlp(l));
  }
  return out;
}

std::vector<ComponentId> head_components(const ModelConfig& cfg) {
  std::vector<ComponentId> out;
  for (int l = 0; l < cfg.n_layers; ++l)
    for (int h = 0; h < cfg.n_heads; ++h) out.push_back(ComponentId::attn_head(l, h));
  return out;
}

std::vector<TargetId> target_nodes(const ModelConfig& cfg) {
  std::vector<TargetId> out;
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (int h = 0; h < cfg.n_heads; ++h) out.push_back(TargetId::q(l, h));
    for (int h = 0; h < cfg.n_heads; ++h) out.push_back(TargetId::k(l, h));
    for (int h = 0; h < cfg.n_heads; ++h) out.push_back(TargetId::v(l, h));
    out.push_back(TargetId::mlp_in(l));
  }
  out.push_back(TargetId::final_read(cfg.n_layers));
  return out;
}

std::vector<EdgeId> enumerate_edges(const ModelConfig& cfg) {
  cfg.validate();
  const auto sources = source_components(cfg);
  std::vector<EdgeId> edges;
  for (const TargetId& dst : target_nodes(cfg)) {
    for (const ComponentId& src : sources) {
      if (precedes(src, dst)) edges.push_back({dst, src});
    }
  }
  return edges;
}

EdgeGraph::EdgeGraph(const ModelConfig& cfg) : edges_(enumerate_edges(cfg)) {
  for (std::size_t i = 0; i < edges_.size(); ++i) index_.emplace(edges_[i], i);
}

std::size_t EdgeGraph::index_of(const ComponentId& src, const TargetId& dst) const {
  auto it = index_.find(EdgeId{dst, src});
  if (it == index_.end()) throw LookupError("no edge " + to_string(src) + " -> " + to_string(dst));
  return it->second;
}

// ---- interventions -----------------------------------------------------------

Tensor sum_sources(std::span<const SourceOutput> sources) {
  if (sources.empty()) throw ShapeError("target node has no sources");
  Tensor acc = sources[0].value;
  for (std::size_t i = 1; i < sources.size(); ++i) acc = add(acc, sources[i].value);
  return acc;
}

Tensor Intervention::on_source(const ComponentId&, Tensor contribution) { return contribution; }

Tensor Intervention::on_target(const TargetId&, std::span<const SourceOutput> sources) {
  return sum_sources(sources);
}

// ---- model -------------------------------------------------------------------

Model Model::init_random(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  auto randn = [&](Shape shape) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = normal(rng);
    return Tensor::from(std::move(shape), std::move(v));
  };
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto dh = static_cast<std::size_t>(cfg.d_head);
  const auto dm = static_cast<std::size_t>(cfg.d_mlp);

  Model m;
  m.cfg_ = cfg;
  m.tok_embed_ = randn({static_cast<std::size_t>(cfg.vocab_size), d});
  m.pos_embed_ = randn({static_cast<std::size_t>(cfg.max_seq_len), d});
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerParams lp;
    lp.ln1_g = Tensor::full({d}, 1.0);
    lp.ln1_b = Tensor::zeros({d});
    for (int h = 0; h < cfg.n_heads; ++h) {
      HeadParams hp;
      hp.w_q = randn({d, dh});
      hp.b_q = Tensor::zeros({dh});
      hp.w_k = randn({d, dh});
      hp.b_k = Tensor::zeros({dh});
      hp.w_v = randn({d, dh});
      hp.b_v = Tensor::zeros({dh});
      hp.w_o = randn({dh, d});
      lp.heads.push_back(hp);
    }
    lp.ln2_g = Tensor::full({d}, 1.0);
    lp.ln2_b = Tensor::zeros({d});
    lp.w_in = randn({d, dm});
    lp.b_in = Tensor::zeros({dm});
    lp.w_out = randn({dm, d});
    lp.b_out = Tensor::zeros({d});
    m.layers_.push_back(std::move(lp));
  }
  m.lnf_g_ = Tensor::full({d}, 1.0);
  m.lnf_b_ = Tensor::zeros({d});
  m.w_unembed_ = randn({d, static_cast<std::size_t>(cfg.vocab_size)});
  return m;
}

std::vector<std::pair<std::string, Tensor*>> Model::named_parameters() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("embed.tok", &tok_embed_);
  out.emplace_back("embed.pos", &pos_embed_);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    LayerParams& lp = layers_[l];
    out.emplace_back(p + "ln1.g", &lp.ln1_g);
    out.emplace_back(p + "ln1.b", &lp.ln1_b);
    for (std::size_t h = 0; h < lp.heads.size(); ++h) {
      const std::string hp = p + "attn.h" + std::to_string(h) + ".";
      HeadParams& head = lp.heads[h];
      out.emplace_back(hp + "w_q", &head.w_q);
      out.emplace_back(hp + "b_q", &head.b_q);
      out.emplace_back(hp + "w_k", &head.w_k);
      out.emplace_back(hp + "b_k", &head.b_k);
      out.emplace_back(hp + "w_v", &head.w_v);
      out.emplace_back(hp + "b_v", &head.b_v);
      out.emplace_back(hp + "w_o", &head.w_o);
    }
    out.emplace_back(p + "ln2.g", &lp.ln2_g);
    out.emplace_back(p + "ln2.b", &lp.ln2_b);
    out.emplace_back(p + "mlp.w_in", &lp.w_in);
    out.emplace_back(p + "mlp.b_in", &lp.b_in);
    out.emplace_back(p + "mlp.w_out", &lp.w_out);
    out.emplace_back(p + "mlp.b_out", &lp.b_out);
  }
  out.emplace_back("ln_f.g", &lnf_g_);
  out.emplace_back("ln_f.b", &lnf_b_);
  out.emplace_back("unembed", &w_unembed_);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> Model::named_parameters() const {
  auto mutable_list = const_cast<Model*>(this)->named_parameters();
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.reserve(mutable_list.size());
  for (auto& [name, t] : mutable_list) out.emplace_back(std::move(name), t);
  return out;
}

void Model::set_trainable(bool trainable) {
  for (auto& [name, t] : named_parameters()) t->set_requires_grad(trainable);
}

Model Model::clone() const {
  Model copy = *this;
  for (auto& [name, t] : copy.named_parameters()) *t = t->clone(t->requires_grad());
  return copy;
}

void Model::check_tokens(const TokenBatch& tokens) const {
  if (tokens.batch == 0 || tokens.seq == 0) throw ShapeError("empty token batch");
  if (tokens.ids.size() != tokens.batch * tokens.seq) throw ShapeError("token batch size mismatch");
  if (tokens.seq > static_cast<std::size_t>(cfg_.max_seq_len)) {
    throw ShapeError("sequence length " + std::to_string(tokens.seq) + " exceeds max_seq_len " +
                     std::to_string(cfg_.max_seq_len));
  }
  for (int id : tokens.ids) {
    if (id < 0 || id >= cfg_.vocab_size) {
      throw LookupError("token id " + std::to_string(id) + " out of range for vocab " + std::to_string(cfg_.vocab_size));
    }
  }
}

Tensor Model::attention_head(const LayerParams& lp, const HeadParams& hp, const Tensor& q_in, const Tensor& k_in,
                             const Tensor& v_in, const Tensor& mask) const {
  auto normed = [&lp](const Tensor& x) { return add(mul(layer_norm(x), lp.ln1_g), lp.ln1_b); };
  // Targets that share an input share one normalization.
  const Tensor q_n = normed(q_in);
  const Tensor k_n = k_in.node() == q_in.node() ? q_n : normed(k_in);
  const Tensor v_n = v_in.node() == q_in.node() ? q_n : (v_in.node() == k_in.node() ? k_n : normed(v_in));
  const Tensor q = add(matmul(q_n, hp.w_q), hp.b_q);
  const Tensor k = add(matmul(k_n, hp.w_k), hp.b_k);
  const Tensor v = add(matmul(v_n, hp.w_v), hp.b_v);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg_.d_head));
  const Tensor scores = add(scale(matmul(q, transpose_last2(k)), inv_sqrt), mask);
  const Tensor pattern = softmax(scores);
  return matmul(matmul(pattern, v), hp.w_o);
}

Tensor Model::run(const TokenBatch& tokens, Intervention& hooks) const {
  check_tokens(tokens);
  const std::size_t B = tokens.batch, T = tokens.seq;
  const auto d = static_cast<std::size_t>(cfg_.d_model);

  std::vector<double> mask_values(T * T, 0.0);
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = i + 1; j < T; ++j) mask_values[i * T + j] = -1e9;
  const Tensor mask = Tensor::from({T, T}, std::move(mask_values));

  std::vector<std::size_t> tok_rows(tokens.ids.begin(), tokens.ids.end());
  std::vector<std::size_t> pos_rows(B * T);
  for (std::size_t i = 0; i < pos_rows.size(); ++i) pos_rows[i] = i % T;

  std::vector<SourceOutput> sources;
  const bool per_target = hooks.per_target();
  Tensor residual;
  auto emit = [&](const ComponentId& id, Tensor contribution) {
    Tensor written = hooks.on_source(id, std::move(contribution));
    if (written.shape() != Shape{B, T, d}) {
      throw ShapeError(to_string(id) + " contribution has shape " + shape_str(written.shape()));
    }
    if (!per_target) residual = residual.defined() ? add(residual, written) : written;
    sources.push_back({id, std::move(written)});
  };

  emit(ComponentId::tok_embed(), take_rows(tok_embed_, tok_rows, {B, T}));
  emit(ComponentId::pos_embed(), take_rows(pos_embed_, pos_rows, {B, T}));

  for (int l = 0; l < cfg_.n_layers; ++l) {
    const LayerParams& lp = layers_[static_cast<std::size_t>(l)];
    std::vector<Tensor> head_out;
    const std::size_t preceding = sources.size();
    const std::span<const SourceOutput> visible(sources.data(), preceding);
    for (int h = 0; h < cfg_.n_heads; ++h) {
      Tensor q_in = residual, k_in = residual, v_in = residual;
      if (per_target) {
        q_in = hooks.on_target(TargetId::q(l, h), visible);
        k_in = hooks.on_target(TargetId::k(l, h), visible);
        v_in = hooks.on_target(TargetId::v(l, h), visible);
      }
      head_out.push_back(attention_head(lp, lp.heads[static_cast<std::size_t>(h)], q_in, k_in, v_in, mask));
    }
    for (int h = 0; h < cfg_.n_heads; ++h) emit(ComponentId::attn_head(l, h), std::move(head_out[static_cast<std::size_t>(h)]));

    const Tensor mlp_in = per_target ? hooks.on_target(TargetId::mlp_in(l), sources) : residual;
    const Tensor hidden = gelu(add(matmul(add(mul(layer_norm(mlp_in), lp.ln2_g), lp.ln2_b), lp.w_in), lp.b_in));
    emit(ComponentId::mlp(l), add(matmul(hidden, lp.w_out), lp.b_out));
  }

  const Tensor final_in = per_target ? hooks.on_target(TargetId::final_read(cfg_.n_layers), sources) : residual;
  const Tensor readout = cfg_.final_layer_norm ? add(mul(layer_norm(final_in), lnf_g_), lnf_b_) : final_in;
  return matmul(readout, w_unembed_);
}

Tensor Model::forward(const TokenBatch& tokens) const {
  Intervention plain;
  return run(tokens, plain);
}

namespace {

class CacheHooks : public Intervention {
 public:
  Tensor on_source(const ComponentId& id, Tensor contribution) override {
    cache[id] = contribution;
    return contribution;
  }
  ActivationCache cache;
};

class PatchHooks : public Intervention {
 public:
  explicit PatchHooks(const ActivationCache& patches) : patches_(patches) {}
  Tensor on_source(const ComponentId& id, Tensor contribution) override {
    auto it = patches_.find(id);
    if (it == patches_.end()) return contribution;
    if (it->second.shape() != contribution.shape()) {
      throw ShapeError("patch for " + to_string(id) + " has shape " + shape_str(it->second.shape()) + ", expected " +
                       shape_str(contribution.shape()));
    }
    ++used;
    return it->second;
  }
  std::size_t used = 0;

 private:
  const ActivationCache& patches_;
};

}  // namespace

CachedRun run_with_cache(const Model& model, const TokenBatch& tokens) {
  CacheHooks hooks;
  Tensor logits = model.run(tokens, hooks);
  return {std::move(logits), std::move(hooks.cache)};
}

Tensor run_with_patch(const Model& model, const TokenBatch& tokens, const ActivationCache& patches) {
  const auto known = source_components(model.config());
  for (const auto& [id, t] : patches) {
    if (std::find(known.begin(), known.end(), id) == known.end()) {
      throw LookupError("unknown component " + to_string(id));
    }
  }
  PatchHooks hooks(patches);
  return model.run(tokens, hooks);
}

Tensor gather_positions(const Tensor& logits, std::span<const std::size_t> positions) {
  if (logits.rank() != 3) throw ShapeError("gather_positions: expected [batch, seq, vocab], got " + shape_str(logits.shape()));
  const std::size_t B = logits.dim(0), T = logits.dim(1), V = logits.dim(2);
  if (positions.size() != B) throw ShapeError("gather_positions: one position per sample required");
  std::vector<std::size_t> rows(B);
  for (std::size_t b = 0; b < B; ++b) {
    if (positions[b] >= T) {
      throw LookupError("answer position " + std::to_string(positions[b]) + " out of range for seq " + std::to_string(T));
    }
    rows[b] = b * T + positions[b];
  }
  return take_rows(reshape(logits, {B * T, V}), rows, {B});
}

// ---- checkpoints -------------------------------------------------------------

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  IbckFile file;
  file.header = {{"kind", "model"}, {"config", model.config().to_json()}};
  for (const auto& [name, t] : model.named_parameters()) {
    file.tensors.push_back({name, t->shape(), std::vector<double>(t->values().begin(), t->values().end())});
  }
  write_ibck(path, file);
}

namespace {

Model model_from_ibck(const IbckFile& file, const ModelConfig& cfg) {
  Model m = Model::init_random(cfg, 0);
  auto params = m.named_parameters();
  if (file.tensors.size() != params.size()) {
    throw ShapeError("checkpoint holds " + std::to_string(file.tensors.size()) + " tensors, config implies " +
                     std::to_string(params.size()));
  }
  for (auto& [name, t] : params) {
    const NamedTensor* stored = file.find(name);
    if (!stored) throw ShapeError("checkpoint is missing tensor " + name);
    if (stored->shape != t->shape()) {
      throw ShapeError("tensor " + name + " has shape " + shape_str(stored->shape) + ", expected " +
                       shape_str(t->shape()));
    }
    *t = Tensor::from(stored->shape, stored->values);
  }
  return m;
}

}  // namespace

Model load_checkpoint(const std::filesystem::path& path) {
  IbckFile file = read_ibck(path);
  if (!file.header.contains("config")) throw FormatError("checkpoint header has no model config");
  return model_from_ibck(file, ModelConfig::from_json(file.header["config"]));
}

Model load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  IbckFile file = read_ibck(path);
  return model_from_ibck(file, expected);
}

}  // namespace ibc
