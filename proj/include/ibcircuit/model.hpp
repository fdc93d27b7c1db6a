#pragma once

// GPT-style decoder with an explicit residual-stream graph.
//
// Source nodes write into the residual stream: token embedding, positional
// embedding, every attention head, every MLP. Target nodes read from it: the
// Q/K/V input of every head, every MLP input, and the final readout. A target at
// layer l reads every source that precedes it (embeddings, heads and MLPs of
// earlier layers, and for an MLP target also the heads of its own layer).

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ibcircuit/tensor.hpp"

namespace ibc {

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 64;
  int d_head = 16;
  int d_mlp = 256;
  int vocab_size = 153;
  int max_seq_len = 16;
  // Off only for linear-readout fixtures; every real model keeps it on.
  bool final_layer_norm = true;

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

enum class SourceKind : std::uint8_t { TokenEmbed, PosEmbed, Head, Mlp };
enum class TargetKind : std::uint8_t { QInput, KInput, VInput, MlpInput, FinalRead };

// Ordered topologically: embeddings (layer -1) first, then per layer heads before the MLP.
struct ComponentId {
  int layer = -1;
  SourceKind kind = SourceKind::TokenEmbed;
  int head = -1;

  static ComponentId tok_embed() { return {-1, SourceKind::TokenEmbed, -1}; }
  static ComponentId pos_embed() { return {-1, SourceKind::PosEmbed, -1}; }
  static ComponentId attn_head(int layer, int head) { return {layer, SourceKind::Head, head}; }
  static ComponentId mlp(int layer) { return {layer, SourceKind::Mlp, -1}; }

  bool is_head() const { return kind == SourceKind::Head; }
  auto operator<=>(const ComponentId&) const = default;
};

struct TargetId {
  int layer = 0;
  TargetKind kind = TargetKind::QInput;
  int head = -1;

  static TargetId q(int layer, int head) { return {layer, TargetKind::QInput, head}; }
  static TargetId k(int layer, int head) { return {layer, TargetKind::KInput, head}; }
  static TargetId v(int layer, int head) { return {layer, TargetKind::VInput, head}; }
  static TargetId mlp_in(int layer) { return {layer, TargetKind::MlpInput, -1}; }
  static TargetId final_read(int n_layers) { return {n_layers, TargetKind::FinalRead, -1}; }

  auto operator<=>(const TargetId&) const = default;
};

struct EdgeId {
  TargetId dst;
  ComponentId src;
  auto operator<=>(const EdgeId&) const = default;
};

// Id grammar: "tok_embed", "pos_embed", "L<l>H<h>", "L<l>MLP" for sources;
// "L<l>H<h>.q|.k|.v", "L<l>MLP.in", "final" for targets.
std::string to_string(const ComponentId& id);
std::string to_string(const TargetId& id);
std::string to_string(const EdgeId& id);
ComponentId parse_component(std::string_view text);
// "final" needs n_layers to resolve its layer.
TargetId parse_target(std::string_view text, int n_layers);

// True when `src` writes into the residual stream before `dst` reads it.
bool precedes(const ComponentId& src, const TargetId& dst);

std::vector<ComponentId> source_components(const ModelConfig& cfg);
std::vector<ComponentId> head_components(const ModelConfig& cfg);
std::vector<TargetId> target_nodes(const ModelConfig& cfg);
std::vector<EdgeId> enumerate_edges(const ModelConfig& cfg);

// Edge list plus index lookup.
class EdgeGraph {
 public:
  explicit EdgeGraph(const ModelConfig& cfg);
  const std::vector<EdgeId>& edges() const { return edges_; }
  std::size_t size() const { return edges_.size(); }
  // Throws LookupError when (src, dst) is not an edge.
  std::size_t index_of(const ComponentId& src, const TargetId& dst) const;

 private:
  std::vector<EdgeId> edges_;
  std::map<EdgeId, std::size_t> index_;
};

struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<int> ids;  // row-major [batch, seq]

  int at(std::size_t b, std::size_t t) const { return ids[b * seq + t]; }
};

// Prompts plus the position whose next-token prediction is scored.
struct PromptBatch {
  TokenBatch tokens;
  std::vector<std::size_t> answer_positions;
};

struct SourceOutput {
  ComponentId id;
  Tensor value;  // [batch, seq, d_model]
};

// Hooks into a forward pass. The default implementation is the plain model.
class Intervention {
 public:
  virtual ~Intervention() = default;
  // Receives a source node's residual contribution; the return value is what gets written.
  virtual Tensor on_source(const ComponentId& id, Tensor contribution);
  // When true the model builds each target's input through on_target instead of
  // sharing one running residual across all targets of a block.
  virtual bool per_target() const { return false; }
  // Builds a target's input from every preceding source (in topological order).
  virtual Tensor on_target(const TargetId& id, std::span<const SourceOutput> sources);
};

Tensor sum_sources(std::span<const SourceOutput> sources);

using ActivationCache = std::map<ComponentId, Tensor>;

struct HeadParams {
  Tensor w_q, b_q, w_k, b_k, w_v, b_v, w_o;
};

struct LayerParams {
  Tensor ln1_g, ln1_b;
  std::vector<HeadParams> heads;
  Tensor ln2_g, ln2_b;
  Tensor w_in, b_in, w_out, b_out;
};

class Model {
 public:
  Model() = default;
  // GPT-2 style init: N(0, 0.02) weights, unit layer-norm gains, zero biases.
  static Model init_random(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  // Stable order; names double as checkpoint tensor names.
  std::vector<std::pair<std::string, Tensor*>> named_parameters();
  std::vector<std::pair<std::string, const Tensor*>> named_parameters() const;

  void set_trainable(bool trainable);
  Model clone() const;

  Tensor run(const TokenBatch& tokens, Intervention& hooks) const;
  Tensor forward(const TokenBatch& tokens) const;

  LayerParams& layer(int l) { return layers_.at(static_cast<std::size_t>(l)); }
  const LayerParams& layer(int l) const { return layers_.at(static_cast<std::size_t>(l)); }
  Tensor& tok_embed() { return tok_embed_; }
  Tensor& pos_embed() { return pos_embed_; }
  Tensor& unembed() { return w_unembed_; }
  Tensor& final_ln_gain() { return lnf_g_; }
  Tensor& final_ln_bias() { return lnf_b_; }

 private:
  void check_tokens(const TokenBatch& tokens) const;
  Tensor attention_head(const LayerParams& lp, const HeadParams& hp, const Tensor& q_in, const Tensor& k_in,
                        const Tensor& v_in, const Tensor& mask) const;

  ModelConfig cfg_;
  Tensor tok_embed_, pos_embed_;
  std::vector<LayerParams> layers_;
  Tensor lnf_g_, lnf_b_, w_unembed_;
};

// Logits plus every source contribution (pre-intervention values).
struct CachedRun {
  Tensor logits;
  ActivationCache cache;
};
CachedRun run_with_cache(const Model& model, const TokenBatch& tokens);

// Replaces the listed sources' contributions with fixed tensors; downstream sees the patched values.
Tensor run_with_patch(const Model& model, const TokenBatch& tokens, const ActivationCache& patches);

// Rows of [batch, seq, vocab] logits at each sample's answer position -> [batch, vocab].
Tensor gather_positions(const Tensor& logits, std::span<const std::size_t> positions);

// IBCK container checkpoints.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);
// Also checks every tensor against the shapes `expected` implies.
Model load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

}  // namespace ibc
