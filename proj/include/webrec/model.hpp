#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "webrec/autodiff.hpp"
#include "webrec/numeric.hpp"

namespace webrec {

using TokenId = std::uint32_t;

struct ModelConfig {
  std::size_t vocab_size = 512;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 4;
  std::size_t max_seq_len = 512;
  /// MLP hidden width; 0 means 4 * d_model.
  std::size_t d_ff = 0;
  /// Layer whose head-averaged attention feeds the decode trace; -1 means n_layers / 2.
  int trace_layer = -1;
  /// Generation stops when this token is produced; -1 disables.
  int eos_token = 3;

  std::vector<std::size_t> mp_head_layers;
  std::size_t mp_hops = 1;
  /// 0 selects max(4, ceil(0.1 n)) per prefix of length n.
  std::size_t relation_top_k = 0;
  /// Head whose cached K/V feed entity encoding.
  std::size_t mp_source_head = 0;
  /// Task feature width; 0 means d_model.
  std::size_t d_z = 0;

  std::size_t d_head() const { return d_model / n_heads; }
  std::size_t ff_width() const { return d_ff == 0 ? 4 * d_model : d_ff; }
  std::size_t task_dim() const { return d_z == 0 ? d_model : d_z; }
  std::size_t resolved_trace_layer() const {
    return trace_layer < 0 ? n_layers / 2 : static_cast<std::size_t>(trace_layer);
  }
  bool has_mp_layer(std::size_t layer) const;

  /// Throws ConfigError describing the first violated invariant.
  void validate() const;
};

struct LayerParams {
  ad::Variable norm_attn, norm_mlp;  // 1 x d_model RMSNorm gains
  ad::Variable wq, wk, wv, wo;  // d_model x d_model
  ad::Variable w1, b1;          // d_model x d_ff, 1 x d_ff
  ad::Variable w2, b2;          // d_ff x d_model, 1 x d_model
};

/// The frozen backbone: pre-norm blocks x + Attn(rms(x)), then
/// h + MLP(rms(h)), and a final RMSNorm before the unembedding.
struct BackboneParams {
  ad::Variable token_embedding;     // vocab x d_model
  ad::Variable position_embedding;  // max_seq_len x d_model
  std::vector<LayerParams> layers;
  ad::Variable final_norm;   // 1 x d_model
  ad::Variable unembedding;  // d_model x vocab

  static BackboneParams init(const ModelConfig& cfg, Rng& rng);

  std::vector<ad::Variable> all() const;
  /// Deep copy; the result shares no storage with this.
  BackboneParams clone() const;
  void set_trainable(bool on);
  /// FNV-1a over every parameter's bytes, in a fixed order.
  std::uint64_t checksum() const;
};

/// One MP-Head instance, owned by a single transformer layer.
struct MPLayerParams {
  ad::Variable query;                 // d_model x d_head
  ad::Variable proj_entity;           // 2 d_head x 2 d_head
  ad::Variable proj_relation;         // d_z x 2 d_head
  std::vector<ad::Variable> proj_message;  // per hop, 2 d_head x 2 d_head
  ad::Variable bias;                  // 1 x 2 d_head
  ad::Variable gate;                  // 1 x 1
  ad::Variable out_extension;         // d_head x d_model
};

/// Trainable set for all MP-Head layers. The task feature z is shared.
class Transformer;

struct MPHeadParams {
  ad::Variable task_feature;  // 1 x d_z
  std::vector<std::size_t> layers;
  std::vector<MPLayerParams> per_layer;
  std::size_t hops = 1;
  std::size_t relation_top_k = 0;

  /// gate = 0; other members uniform(+-1/sqrt(fan_in)).
  static MPHeadParams init(const ModelConfig& cfg, Rng& rng);

  MPHeadParams clone() const;
  const MPLayerParams* find(std::size_t layer) const;
  std::vector<ad::Variable> all() const;
  /// (name, variable) pairs for diagnostics and gradient checks.
  std::vector<std::pair<std::string, ad::Variable>> named() const;
  void set_gate(double g);

  /// Starts every MP-Head layer as a copy of the backbone's source head on
  /// the output side: proj_entity becomes the identity and out_extension
  /// the source head's block of W_O. The gate is left as it is.
  void warm_start_from(const Transformer& backbone);
};

/// Parameter-efficient readout adapter trained alongside (or instead of) the
/// MP-Head: a learned bias on the output logits.
struct TaskAdapter {
  ad::Variable logit_bias;  // 1 x vocab
  static TaskAdapter init(const ModelConfig& cfg);
  TaskAdapter clone() const;
};

/// Per-layer key/value rows for every processed position; heads are column
/// blocks of width d_head.
class KVCache {
 public:
  KVCache() = default;
  explicit KVCache(std::size_t n_layers) : keys_(n_layers), values_(n_layers) {}

  std::size_t length() const;
  std::size_t n_layers() const { return keys_.size(); }
  Matrix keys(std::size_t layer, std::size_t head, std::size_t d_head) const;
  Matrix values(std::size_t layer, std::size_t head, std::size_t d_head) const;

  const ad::Variable& layer_keys(std::size_t layer) const { return keys_[layer]; }
  const ad::Variable& layer_values(std::size_t layer) const { return values_[layer]; }
  void append(std::size_t layer, const ad::Variable& k, const ad::Variable& v);

 private:
  std::vector<ad::Variable> keys_;
  std::vector<ad::Variable> values_;
};

struct ForwardOptions {
  const MPHeadParams* mp = nullptr;
  const TaskAdapter* adapter = nullptr;
  /// Indices into the new tokens whose logits are wanted; empty means all.
  std::vector<std::size_t> output_rows;
  bool record_trace = false;
};

struct ForwardOutput {
  ad::Variable logits;                 // one row per requested position
  std::vector<std::size_t> positions;  // absolute position of each logits row
  /// Head-averaged attention of the trace layer for each new token; row i
  /// covers positions [0, position_i].
  std::vector<std::vector<double>> trace_attention;
  /// Width of the concatenated head outputs entering each layer's output
  /// projection.
  std::vector<std::size_t> preprojection_width;
};

struct DecodeTrace {
  std::size_t prompt_length = 0;
  std::vector<TokenId> tokens;
  /// attention[j] is the head-averaged attention row of generated token j
  /// over positions [0, prompt_length + j].
  std::vector<std::vector<double>> attention;
  /// dist[j] is the next-token distribution that produced tokens[j].
  std::vector<std::vector<double>> dist;
};

/// softmax(q k^T / sqrt(d_k)) v, optionally causal (query i sees keys <= i).
Matrix attention_head(const Matrix& q, const Matrix& k, const Matrix& v, bool causal);

class Transformer {
 public:
  Transformer(ModelConfig cfg, BackboneParams params);

  static Transformer init(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& mutable_config() { return cfg_; }
  const BackboneParams& params() const { return params_; }
  BackboneParams& mutable_params() { return params_; }

  /// Processes `tokens` after whatever `cache` already holds.
  ForwardOutput forward(std::span<const TokenId> tokens, KVCache& cache,
                        const ForwardOptions& opts = {}) const;
  /// Convenience: fresh cache, all logits as a plain matrix.
  Matrix logits(std::span<const TokenId> tokens, const MPHeadParams* mp = nullptr) const;

  /// Runs the hidden state entering `first_layer` forward from there. Used to
  /// reuse a frozen prefix computed once per sequence.
  ForwardOutput forward_from(std::size_t first_layer, const ad::Variable& hidden,
                             std::size_t start_position, KVCache& cache,
                             const ForwardOptions& opts) const;
  /// Hidden state entering `layer` for a fresh sequence (no gradient).
  Matrix hidden_before(std::span<const TokenId> tokens, std::size_t layer) const;

  DecodeTrace greedy_decode(std::span<const TokenId> prompt, std::size_t max_new,
                            const MPHeadParams* mp = nullptr) const;

 private:
  ad::Variable embed(std::span<const TokenId> tokens, std::size_t start) const;
  ad::Variable run_layers(std::size_t first_layer, std::size_t end_layer, ad::Variable x,
                          std::size_t start, KVCache& cache, const ForwardOptions& opts,
                          ForwardOutput& out) const;

  ModelConfig cfg_;
  BackboneParams params_;
};

}  // namespace webrec
