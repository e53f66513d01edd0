// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0
//
// Decoder-only transformer trunk: RMSNorm pre-norm blocks, causal multi-head
// attention with rotary positions, SiLU-gated MLP, and an untied LM head.
// Layers are numbered 1..n_layers; hidden state 0 is the token embedding.

#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "balcony/kernels.hpp"
#include "balcony/ops.hpp"
#include "balcony/tensor.hpp"
#include "balcony/tokens.hpp"

namespace balcony {

struct ModelConfig {
  int64_t n_layers = 8;
  int64_t d_model = 128;
  int64_t n_heads = 4;
  // Per-head width. Equals d_model / n_heads for unpruned configs; head
  // pruning keeps it fixed and lowers n_heads.
  int64_t head_dim = 32;
  int64_t d_ff = 512;
  int64_t vocab_size = 256;
  int64_t max_seq_len = 256;
  double rope_theta = 10000.0;
  double norm_eps = 1e-5;

  // Config with head_dim = d_model / n_heads.
  static ModelConfig make(int64_t n_layers, int64_t d_model, int64_t n_heads, int64_t d_ff,
                          int64_t vocab_size = 256, int64_t max_seq_len = 256);

  int64_t attn_width() const { return n_heads * head_dim; }

  // Throws ConfigError naming the first violated constraint.
  void validate() const;

  // Canonical ordered key/value form, used by checkpoints and config files.
  std::vector<std::pair<std::string, std::string>> to_kv() const;
  static ModelConfig from_kv(const std::map<std::string, std::string>& kv);

  // Name of the first field that differs, or empty when equal.
  std::string first_difference(const ModelConfig& other) const;

  bool operator==(const ModelConfig&) const = default;
};

// 4*D*A (attention, A = heads*head_dim) + 3*D*d_ff (gated MLP) + 2*D (norms).
int64_t decoder_layer_params(const ModelConfig& config);
// Non-embedding count is all decoder layers plus the final norm. With
// embeddings it adds the token table and the LM head (the output embedding).
int64_t count_params(const ModelConfig& config, bool include_embeddings);

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

// Named parameter map. A frozen entry is one whose tensor does not require
// grad; paths are unique.
template <typename T>
class ParamGroup {
 public:
  void add(const std::string& path, Tensor<T> tensor);
  void merge(const ParamGroup& other);

  bool contains(const std::string& path) const { return entries_.count(path) != 0; }
  const Tensor<T>& at(const std::string& path) const;
  bool frozen(const std::string& path) const { return !at(path).requires_grad(); }

  void set_frozen(bool frozen);
  int64_t total_elements() const;
  size_t size() const { return entries_.size(); }

  // Sorted by path. On a temporary the map is moved out, so range-for over
  // `trunk.parameters().entries()` stays valid.
  const std::map<std::string, Tensor<T>>& entries() const& { return entries_; }
  std::map<std::string, Tensor<T>> entries() && { return std::move(entries_); }
  NamedTensors<T> trainable() const;

 private:
  std::map<std::string, Tensor<T>> entries_;
};

template <typename T>
struct AttentionBlock {
  Tensor<T> norm;  // [D]
  Tensor<T> wq;    // [D, A]
  Tensor<T> wk;    // [D, A]
  Tensor<T> wv;    // [D, A]
  Tensor<T> wo;    // [A, D]
};

template <typename T>
struct MlpBlock {
  Tensor<T> norm;    // [D]
  Tensor<T> w_gate;  // [D, F]
  Tensor<T> w_up;    // [D, F]
  Tensor<T> w_down;  // [F, D]
};

// A pre-norm residual block. Trunk layers always hold both sublayers; exit
// module variants may drop one.
template <typename T>
struct DecoderLayer {
  std::optional<AttentionBlock<T>> attn;
  std::optional<MlpBlock<T>> mlp;

  static DecoderLayer zeros(const ModelConfig& config);
  static DecoderLayer random(const ModelConfig& config, uint64_t seed);

  DecoderLayer clone() const;
  void collect(const std::string& prefix, ParamGroup<T>& group) const;
  int64_t param_count() const;
};

template <typename T>
struct HiddenState {
  Tensor<T> values;  // [batch, seq, d_model]
  int layer_index = 0;
};

// Applies one decoder block to x[batch, seq, d_model].
template <typename T>
Tensor<T> decoder_layer_forward(const DecoderLayer<T>& layer, const Tensor<T>& x,
                                const ModelConfig& config, const kernels::RopeTable<T>& rope);

template <typename T>
class TransformerTrunk {
 public:
  // All-zero weights with unit norms.
  explicit TransformerTrunk(ModelConfig config);
  static TransformerTrunk random(const ModelConfig& config, uint64_t seed);

  const ModelConfig& config() const { return config_; }

  HiddenState<T> embed(const TokenBatch& tokens) const;
  // Pre: x.layer_index == layer - 1, 1 <= layer <= n_layers.
  HiddenState<T> layer_forward(const HiddenState<T>& x, int layer) const;
  // Embedding followed by layers 1..j; j == 0 returns the embeddings.
  HiddenState<T> forward_to_layer(const TokenBatch& tokens, int j) const;
  // final_norm + lm_head on a hidden tensor.
  Tensor<T> head(const Tensor<T>& hidden) const;
  // Shared LM head only (no final norm).
  Tensor<T> lm_head_only(const Tensor<T>& normed) const;
  Tensor<T> forward_full(const TokenBatch& tokens) const;

  // One pass returning every hidden state 0..N and the full-model logits.
  struct Trace {
    std::vector<HiddenState<T>> states;
    Tensor<T> logits;
  };
  Trace forward_trace(const TokenBatch& tokens) const;

  ParamGroup<T> parameters() const;
  void set_frozen(bool frozen);
  bool all_frozen() const;

  TransformerTrunk clone() const;
  template <typename U>
  TransformerTrunk<U> cast() const;

  const DecoderLayer<T>& layer(int index) const;
  DecoderLayer<T>& mutable_layer(int index);
  const Tensor<T>& embedding_table() const { return embedding_; }
  const Tensor<T>& final_norm() const { return final_norm_; }
  const Tensor<T>& lm_head() const { return lm_head_; }
  Tensor<T>& mutable_embedding_table() { return embedding_; }
  Tensor<T>& mutable_final_norm() { return final_norm_; }
  Tensor<T>& mutable_lm_head() { return lm_head_; }
  const kernels::RopeTable<T>& rope_table() const { return *rope_; }

 private:
  void check_tokens(const TokenBatch& tokens) const;

  ModelConfig config_;
  Tensor<T> embedding_;  // [V, D]
  std::vector<DecoderLayer<T>> layers_;
  Tensor<T> final_norm_;  // [D]
  Tensor<T> lm_head_;     // [D, V]
  std::shared_ptr<const kernels::RopeTable<T>> rope_;
};

template <typename U, typename T>
Tensor<U> cast_tensor(const Tensor<T>& t) {
  std::vector<U> values(t.data().begin(), t.data().end());
  return Tensor<U>::from(t.shape(), std::move(values), t.requires_grad());
}

template <typename U, typename T>
DecoderLayer<U> cast_layer(const DecoderLayer<T>& layer) {
  DecoderLayer<U> out;
  if (layer.attn) {
    const auto& a = *layer.attn;
    out.attn = AttentionBlock<U>{cast_tensor<U>(a.norm), cast_tensor<U>(a.wq),
                                 cast_tensor<U>(a.wk), cast_tensor<U>(a.wv),
                                 cast_tensor<U>(a.wo)};
  }
  if (layer.mlp) {
    const auto& m = *layer.mlp;
    out.mlp = MlpBlock<U>{cast_tensor<U>(m.norm), cast_tensor<U>(m.w_gate),
                          cast_tensor<U>(m.w_up), cast_tensor<U>(m.w_down)};
  }
  return out;
}

template <typename T>
template <typename U>
TransformerTrunk<U> TransformerTrunk<T>::cast() const {
  TransformerTrunk<U> out(config_);
  out.mutable_embedding_table() = cast_tensor<U>(embedding_);
  out.mutable_final_norm() = cast_tensor<U>(final_norm_);
  out.mutable_lm_head() = cast_tensor<U>(lm_head_);
  for (int i = 1; i <= config_.n_layers; ++i) out.mutable_layer(i) = cast_layer<U>(layer(i));
  return out;
}

}  // namespace balcony
