// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0

#include "balcony/model.hpp"

#include <cmath>
#include <sstream>

#include "balcony/rng.hpp"

namespace balcony {

namespace {

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

int64_t parse_int(const std::map<std::string, std::string>& kv, const std::string& key,
                  int64_t fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    size_t used = 0;
    int64_t v = std::stoll(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("model." + key + ": expected an integer, got '" + it->second + "'");
  }
}

double parse_real(const std::map<std::string, std::string>& kv, const std::string& key,
                  double fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    size_t used = 0;
    double v = std::stod(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("model." + key + ": expected a number, got '" + it->second + "'");
  }
}

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, Rng& rng) {
  const int64_t n = shape_numel(shape);
  std::vector<T> values(static_cast<size_t>(n));
  for (auto& v : values) v = static_cast<T>(rng.normal() * stddev);
  return Tensor<T>::from(std::move(shape), std::move(values));
}

constexpr double kInitStd = 0.02;

}  // namespace

ModelConfig ModelConfig::make(int64_t n_layers, int64_t d_model, int64_t n_heads, int64_t d_ff,
                              int64_t vocab_size, int64_t max_seq_len) {
  ModelConfig c;
  c.n_layers = n_layers;
  c.d_model = d_model;
  c.n_heads = n_heads;
  c.head_dim = n_heads > 0 ? d_model / n_heads : 0;
  c.d_ff = d_ff;
  c.vocab_size = vocab_size;
  c.max_seq_len = max_seq_len;
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (n_layers < 1) fail("n_layers must be positive");
  if (d_model < 1) fail("d_model must be positive");
  if (n_heads < 1) fail("n_heads must be positive");
  if (head_dim < 2 || head_dim % 2 != 0) fail("head_dim must be a positive even number");
  if (attn_width() == d_model) {
    if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  } else if (attn_width() > d_model || d_model % head_dim != 0) {
    fail("n_heads * head_dim must equal d_model, or be a head-pruned subset of it");
  }
  if (d_ff < d_model) fail("d_ff must be at least d_model");
  if (vocab_size < 1) fail("vocab_size must be positive");
  if (max_seq_len < 1) fail("max_seq_len must be positive");
  if (!(rope_theta > 0.0)) fail("rope_theta must be positive");
  if (!(norm_eps > 0.0)) fail("norm_eps must be positive");
}

std::vector<std::pair<std::string, std::string>> ModelConfig::to_kv() const {
  return {
      {"n_layers", std::to_string(n_layers)},
      {"d_model", std::to_string(d_model)},
      {"n_heads", std::to_string(n_heads)},
      {"head_dim", std::to_string(head_dim)},
      {"d_ff", std::to_string(d_ff)},
      {"vocab_size", std::to_string(vocab_size)},
      {"max_seq_len", std::to_string(max_seq_len)},
      {"rope_theta", format_double(rope_theta)},
      {"norm_eps", format_double(norm_eps)},
  };
}

ModelConfig ModelConfig::from_kv(const std::map<std::string, std::string>& kv) {
  ModelConfig c;
  c.n_layers = parse_int(kv, "n_layers", c.n_layers);
  c.d_model = parse_int(kv, "d_model", c.d_model);
  c.n_heads = parse_int(kv, "n_heads", c.n_heads);
  const int64_t derived = c.n_heads > 0 ? c.d_model / c.n_heads : 0;
  c.head_dim = parse_int(kv, "head_dim", derived);
  c.d_ff = parse_int(kv, "d_ff", c.d_ff);
  c.vocab_size = parse_int(kv, "vocab_size", c.vocab_size);
  c.max_seq_len = parse_int(kv, "max_seq_len", c.max_seq_len);
  c.rope_theta = parse_real(kv, "rope_theta", c.rope_theta);
  c.norm_eps = parse_real(kv, "norm_eps", c.norm_eps);
  return c;
}

std::string ModelConfig::first_difference(const ModelConfig& other) const {
  const auto a = to_kv();
  const auto b = other.to_kv();
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].second != b[i].second) return a[i].first;
  }
  return {};
}

int64_t decoder_layer_params(const ModelConfig& c) {
  return 4 * c.d_model * c.attn_width() + 3 * c.d_model * c.d_ff + 2 * c.d_model;
}

int64_t count_params(const ModelConfig& c, bool include_embeddings) {
  int64_t n = c.n_layers * decoder_layer_params(c) + c.d_model;
  if (include_embeddings) n += 2 * c.vocab_size * c.d_model;
  return n;
}

// ---------------------------------------------------------------------------
// ParamGroup

template <typename T>
void ParamGroup<T>::add(const std::string& path, Tensor<T> tensor) {
  if (!entries_.emplace(path, std::move(tensor)).second) {
    throw Error("duplicate parameter path '" + path + "'");
  }
}

template <typename T>
void ParamGroup<T>::merge(const ParamGroup& other) {
  for (const auto& [path, t] : other.entries_) add(path, t);
}

template <typename T>
const Tensor<T>& ParamGroup<T>::at(const std::string& path) const {
  auto it = entries_.find(path);
  if (it == entries_.end()) throw Error("unknown parameter path '" + path + "'");
  return it->second;
}

template <typename T>
void ParamGroup<T>::set_frozen(bool frozen) {
  for (auto& [path, t] : entries_) {
    Tensor<T> handle = t;
    handle.set_requires_grad(!frozen);
  }
}

template <typename T>
int64_t ParamGroup<T>::total_elements() const {
  int64_t n = 0;
  for (const auto& [path, t] : entries_) n += t.numel();
  return n;
}

template <typename T>
NamedTensors<T> ParamGroup<T>::trainable() const {
  NamedTensors<T> out;
  for (const auto& [path, t] : entries_) {
    if (t.requires_grad()) out.emplace_back(path, t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// DecoderLayer

template <typename T>
DecoderLayer<T> DecoderLayer<T>::zeros(const ModelConfig& c) {
  const int64_t d = c.d_model, a = c.attn_width(), f = c.d_ff;
  DecoderLayer layer;
  layer.attn = AttentionBlock<T>{Tensor<T>::full({d}, T(1)), Tensor<T>::zeros({d, a}),
                                 Tensor<T>::zeros({d, a}), Tensor<T>::zeros({d, a}),
                                 Tensor<T>::zeros({a, d})};
  layer.mlp = MlpBlock<T>{Tensor<T>::full({d}, T(1)), Tensor<T>::zeros({d, f}),
                          Tensor<T>::zeros({d, f}), Tensor<T>::zeros({f, d})};
  return layer;
}

template <typename T>
DecoderLayer<T> DecoderLayer<T>::random(const ModelConfig& c, uint64_t seed) {
  const int64_t d = c.d_model, a = c.attn_width(), f = c.d_ff;
  Rng rng(seed);
  // Residual-output projections are scaled down with depth.
  const double out_std = kInitStd / std::sqrt(2.0 * double(c.n_layers));
  DecoderLayer layer;
  layer.attn = AttentionBlock<T>{Tensor<T>::full({d}, T(1)), normal_tensor<T>({d, a}, kInitStd, rng),
                                 normal_tensor<T>({d, a}, kInitStd, rng),
                                 normal_tensor<T>({d, a}, kInitStd, rng),
                                 normal_tensor<T>({a, d}, out_std, rng)};
  layer.mlp = MlpBlock<T>{Tensor<T>::full({d}, T(1)), normal_tensor<T>({d, f}, kInitStd, rng),
                          normal_tensor<T>({d, f}, kInitStd, rng),
                          normal_tensor<T>({f, d}, out_std, rng)};
  return layer;
}

template <typename T>
DecoderLayer<T> DecoderLayer<T>::clone() const {
  DecoderLayer out;
  if (attn) {
    out.attn = AttentionBlock<T>{attn->norm.clone(), attn->wq.clone(), attn->wk.clone(),
                                 attn->wv.clone(), attn->wo.clone()};
  }
  if (mlp) {
    out.mlp = MlpBlock<T>{mlp->norm.clone(), mlp->w_gate.clone(), mlp->w_up.clone(),
                          mlp->w_down.clone()};
  }
  return out;
}

template <typename T>
void DecoderLayer<T>::collect(const std::string& prefix, ParamGroup<T>& group) const {
  if (attn) {
    group.add(prefix + "attn.norm", attn->norm);
    group.add(prefix + "attn.wq", attn->wq);
    group.add(prefix + "attn.wk", attn->wk);
    group.add(prefix + "attn.wv", attn->wv);
    group.add(prefix + "attn.wo", attn->wo);
  }
  if (mlp) {
    group.add(prefix + "mlp.norm", mlp->norm);
    group.add(prefix + "mlp.w_gate", mlp->w_gate);
    group.add(prefix + "mlp.w_up", mlp->w_up);
    group.add(prefix + "mlp.w_down", mlp->w_down);
  }
}

template <typename T>
int64_t DecoderLayer<T>::param_count() const {
  ParamGroup<T> g;
  collect("", g);
  return g.total_elements();
}

template <typename T>
Tensor<T> decoder_layer_forward(const DecoderLayer<T>& layer, const Tensor<T>& x,
                                const ModelConfig& c, const kernels::RopeTable<T>& rope_table) {
  Tensor<T> h = x;
  if (layer.attn) {
    const auto& a = *layer.attn;
    Tensor<T> n = rms_norm(h, a.norm, c.norm_eps);
    Tensor<T> q = rope(matmul(n, a.wq), c.n_heads, c.head_dim, rope_table);
    Tensor<T> k = rope(matmul(n, a.wk), c.n_heads, c.head_dim, rope_table);
    Tensor<T> v = matmul(n, a.wv);
    Tensor<T> att = causal_attention(q, k, v, c.n_heads, c.head_dim);
    h = add(h, matmul(att, a.wo));
  }
  if (layer.mlp) {
    const auto& m = *layer.mlp;
    Tensor<T> n = rms_norm(h, m.norm, c.norm_eps);
    Tensor<T> gated = mul(silu(matmul(n, m.w_gate)), matmul(n, m.w_up));
    h = add(h, matmul(gated, m.w_down));
  }
  return h;
}

// ---------------------------------------------------------------------------
// TransformerTrunk

template <typename T>
TransformerTrunk<T>::TransformerTrunk(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const int64_t d = config_.d_model, v = config_.vocab_size;
  embedding_ = Tensor<T>::zeros({v, d});
  for (int64_t i = 0; i < config_.n_layers; ++i) layers_.push_back(DecoderLayer<T>::zeros(config_));
  final_norm_ = Tensor<T>::full({d}, T(1));
  lm_head_ = Tensor<T>::zeros({d, v});
  rope_ = std::make_shared<kernels::RopeTable<T>>(config_.max_seq_len, config_.head_dim,
                                                  config_.rope_theta);
}

template <typename T>
TransformerTrunk<T> TransformerTrunk<T>::random(const ModelConfig& config, uint64_t seed) {
  TransformerTrunk trunk(config);
  const int64_t d = config.d_model, v = config.vocab_size;
  Rng rng(mix_seed(seed, 0));
  trunk.embedding_ = normal_tensor<T>({v, d}, kInitStd, rng);
  trunk.lm_head_ = normal_tensor<T>({d, v}, kInitStd, rng);
  for (int64_t i = 0; i < config.n_layers; ++i) {
    trunk.layers_[i] = DecoderLayer<T>::random(config, mix_seed(seed, 100 + i));
  }
  return trunk;
}

template <typename T>
void TransformerTrunk<T>::check_tokens(const TokenBatch& tokens) const {
  if (tokens.seq > config_.max_seq_len) {
    throw RangeError("sequence length " + std::to_string(tokens.seq) + " exceeds max_seq_len " +
                     std::to_string(config_.max_seq_len));
  }
}

template <typename T>
HiddenState<T> TransformerTrunk<T>::embed(const TokenBatch& tokens) const {
  check_tokens(tokens);
  return HiddenState<T>{embedding(embedding_, tokens), 0};
}

template <typename T>
HiddenState<T> TransformerTrunk<T>::layer_forward(const HiddenState<T>& x, int layer) const {
  if (layer < 1 || layer > config_.n_layers) {
    throw RangeError("layer " + std::to_string(layer) + " outside 1.." +
                     std::to_string(config_.n_layers));
  }
  if (x.layer_index != layer - 1) {
    throw RangeError("layer " + std::to_string(layer) + " expects the output of layer " +
                     std::to_string(layer - 1) + ", got layer " + std::to_string(x.layer_index));
  }
  if (x.values.rank() != 3 || x.values.dim(2) != config_.d_model) {
    throw DimensionError("hidden state shape " + shape_str(x.values.shape()) +
                         " does not match d_model " + std::to_string(config_.d_model));
  }
  if (x.values.dim(1) > config_.max_seq_len) {
    throw RangeError("sequence length " + std::to_string(x.values.dim(1)) +
                     " exceeds max_seq_len " + std::to_string(config_.max_seq_len));
  }
  return HiddenState<T>{decoder_layer_forward(layers_[layer - 1], x.values, config_, *rope_),
                        layer};
}

template <typename T>
HiddenState<T> TransformerTrunk<T>::forward_to_layer(const TokenBatch& tokens, int j) const {
  if (j < 0 || j > config_.n_layers) {
    throw RangeError("exit layer " + std::to_string(j) + " outside 0.." +
                     std::to_string(config_.n_layers));
  }
  HiddenState<T> h = embed(tokens);
  for (int i = 1; i <= j; ++i) h = layer_forward(h, i);
  return h;
}

template <typename T>
Tensor<T> TransformerTrunk<T>::head(const Tensor<T>& hidden) const {
  return matmul(rms_norm(hidden, final_norm_, config_.norm_eps), lm_head_);
}

template <typename T>
Tensor<T> TransformerTrunk<T>::lm_head_only(const Tensor<T>& normed) const {
  return matmul(normed, lm_head_);
}

template <typename T>
Tensor<T> TransformerTrunk<T>::forward_full(const TokenBatch& tokens) const {
  return head(forward_to_layer(tokens, static_cast<int>(config_.n_layers)).values);
}

template <typename T>
typename TransformerTrunk<T>::Trace TransformerTrunk<T>::forward_trace(
    const TokenBatch& tokens) const {
  Trace trace;
  trace.states.reserve(static_cast<size_t>(config_.n_layers + 1));
  trace.states.push_back(embed(tokens));
  for (int i = 1; i <= config_.n_layers; ++i) {
    trace.states.push_back(layer_forward(trace.states.back(), i));
  }
  trace.logits = head(trace.states.back().values);
  return trace;
}

template <typename T>
ParamGroup<T> TransformerTrunk<T>::parameters() const {
  ParamGroup<T> g;
  g.add("embed", embedding_);
  for (int64_t i = 0; i < config_.n_layers; ++i) {
    layers_[i].collect("layers." + std::to_string(i + 1) + ".", g);
  }
  g.add("final_norm", final_norm_);
  g.add("lm_head", lm_head_);
  return g;
}

template <typename T>
void TransformerTrunk<T>::set_frozen(bool frozen) {
  parameters().set_frozen(frozen);
}

template <typename T>
bool TransformerTrunk<T>::all_frozen() const {
  const ParamGroup<T> group = parameters();
  for (const auto& [path, t] : group.entries()) {
    if (t.requires_grad()) return false;
  }
  return true;
}

template <typename T>
TransformerTrunk<T> TransformerTrunk<T>::clone() const {
  TransformerTrunk out(config_);
  out.embedding_ = embedding_.clone();
  out.final_norm_ = final_norm_.clone();
  out.lm_head_ = lm_head_.clone();
  for (size_t i = 0; i < layers_.size(); ++i) out.layers_[i] = layers_[i].clone();
  return out;
}

template <typename T>
const DecoderLayer<T>& TransformerTrunk<T>::layer(int index) const {
  if (index < 1 || index > config_.n_layers) {
    throw RangeError("layer " + std::to_string(index) + " outside 1.." +
                     std::to_string(config_.n_layers));
  }
  return layers_[index - 1];
}

template <typename T>
DecoderLayer<T>& TransformerTrunk<T>::mutable_layer(int index) {
  if (index < 1 || index > config_.n_layers) {
    throw RangeError("layer " + std::to_string(index) + " outside 1.." +
                     std::to_string(config_.n_layers));
  }
  return layers_[index - 1];
}

template class ParamGroup<float>;
template class ParamGroup<double>;
template struct DecoderLayer<float>;
template struct DecoderLayer<double>;
template class TransformerTrunk<float>;
template class TransformerTrunk<double>;
template Tensor<float> decoder_layer_forward(const DecoderLayer<float>&, const Tensor<float>&,
                                             const ModelConfig&, const kernels::RopeTable<float>&);
template Tensor<double> decoder_layer_forward(const DecoderLayer<double>&, const Tensor<double>&,
                                              const ModelConfig&,
                                              const kernels::RopeTable<double>&);

}  // namespace balcony
