// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0

#include "balcony/inference.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "balcony/kernels.hpp"

namespace balcony {

BudgetSpec BudgetSpec::parse(const std::string& text) {
  if (text == "full") return full();
  const auto colon = text.find(':');
  if (colon == std::string::npos) {
    throw ConfigError("budget '" + text + "': expected full, exit:J, params:N or speedup:X");
  }
  const std::string key = text.substr(0, colon), val = text.substr(colon + 1);
  size_t used = 0;
  double v = 0;
  try {
    v = std::stod(val, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != val.size()) throw ConfigError("budget '" + text + "': bad value");
  if (key == "exit") {
    if (v != std::floor(v)) throw ConfigError("budget '" + text + "': exit must be an integer");
    return exit(static_cast<int>(v));
  }
  if (key == "params") return {BudgetKind::max_nonembed_params, v};
  if (key == "speedup") return speedup(v);
  throw ConfigError("budget '" + text + "': unknown kind '" + key + "'");
}

std::string BudgetSpec::str() const {
  std::ostringstream os;
  switch (kind) {
    case BudgetKind::full: return "full";
    case BudgetKind::exit_index: os << "exit:" << static_cast<int64_t>(value); break;
    case BudgetKind::max_nonembed_params: os << "params:" << static_cast<int64_t>(value); break;
    case BudgetKind::target_speedup: os << "speedup:" << value; break;
  }
  return os.str();
}

namespace {

std::string listing(const std::vector<SubmodelInfo>& available) {
  std::string s;
  for (const auto& h : available) {
    if (!s.empty()) s += ", ";
    s += h.name() + " (" + std::to_string(h.nonembed_param_count) + " params)";
  }
  return s;
}

}  // namespace

SubmodelInfo resolve_budget(const BudgetSpec& spec, const std::vector<SubmodelInfo>& available) {
  const SubmodelInfo* full = nullptr;
  for (const auto& h : available) {
    if (h.full) full = &h;
  }
  if (spec.kind == BudgetKind::full) {
    if (!full) throw BudgetError("no full handle available");
    return *full;
  }
  const SubmodelInfo* best = nullptr;
  for (const auto& h : available) {
    bool ok = false;
    switch (spec.kind) {
      case BudgetKind::exit_index:
        ok = h.exit_layer == static_cast<int>(spec.value);
        break;
      case BudgetKind::max_nonembed_params:
        ok = static_cast<double>(h.nonembed_param_count) <= spec.value;
        break;
      case BudgetKind::target_speedup:
        ok = full && static_cast<double>(full->nonembed_param_count) >=
                         spec.value * static_cast<double>(h.nonembed_param_count);
        break;
      case BudgetKind::full:
        break;
    }
    if (ok && (!best || h.exit_layer > best->exit_layer)) best = &h;
  }
  if (!best) {
    throw BudgetError("budget " + spec.str() + " is not satisfiable; available: " +
                      listing(available));
  }
  return *best;
}

void GenerationParams::validate() const {
  if (max_new_tokens < 0) throw ConfigError("max_new_tokens must be non-negative");
  if (mode == DecodeMode::sample && !(temperature > 0.0)) {
    throw ConfigError("temperature must be positive when sampling");
  }
}

template <typename T>
SubmodelHandle<T> InferenceEngine<T>::resolve(const BudgetSpec& spec) const {
  const SubmodelInfo info = resolve_budget(spec, available());
  return make_submodel(*trunk_, *balconies_, info.exit_layer);
}

// ---------------------------------------------------------------------------
// KVCache

template <typename T>
KVCache<T>::KVCache(const ModelConfig& c, int64_t batch)
    : batch_(batch), max_len_(c.max_seq_len), width_(c.attn_width()), d_model_(c.d_model) {
  const size_t layers = static_cast<size_t>(c.n_layers + 1);
  const size_t kv = static_cast<size_t>(batch * max_len_ * width_);
  const size_t hs = static_cast<size_t>(batch * max_len_ * d_model_);
  k_.resize(layers);
  v_.resize(layers);
  hist_.assign(layers, std::vector<T>(hs));
  for (size_t l = 1; l < layers; ++l) {
    k_[l].resize(kv);
    v_[l].resize(kv);
  }
  valid_.assign(layers, 0);
  balcony_k_.resize(kv);
  balcony_v_.resize(kv);
}

// ---------------------------------------------------------------------------
// Session

template <typename T>
Session<T>::Session(const InferenceEngine<T>& engine, const BudgetSpec& budget, int64_t batch,
                    bool use_cache)
    : engine_(&engine), handle_(engine.resolve(budget)), batch_(batch), use_cache_(use_cache) {
  if (batch < 1) throw ConfigError("session batch must be positive");
  if (use_cache_) cache_ = KVCache<T>(engine.trunk().config(), batch);
}

template <typename T>
void Session<T>::feed(const TokenBatch& tokens) {
  if (state_ != SessionState::idle) throw ContractError("feed() while a token is pending");
  if (tokens.batch != batch_) {
    throw DimensionError("session batch " + std::to_string(batch_) + " fed " +
                         std::to_string(tokens.batch) + " rows");
  }
  const int64_t max_len = engine_->trunk().config().max_seq_len;
  if (length_ + tokens.seq > max_len) {
    throw RangeError("context overflow: " + std::to_string(length_ + tokens.seq) +
                     " tokens exceed max_seq_len " + std::to_string(max_len));
  }
  const int64_t vocab = engine_->trunk().config().vocab_size;
  for (int32_t id : tokens.ids) {
    if (id < 0 || id >= vocab) throw RangeError("token id " + std::to_string(id) + " out of vocabulary");
  }
  std::vector<int32_t> merged(static_cast<size_t>(batch_ * (length_ + tokens.seq)));
  for (int64_t b = 0; b < batch_; ++b) {
    for (int64_t s = 0; s < length_; ++s) merged[b * (length_ + tokens.seq) + s] = tokens_[b * length_ + s];
    for (int64_t s = 0; s < tokens.seq; ++s) {
      merged[b * (length_ + tokens.seq) + length_ + s] = tokens.at(b, s);
    }
  }
  tokens_ = std::move(merged);
  length_ += tokens.seq;
}

template <typename T>
void Session<T>::commit(const std::vector<int32_t>& next) {
  if (state_ != SessionState::pending_token) throw ContractError("commit() without next_logits()");
  state_ = SessionState::idle;
  feed(TokenBatch(batch_, 1, next));
}

template <typename T>
std::vector<T> Session<T>::next_logits() {
  if (state_ != SessionState::idle) throw ContractError("next_logits() while a token is pending");
  if (length_ == 0) throw ContractError("next_logits() before any token was fed");
  std::vector<T> out = use_cache_ ? cached_logits() : uncached_logits();
  state_ = SessionState::pending_token;
  return out;
}

template <typename T>
SubmodelInfo Session<T>::swap_budget(const BudgetSpec& budget) {
  if (state_ != SessionState::idle) {
    throw ContractError("swap_budget() mid-token; commit the pending token first");
  }
  SubmodelHandle<T> next = engine_->resolve(budget);
  if (next.info() == handle_.info()) return handle_.info();
  handle_ = next;
  return handle_.info();
}

template <typename T>
std::vector<T> Session<T>::uncached_logits() const {
  const TokenBatch prefix(batch_, length_, tokens_);
  NoGradScope<T> no_grad;
  const Tensor<T> logits = handle_.forward(prefix);
  const int64_t vocab = engine_->trunk().config().vocab_size;
  std::vector<T> out(static_cast<size_t>(batch_ * vocab));
  const auto d = logits.data();
  for (int64_t b = 0; b < batch_; ++b) {
    std::copy_n(d.begin() + (b * length_ + length_ - 1) * vocab, vocab, out.begin() + b * vocab);
  }
  return out;
}

template <typename T>
void Session<T>::run_layer(const DecoderLayer<T>& layer, std::vector<T>& k_cache,
                           std::vector<T>& v_cache, const std::vector<T>& input,
                           std::vector<T>& output, int64_t start, int64_t end) {
  const ModelConfig& c = engine_->trunk().config();
  const auto& rope = engine_->trunk().rope_table();
  const int64_t D = c.d_model, A = c.attn_width(), F = c.d_ff, H = c.n_heads, hd = c.head_dim;
  const int64_t L = cache_.max_len_;
  const int64_t r = end - start, R = batch_ * r;
  const double eps = c.norm_eps;

  std::vector<T> h(static_cast<size_t>(R * D));
  for (int64_t b = 0; b < batch_; ++b) {
    std::copy_n(input.begin() + (b * L + start) * D, r * D, h.begin() + b * r * D);
  }
  std::vector<T> n(static_cast<size_t>(R * D));
  auto norm_rows = [&](const Tensor<T>& w) {
    for (int64_t i = 0; i < R; ++i) {
      kernels::rms_norm_row(h.data() + i * D, w.data().data(), n.data() + i * D, D, eps);
    }
  };
  if (layer.attn) {
    const auto& a = *layer.attn;
    norm_rows(a.norm);
    std::vector<T> q(static_cast<size_t>(R * A)), k(q.size()), v(q.size()), att(q.size());
    kernels::gemm(n.data(), a.wq.data().data(), q.data(), R, D, A, false);
    kernels::gemm(n.data(), a.wk.data().data(), k.data(), R, D, A, false);
    kernels::gemm(n.data(), a.wv.data().data(), v.data(), R, D, A, false);
    for (int64_t b = 0; b < batch_; ++b) {
      for (int64_t s = 0; s < r; ++s) {
        const int64_t row = b * r + s, pos = start + s;
        kernels::rope_row(q.data() + row * A, H, hd, rope, pos, false);
        kernels::rope_row(k.data() + row * A, H, hd, rope, pos, false);
        std::copy_n(k.begin() + row * A, A, k_cache.begin() + (b * L + pos) * A);
        std::copy_n(v.begin() + row * A, A, v_cache.begin() + (b * L + pos) * A);
      }
    }
    const T scale_factor = static_cast<T>(1.0 / std::sqrt(double(hd)));
    std::vector<T> probs(static_cast<size_t>(end));
    for (int64_t b = 0; b < batch_; ++b) {
      for (int64_t hh = 0; hh < H; ++hh) {
        const T* kb = k_cache.data() + b * L * A + hh * hd;
        const T* vb = v_cache.data() + b * L * A + hh * hd;
        for (int64_t s = 0; s < r; ++s) {
          const int64_t row = (b * r + s) * A + hh * hd;
          kernels::attend_row(q.data() + row, kb, vb, A, start + s + 1, hd, scale_factor,
                              probs.data(), att.data() + row);
        }
      }
    }
    std::vector<T> o(static_cast<size_t>(R * D));
    kernels::gemm(att.data(), a.wo.data().data(), o.data(), R, A, D, false);
    for (size_t i = 0; i < h.size(); ++i) h[i] = h[i] + o[i];
  }
  if (layer.mlp) {
    const auto& m = *layer.mlp;
    norm_rows(m.norm);
    std::vector<T> g(static_cast<size_t>(R * F)), u(g.size()), s(g.size());
    kernels::gemm(n.data(), m.w_gate.data().data(), g.data(), R, D, F, false);
    kernels::gemm(n.data(), m.w_up.data().data(), u.data(), R, D, F, false);
    kernels::silu_row(g.data(), s.data(), R * F);
    for (size_t i = 0; i < s.size(); ++i) s[i] = s[i] * u[i];
    std::vector<T> down(static_cast<size_t>(R * D));
    kernels::gemm(s.data(), m.w_down.data().data(), down.data(), R, F, D, false);
    for (size_t i = 0; i < h.size(); ++i) h[i] = h[i] + down[i];
  }
  for (int64_t b = 0; b < batch_; ++b) {
    std::copy_n(h.begin() + b * r * D, r * D, output.begin() + (b * L + start) * D);
  }
  cache_.rows_computed_ += R;
}

template <typename T>
std::vector<T> Session<T>::cached_logits() {
  const TransformerTrunk<T>& trunk = engine_->trunk();
  const ModelConfig& c = trunk.config();
  const int64_t D = c.d_model, V = c.vocab_size, L = cache_.max_len_;
  const int64_t p1 = length_;
  const int j = handle_.exit_layer();

  // Embeddings for newly fed positions.
  const auto table = trunk.embedding_table().data();
  for (int64_t b = 0; b < batch_; ++b) {
    for (int64_t s = cache_.valid_[0]; s < p1; ++s) {
      const int32_t id = tokens_[b * length_ + s];
      std::copy_n(table.begin() + id * D, D, cache_.hist_[0].begin() + (b * L + s) * D);
    }
  }
  cache_.valid_[0] = p1;
  // Each layer catches up from its own valid length (lazy refill).
  for (int l = 1; l <= j; ++l) {
    if (cache_.valid_[l] < p1) {
      run_layer(trunk.layer(l), cache_.k_[l], cache_.v_[l], cache_.hist_[l - 1], cache_.hist_[l],
                cache_.valid_[l], p1);
      cache_.valid_[l] = p1;
    }
  }

  const std::vector<T>* last = &cache_.hist_[static_cast<size_t>(j)];
  std::vector<T> balcony_out;
  const Tensor<T>* norm = &trunk.final_norm();
  if (const BalconyModule<T>* m = handle_.balcony()) {
    if (cache_.balcony_exit_ != j) {
      cache_.balcony_exit_ = j;
      cache_.balcony_valid_ = 0;
      ++cache_.balcony_resets_;
    }
    balcony_out.resize(cache_.hist_[0].size());
    run_layer(m->body, cache_.balcony_k_, cache_.balcony_v_, cache_.hist_[static_cast<size_t>(j)],
              balcony_out, cache_.balcony_valid_, p1);
    cache_.balcony_valid_ = p1;
    last = &balcony_out;
    norm = &m->exit_norm;
  }
  std::vector<T> rows(static_cast<size_t>(batch_ * D));
  for (int64_t b = 0; b < batch_; ++b) {
    kernels::rms_norm_row(last->data() + (b * L + p1 - 1) * D, norm->data().data(),
                          rows.data() + b * D, D, c.norm_eps);
  }
  std::vector<T> logits(static_cast<size_t>(batch_ * V));
  kernels::gemm(rows.data(), trunk.lm_head().data().data(), logits.data(), batch_, D, V, false);
  return logits;
}

template <typename T>
std::vector<std::vector<int32_t>> Session<T>::generate(const GenerationParams& params) {
  params.validate();
  const int64_t max_len = engine_->trunk().config().max_seq_len;
  if (length_ + params.max_new_tokens > max_len) {
    throw RangeError("context overflow: " + std::to_string(length_) + " + " +
                     std::to_string(params.max_new_tokens) + " new tokens exceed max_seq_len " +
                     std::to_string(max_len));
  }
  const int64_t V = engine_->trunk().config().vocab_size;
  Rng rng(mix_seed(params.seed, 31));
  std::vector<std::vector<int32_t>> out(static_cast<size_t>(batch_));
  for (int64_t i = 0; i < params.max_new_tokens; ++i) {
    const std::vector<T> logits = next_logits();
    const std::vector<int32_t> next = pick_tokens(logits, batch_, V, params, rng);
    for (int64_t b = 0; b < batch_; ++b) out[b].push_back(next[b]);
    if (length_ < max_len) {
      commit(next);
    } else {
      state_ = SessionState::idle;
    }
  }
  return out;
}

template <typename T>
std::vector<int32_t> pick_tokens(const std::vector<T>& logits, int64_t batch, int64_t vocab,
                                 const GenerationParams& params, Rng& rng) {
  std::vector<int32_t> out(static_cast<size_t>(batch));
  std::vector<double> p(static_cast<size_t>(vocab));
  for (int64_t b = 0; b < batch; ++b) {
    const T* row = logits.data() + b * vocab;
    if (params.mode == DecodeMode::greedy) {
      out[b] = static_cast<int32_t>(std::max_element(row, row + vocab) - row);
      continue;
    }
    double mx = -INFINITY;
    for (int64_t v = 0; v < vocab; ++v) mx = std::max(mx, double(row[v]) / params.temperature);
    double z = 0;
    for (int64_t v = 0; v < vocab; ++v) z += (p[v] = std::exp(double(row[v]) / params.temperature - mx));
    double u = rng.uniform() * z;
    int64_t pick = vocab - 1;
    for (int64_t v = 0; v < vocab; ++v) {
      u -= p[v];
      if (u < 0) {
        pick = v;
        break;
      }
    }
    out[b] = static_cast<int32_t>(pick);
  }
  return out;
}

template <typename T>
std::vector<std::vector<int32_t>> generate(const InferenceEngine<T>& engine,
                                           const TokenBatch& prompt, const BudgetSpec& budget,
                                           const GenerationParams& params) {
  params.validate();
  if (prompt.seq < 1) throw ContractError("prompt must be non-empty");
  const int64_t max_len = engine.trunk().config().max_seq_len;
  if (prompt.seq + params.max_new_tokens > max_len) {
    throw RangeError("context overflow: prompt " + std::to_string(prompt.seq) + " + " +
                     std::to_string(params.max_new_tokens) + " new tokens exceed max_seq_len " +
                     std::to_string(max_len));
  }
  Session<T> session(engine, budget, prompt.batch, params.use_cache);
  session.feed(prompt);
  return session.generate(params);
}

template <typename T>
double time_generation(const InferenceEngine<T>& engine, const BudgetSpec& budget,
                       const LatencyParams& lp, int run) {
  GenerationParams gp;
  gp.max_new_tokens = lp.gen_len;
  const int64_t vocab = engine.trunk().config().vocab_size;
  TokenBatch prompt(lp.batch, lp.prompt_len);
  Rng rng(mix_seed(lp.seed, static_cast<uint64_t>(run)));
  for (auto& id : prompt.ids) id = static_cast<int32_t>(rng.below(static_cast<uint64_t>(vocab)));
  const auto t0 = std::chrono::steady_clock::now();
  generate(engine, prompt, budget, gp);
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void summarize_latency(LatencyReport& rep) {
  if (rep.samples.empty()) throw ContractError("no latency samples");
  const double n = static_cast<double>(rep.samples.size());
  double sum = 0;
  for (double s : rep.samples) sum += s;
  rep.mean_s = sum / n;
  double var = 0;
  for (double s : rep.samples) var += (s - rep.mean_s) * (s - rep.mean_s);
  rep.std_s = rep.samples.size() > 1 ? std::sqrt(var / (n - 1)) : 0.0;
  std::vector<double> sorted = rep.samples;
  std::sort(sorted.begin(), sorted.end());
  const size_t mid = sorted.size() / 2;
  rep.median_s = sorted.size() % 2 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);
  rep.tokens_per_s = static_cast<double>(rep.batch * rep.gen_len) / rep.median_s;
}

template <typename T>
std::vector<LatencyReport> measure_latencies(const std::vector<LatencyTarget<T>>& targets,
                                             const LatencyParams& lp) {
  if (lp.repeats < 1) throw ConfigError("latency repeats must be positive");
  std::vector<LatencyReport> reps;
  for (const auto& t : targets) {
    const SubmodelHandle<T> handle = t.engine->resolve(t.budget);
    LatencyReport rep;
    rep.handle = handle.name();
    rep.exit_layer = handle.exit_layer();
    rep.nonembed_params = handle.nonembed_param_count();
    rep.prompt_len = lp.prompt_len;
    rep.gen_len = lp.gen_len;
    rep.batch = lp.batch;
    reps.push_back(rep);
  }
  for (int i = 0; i < lp.warmup + lp.repeats; ++i) {
    for (size_t t = 0; t < targets.size(); ++t) {
      const double s = time_generation(*targets[t].engine, targets[t].budget, lp, i);
      if (i >= lp.warmup) reps[t].samples.push_back(s);
    }
  }
  for (auto& rep : reps) summarize_latency(rep);
  return reps;
}

template <typename T>
LatencyReport measure_latency(const InferenceEngine<T>& engine, const BudgetSpec& budget,
                              const LatencyParams& lp) {
  return measure_latencies<T>({{&engine, budget}}, lp).front();
}

#define BALCONY_INSTANTIATE(T)                                                                \
  template class InferenceEngine<T>;                                                          \
  template class KVCache<T>;                                                                  \
  template class Session<T>;                                                                  \
  template std::vector<int32_t> pick_tokens(const std::vector<T>&, int64_t, int64_t,          \
                                            const GenerationParams&, Rng&);                   \
  template std::vector<std::vector<int32_t>> generate(const InferenceEngine<T>&,              \
                                                      const TokenBatch&, const BudgetSpec&,   \
                                                      const GenerationParams&);               \
  template double time_generation(const InferenceEngine<T>&, const BudgetSpec&,               \
                                  const LatencyParams&, int);                                 \
  template LatencyReport measure_latency(const InferenceEngine<T>&, const BudgetSpec&,        \
                                         const LatencyParams&);                               \
  template std::vector<LatencyReport> measure_latencies(const std::vector<LatencyTarget<T>>&, \
                                                        const LatencyParams&);

BALCONY_INSTANTIATE(float)
BALCONY_INSTANTIATE(double)

}  // namespace balcony
