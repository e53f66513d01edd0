// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0
//
// Runtime engine: budget-indexed submodel selection, autoregressive decoding
// with a per-session KV cache, mid-stream budget swaps and latency probes.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "balcony/balcony.hpp"
#include "balcony/rng.hpp"

namespace balcony {

enum class BudgetKind { full, exit_index, max_nonembed_params, target_speedup };

struct BudgetSpec {
  BudgetKind kind = BudgetKind::full;
  double value = 0.0;

  static BudgetSpec full() { return {}; }
  static BudgetSpec exit(int layer) { return {BudgetKind::exit_index, double(layer)}; }
  static BudgetSpec max_params(int64_t n) { return {BudgetKind::max_nonembed_params, double(n)}; }
  static BudgetSpec speedup(double x) { return {BudgetKind::target_speedup, x}; }

  // "full", "exit:J", "params:N" or "speedup:X".
  static BudgetSpec parse(const std::string& text);
  std::string str() const;
};

// exit_index must name an available exit exactly; the cap kinds pick the
// largest submodel satisfying the cap. target_speedup estimates speedup as
// FULL non-embedding params / handle params. Throws BudgetError listing the
// available handles when nothing qualifies.
SubmodelInfo resolve_budget(const BudgetSpec& spec, const std::vector<SubmodelInfo>& available);

enum class DecodeMode { greedy, sample };

struct GenerationParams {
  int64_t max_new_tokens = 32;
  DecodeMode mode = DecodeMode::greedy;
  double temperature = 1.0;
  uint64_t seed = 0;
  bool use_cache = true;

  void validate() const;
};

// Read-only view over a trunk and its balconies; any number of sessions may
// share one engine.
template <typename T>
class InferenceEngine {
 public:
  InferenceEngine(const TransformerTrunk<T>& trunk, const BalconySet<T>& balconies)
      : trunk_(&trunk), balconies_(&balconies) {}

  const TransformerTrunk<T>& trunk() const { return *trunk_; }
  const BalconySet<T>& balconies() const { return *balconies_; }
  std::vector<SubmodelInfo> available() const { return available_submodels(*trunk_, *balconies_); }
  SubmodelHandle<T> resolve(const BudgetSpec& spec) const;

 private:
  const TransformerTrunk<T>* trunk_;
  const BalconySet<T>* balconies_;
};

// Per-layer keys/values and hidden-state history. Layer l (1..N) is valid
// for positions [0, valid(l)); history 0 holds the embeddings. One extra slot
// caches the balcony layer of the current exit.
template <typename T>
class KVCache {
 public:
  KVCache() = default;
  KVCache(const ModelConfig& config, int64_t batch);

  int64_t valid(int layer) const { return valid_[static_cast<size_t>(layer)]; }
  int balcony_exit() const { return balcony_exit_; }
  int64_t balcony_valid() const { return balcony_valid_; }
  // Rows computed by trunk layers and the balcony slot since construction.
  int64_t rows_computed() const { return rows_computed_; }
  int64_t balcony_resets() const { return balcony_resets_; }

 private:
  template <typename>
  friend class Session;

  int64_t batch_ = 0;
  int64_t max_len_ = 0;
  int64_t width_ = 0;  // attention width
  int64_t d_model_ = 0;
  std::vector<std::vector<T>> k_, v_;   // [N+1][batch * max_len * width], index 0 unused
  std::vector<std::vector<T>> hist_;    // [N+1][batch * max_len * d_model]
  std::vector<int64_t> valid_;          // [N+1]
  std::vector<T> balcony_k_, balcony_v_;
  int balcony_exit_ = 0;
  int64_t balcony_valid_ = 0;
  int64_t rows_computed_ = 0;
  int64_t balcony_resets_ = 0;
};

enum class SessionState { idle, pending_token };

// One decoding stream (batch of equal-length sequences). next_logits()
// leaves the session mid-token until commit(); budgets may only change while
// idle.
template <typename T>
class Session {
 public:
  Session(const InferenceEngine<T>& engine, const BudgetSpec& budget, int64_t batch,
          bool use_cache = true);

  void feed(const TokenBatch& tokens);
  // [batch, vocab] logits for the next position under the current submodel.
  std::vector<T> next_logits();
  void commit(const std::vector<int32_t>& tokens);

  // No-op when the resolved handle is unchanged.
  SubmodelInfo swap_budget(const BudgetSpec& budget);

  std::vector<std::vector<int32_t>> generate(const GenerationParams& params);

  SessionState state() const { return state_; }
  const SubmodelInfo& current() const { return handle_.info(); }
  int64_t length() const { return length_; }
  int64_t batch() const { return batch_; }
  const std::vector<int32_t>& tokens() const { return tokens_; }  // [batch, length]
  const KVCache<T>& cache() const { return cache_; }

 private:
  std::vector<T> cached_logits();
  std::vector<T> uncached_logits() const;
  void run_layer(const DecoderLayer<T>& layer, std::vector<T>& k_cache, std::vector<T>& v_cache,
                 const std::vector<T>& input, std::vector<T>& output, int64_t start, int64_t end);

  const InferenceEngine<T>* engine_;
  SubmodelHandle<T> handle_;
  int64_t batch_;
  bool use_cache_;
  KVCache<T> cache_;
  std::vector<int32_t> tokens_;
  int64_t length_ = 0;
  SessionState state_ = SessionState::idle;
};

// Picks the next token per row; greedy takes the first maximum.
template <typename T>
std::vector<int32_t> pick_tokens(const std::vector<T>& logits, int64_t batch, int64_t vocab,
                                 const GenerationParams& params, Rng& rng);

// Prompt [batch, P] -> generated continuations, one per row.
template <typename T>
std::vector<std::vector<int32_t>> generate(const InferenceEngine<T>& engine,
                                           const TokenBatch& prompt, const BudgetSpec& budget,
                                           const GenerationParams& params);

struct LatencyReport {
  std::string handle;
  int exit_layer = 0;
  int64_t nonembed_params = 0;
  int64_t prompt_len = 0;
  int64_t gen_len = 0;
  int64_t batch = 0;
  double mean_s = 0.0;
  double std_s = 0.0;
  double median_s = 0.0;
  double tokens_per_s = 0.0;
  std::vector<double> samples;
};

// Fills mean, sample std, median and tokens/s from `samples`.
void summarize_latency(LatencyReport& report);

struct LatencyParams {
  int64_t prompt_len = 32;
  int64_t gen_len = 64;
  int64_t batch = 1;
  int repeats = 5;
  int warmup = 2;
  uint64_t seed = 0;
};

// Seconds for one prefill plus gen_len cached greedy tokens; `run` selects
// the random prompt.
template <typename T>
double time_generation(const InferenceEngine<T>& engine, const BudgetSpec& budget,
                       const LatencyParams& params, int run);

// Statistics over `repeats` timed runs after `warmup` untimed ones.
template <typename T>
LatencyReport measure_latency(const InferenceEngine<T>& engine, const BudgetSpec& budget,
                              const LatencyParams& params);

template <typename T>
struct LatencyTarget {
  const InferenceEngine<T>* engine;
  BudgetSpec budget;
};

// As measure_latency for several targets, timing them round-robin so slow
// drift in machine load spreads evenly across targets.
template <typename T>
std::vector<LatencyReport> measure_latencies(const std::vector<LatencyTarget<T>>& targets,
                                             const LatencyParams& params);

}  // namespace balcony
