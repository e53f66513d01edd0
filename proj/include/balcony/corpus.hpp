// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0
//
// Deterministic synthetic byte corpus: pseudo-words chained by a seeded
// first-order Markov grammar, split into train and held-out text.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "balcony/rng.hpp"
#include "balcony/tokens.hpp"

namespace balcony {

// Inputs [batch, seq] and next-token targets, one per input position.
struct LmBatch {
  TokenBatch inputs;
  std::vector<int32_t> targets;
};

struct CorpusOptions {
  uint64_t seed = 1234;
  int64_t train_bytes = 2 << 20;
  int64_t heldout_bytes = 256 << 10;
  int vocabulary_words = 96;
  int successors = 3;
};

class SyntheticCorpus {
 public:
  explicit SyntheticCorpus(CorpusOptions options = {});

  const std::string& train() const { return train_; }
  const std::string& heldout() const { return heldout_; }
  const std::vector<std::string>& words() const { return words_; }
  const CorpusOptions& options() const { return options_; }

  // Generates `bytes` of text from the grammar using an independent stream.
  std::string generate(int64_t bytes, uint64_t stream) const;

 private:
  CorpusOptions options_;
  std::vector<std::string> words_;
  std::vector<std::vector<int>> next_;  // successor word ids per word
  std::string train_;
  std::string heldout_;
};

// Uniformly placed windows of seq+1 bytes.
LmBatch sample_batch(const std::string& text, int64_t batch, int64_t seq, Rng& rng);

// Sequential stream of training batches; batch i depends only on (seed, i).
class BatchSampler {
 public:
  BatchSampler(const std::string& text, int64_t batch, int64_t seq, uint64_t seed)
      : text_(&text), batch_(batch), seq_(seq), seed_(seed) {}

  LmBatch at(int64_t index) const;
  LmBatch next() { return at(index_++); }

 private:
  const std::string* text_;
  int64_t batch_;
  int64_t seq_;
  uint64_t seed_;
  int64_t index_ = 0;
};

// Fixed held-out evaluation batches.
std::vector<LmBatch> heldout_batches(const SyntheticCorpus& corpus, int64_t count, int64_t batch,
                                     int64_t seq, uint64_t seed = 7);

}  // namespace balcony
