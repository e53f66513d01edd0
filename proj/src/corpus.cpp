// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0

#include "balcony/corpus.hpp"

#include <set>

namespace balcony {

namespace {

constexpr const char* kConsonants = "bcdfghklmnprstvz";
constexpr const char* kVowels = "aeiou";

// Successor weights: the first successor dominates.
int pick_successor(Rng& rng, int count) {
  const double u = rng.uniform();
  if (count == 1 || u < 0.6) return 0;
  if (count == 2 || u < 0.9) return 1;
  return 2 + static_cast<int>(rng.below(static_cast<uint64_t>(count - 2)));
}

}  // namespace

SyntheticCorpus::SyntheticCorpus(CorpusOptions options) : options_(options) {
  if (options_.vocabulary_words < 2 || options_.successors < 1) {
    throw ConfigError("corpus needs at least 2 words and 1 successor");
  }
  Rng rng(mix_seed(options_.seed, 0));
  std::set<std::string> seen;
  while (static_cast<int>(words_.size()) < options_.vocabulary_words) {
    const int syllables = 1 + static_cast<int>(rng.below(3));
    std::string w;
    for (int s = 0; s < syllables; ++s) {
      w.push_back(kConsonants[rng.below(16)]);
      w.push_back(kVowels[rng.below(5)]);
    }
    if (rng.uniform() < 0.3) w.push_back(kConsonants[rng.below(16)]);
    if (seen.insert(w).second) words_.push_back(w);
  }
  next_.resize(words_.size());
  for (auto& succ : next_) {
    for (int k = 0; k < options_.successors; ++k) {
      succ.push_back(static_cast<int>(rng.below(words_.size())));
    }
  }
  train_ = generate(options_.train_bytes, 1);
  heldout_ = generate(options_.heldout_bytes, 2);
}

std::string SyntheticCorpus::generate(int64_t bytes, uint64_t stream) const {
  Rng rng(mix_seed(options_.seed, 100 + stream));
  std::string out;
  out.reserve(static_cast<size_t>(bytes) + 32);
  int word = static_cast<int>(rng.below(words_.size()));
  int in_sentence = 0;
  bool capital = true;
  while (static_cast<int64_t>(out.size()) < bytes) {
    std::string w = words_[static_cast<size_t>(word)];
    if (capital) w[0] = static_cast<char>(w[0] - 'a' + 'A');
    capital = false;
    out += w;
    ++in_sentence;
    if (in_sentence >= 4 && rng.uniform() < 0.15) {
      out += rng.uniform() < 0.25 ? ".\n" : ". ";
      in_sentence = 0;
      capital = true;
    } else {
      out += ' ';
    }
    const auto& succ = next_[static_cast<size_t>(word)];
    word = succ[static_cast<size_t>(pick_successor(rng, static_cast<int>(succ.size())))];
  }
  out.resize(static_cast<size_t>(bytes));
  return out;
}

LmBatch sample_batch(const std::string& text, int64_t batch, int64_t seq, Rng& rng) {
  if (static_cast<int64_t>(text.size()) < seq + 1) {
    throw RangeError("text of " + std::to_string(text.size()) + " bytes is shorter than seq+1");
  }
  LmBatch out{TokenBatch(batch, seq), std::vector<int32_t>(static_cast<size_t>(batch * seq))};
  const uint64_t span = text.size() - static_cast<size_t>(seq);
  for (int64_t b = 0; b < batch; ++b) {
    const size_t start = rng.below(span);
    for (int64_t s = 0; s < seq; ++s) {
      out.inputs.at(b, s) = static_cast<unsigned char>(text[start + s]);
      out.targets[static_cast<size_t>(b * seq + s)] = static_cast<unsigned char>(text[start + s + 1]);
    }
  }
  return out;
}

LmBatch BatchSampler::at(int64_t index) const {
  Rng rng(mix_seed(seed_, static_cast<uint64_t>(index)));
  return sample_batch(*text_, batch_, seq_, rng);
}

std::vector<LmBatch> heldout_batches(const SyntheticCorpus& corpus, int64_t count, int64_t batch,
                                     int64_t seq, uint64_t seed) {
  std::vector<LmBatch> out;
  Rng rng(mix_seed(seed, 77));
  for (int64_t i = 0; i < count; ++i) out.push_back(sample_batch(corpus.heldout(), batch, seq, rng));
  return out;
}

}  // namespace balcony
