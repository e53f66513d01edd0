// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "balcony/errors.hpp"

namespace balcony {

// A batch of byte-level token ids laid out [batch, seq] row-major.
struct TokenBatch {
  int64_t batch = 0;
  int64_t seq = 0;
  std::vector<int32_t> ids;

  TokenBatch() = default;
  TokenBatch(int64_t b, int64_t s) : batch(b), seq(s), ids(static_cast<size_t>(b * s), 0) {}
  TokenBatch(int64_t b, int64_t s, std::vector<int32_t> values)
      : batch(b), seq(s), ids(std::move(values)) {
    if (static_cast<int64_t>(ids.size()) != b * s) {
      throw DimensionError("token batch " + std::to_string(b) + "x" + std::to_string(s) +
                           " given " + std::to_string(ids.size()) + " ids");
    }
  }

  int32_t& at(int64_t b, int64_t s) { return ids[static_cast<size_t>(b * seq + s)]; }
  int32_t at(int64_t b, int64_t s) const { return ids[static_cast<size_t>(b * seq + s)]; }
  int64_t size() const { return batch * seq; }

  static TokenBatch from_text(std::string_view text) {
    TokenBatch t(1, static_cast<int64_t>(text.size()));
    for (size_t i = 0; i < text.size(); ++i) t.ids[i] = static_cast<unsigned char>(text[i]);
    return t;
  }
};

inline std::string tokens_to_text(const std::vector<int32_t>& ids) {
  std::string s;
  s.reserve(ids.size());
  for (int32_t id : ids) s.push_back(static_cast<char>(id & 0xFF));
  return s;
}

}  // namespace balcony
