// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0
//
// Raw row-major kernels shared by the differentiable ops and the cached
// inference engine. Every kernel computes each output element with a fixed
// sequence of fused multiply-adds whose order depends only on the reduction
// length, never on how many rows are processed together or on the thread
// count. That is what makes a one-row cached decode step bitwise equal to the
// same row of a full-sequence recompute.

#pragma once

#include <cstdint>
#include <functional>
#include <vector>

namespace balcony::kernels {

// Number of worker threads used by parallel kernels. Defaults to
// min(BALCONY_THREADS, hardware threads); 1 when the variable is unset on a
// single-core host.
int thread_count();
void set_thread_count(int n);

// Runs fn(begin, end) over a static partition of [0, n).
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

// c[m,n] = a[m,k] * b[k,n], or c += a*b when accumulate is set.
template <typename T>
void gemm(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n,
          bool accumulate);

template <typename T>
void transpose(const T* src, T* dst, int64_t rows, int64_t cols);

// y = x / sqrt(mean(x^2) + eps) * w for one row. Returns the inverse RMS.
template <typename T>
T rms_norm_row(const T* x, const T* w, T* y, int64_t dim, double eps);

template <typename T>
void softmax_row(const T* x, T* y, int64_t n);

template <typename T>
void log_softmax_row(const T* x, T* y, int64_t n);

// Rotary embedding cos/sin values for positions [0, max_pos) and head_dim/2
// frequencies; computed in double then rounded to T.
template <typename T>
struct RopeTable {
  int64_t max_pos = 0;
  int64_t half = 0;
  std::vector<T> cos;
  std::vector<T> sin;
  RopeTable(int64_t max_pos, int64_t head_dim, double theta);
};

// Rotates the n_heads blocks of one position's vector in place. The first and
// second halves of each head form the rotated pairs. `inverse` applies the
// transposed rotation (used by backward).
template <typename T>
void rope_row(T* x, int64_t n_heads, int64_t head_dim, const RopeTable<T>& table,
              int64_t pos, bool inverse);

// Causal attention for a single query row of one head. Keys/values for
// positions [0, len) live at k + p*stride and v + p*stride. Writes the
// attention probabilities to probs[0, len) and the output to out[0, head_dim).
template <typename T>
void attend_row(const T* q, const T* k, const T* v, int64_t stride, int64_t len,
                int64_t head_dim, T scale, T* probs, T* out);

// y = x * sigmoid(x), elementwise.
template <typename T>
void silu_row(const T* x, T* y, int64_t n);

}  // namespace balcony::kernels
