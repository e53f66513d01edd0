// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0

#include "balcony/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <cstdlib>
#include <limits>
#include <mutex>
#include <thread>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace balcony::kernels {

namespace {

int initial_thread_count() {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw <= 0) hw = 1;
  if (const char* env = std::getenv("BALCONY_THREADS")) {
    int cap = std::atoi(env);
    if (cap >= 1) return std::min(cap, hw);
  }
  return hw;
}

// Fixed-size pool; each job is split into `workers + 1` static chunks and the
// calling thread runs chunk 0.
class ThreadPool {
 public:
  explicit ThreadPool(int threads) { resize(threads); }
  ~ThreadPool() { stop(); }

  int size() const { return static_cast<int>(workers_.size()) + 1; }

  void resize(int threads) {
    stop();
    shutdown_ = false;
    for (int i = 1; i < threads; ++i) {
      workers_.emplace_back([this, i] { loop(i); });
    }
  }

  void run(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    const int parts = size();
    if (parts == 1 || n < 2) {
      fn(0, n);
      return;
    }
    {
      std::unique_lock lock(mu_);
      job_ = &fn;
      job_n_ = n;
      pending_ = parts - 1;
      ++generation_;
    }
    cv_.notify_all();
    auto [b, e] = chunk(0, parts, n);
    fn(b, e);
    std::unique_lock lock(mu_);
    done_cv_.wait(lock, [this] { return pending_ == 0; });
    job_ = nullptr;
  }

 private:
  static std::pair<int64_t, int64_t> chunk(int index, int parts, int64_t n) {
    const int64_t per = n / parts;
    const int64_t rem = n % parts;
    const int64_t b = index * per + std::min<int64_t>(index, rem);
    return {b, b + per + (index < rem ? 1 : 0)};
  }

  void loop(int index) {
    uint64_t seen = 0;
    for (;;) {
      const std::function<void(int64_t, int64_t)>* job;
      int64_t n;
      {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return shutdown_ || generation_ != seen; });
        if (shutdown_) return;
        seen = generation_;
        job = job_;
        n = job_n_;
      }
      auto [b, e] = chunk(index, size(), n);
      if (b < e) (*job)(b, e);
      {
        std::unique_lock lock(mu_);
        if (--pending_ == 0) done_cv_.notify_one();
      }
    }
  }

  void stop() {
    {
      std::unique_lock lock(mu_);
      shutdown_ = true;
    }
    cv_.notify_all();
    for (auto& w : workers_) w.join();
    workers_.clear();
  }

  std::vector<std::thread> workers_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  const std::function<void(int64_t, int64_t)>* job_ = nullptr;
  int64_t job_n_ = 0;
  int pending_ = 0;
  uint64_t generation_ = 0;
  bool shutdown_ = false;
};

ThreadPool& pool() {
  static ThreadPool instance(initial_thread_count());
  return instance;
}

template <typename T>
void gemm_generic(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n,
                  bool accumulate, int64_t j_begin, int64_t j_end) {
  for (int64_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    if (!accumulate) std::fill(crow + j_begin, crow + j_end, T(0));
    const T* arow = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (int64_t j = j_begin; j < j_end; ++j) crow[j] = std::fma(av, brow[j], crow[j]);
    }
  }
}

#if defined(__AVX512F__)

constexpr int64_t kTileCols = 32;

template <int R>
void gemm_tile_f32(const float* a, const float* b, float* c, int64_t k, int64_t n,
                   int64_t lda, __mmask16 m0, __mmask16 m1, bool accumulate) {
  __m512 acc0[R];
  __m512 acc1[R];
  for (int r = 0; r < R; ++r) {
    if (accumulate) {
      acc0[r] = _mm512_maskz_loadu_ps(m0, c + r * n);
      acc1[r] = _mm512_maskz_loadu_ps(m1, c + r * n + 16);
    } else {
      acc0[r] = _mm512_setzero_ps();
      acc1[r] = _mm512_setzero_ps();
    }
  }
  for (int64_t p = 0; p < k; ++p) {
    const __m512 b0 = _mm512_maskz_loadu_ps(m0, b + p * n);
    const __m512 b1 = _mm512_maskz_loadu_ps(m1, b + p * n + 16);
    for (int r = 0; r < R; ++r) {
      const __m512 av = _mm512_set1_ps(a[r * lda + p]);
      acc0[r] = _mm512_fmadd_ps(av, b0, acc0[r]);
      acc1[r] = _mm512_fmadd_ps(av, b1, acc1[r]);
    }
  }
  for (int r = 0; r < R; ++r) {
    _mm512_mask_storeu_ps(c + r * n, m0, acc0[r]);
    _mm512_mask_storeu_ps(c + r * n + 16, m1, acc1[r]);
  }
}

void gemm_f32_cols(const float* a, const float* b, float* c, int64_t m, int64_t k,
                   int64_t n, bool accumulate, int64_t tile_begin, int64_t tile_end) {
  constexpr int kRows = 8;
  for (int64_t t = tile_begin; t < tile_end; ++t) {
    const int64_t j0 = t * kTileCols;
    const int64_t cols = std::min<int64_t>(kTileCols, n - j0);
    const __mmask16 m0 = cols >= 16 ? __mmask16(0xFFFF) : __mmask16((1u << cols) - 1);
    const __mmask16 m1 = cols >= 32   ? __mmask16(0xFFFF)
                         : cols > 16 ? __mmask16((1u << (cols - 16)) - 1)
                                     : __mmask16(0);
    int64_t i = 0;
    for (; i + kRows <= m; i += kRows) {
      gemm_tile_f32<kRows>(a + i * k, b + j0, c + i * n + j0, k, n, k, m0, m1, accumulate);
    }
    const float* ai = a + i * k;
    float* ci = c + i * n + j0;
    switch (m - i) {
      case 7: gemm_tile_f32<7>(ai, b + j0, ci, k, n, k, m0, m1, accumulate); break;
      case 6: gemm_tile_f32<6>(ai, b + j0, ci, k, n, k, m0, m1, accumulate); break;
      case 5: gemm_tile_f32<5>(ai, b + j0, ci, k, n, k, m0, m1, accumulate); break;
      case 4: gemm_tile_f32<4>(ai, b + j0, ci, k, n, k, m0, m1, accumulate); break;
      case 3: gemm_tile_f32<3>(ai, b + j0, ci, k, n, k, m0, m1, accumulate); break;
      case 2: gemm_tile_f32<2>(ai, b + j0, ci, k, n, k, m0, m1, accumulate); break;
      case 1: gemm_tile_f32<1>(ai, b + j0, ci, k, n, k, m0, m1, accumulate); break;
      default: break;
    }
  }
}

#endif

}  // namespace

int thread_count() { return pool().size(); }

void set_thread_count(int n) { pool().resize(std::max(1, n)); }

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
  if (n <= 0) return;
  pool().run(n, fn);
}

template <typename T>
void gemm(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n,
          bool accumulate) {
  if (m == 0 || n == 0) return;
#if defined(__AVX512F__)
  if constexpr (std::is_same_v<T, float>) {
    const int64_t tiles = (n + kTileCols - 1) / kTileCols;
    if (m * k * n < (int64_t{1} << 16)) {
      gemm_f32_cols(a, b, c, m, k, n, accumulate, 0, tiles);
    } else {
      parallel_for(tiles, [&](int64_t tb, int64_t te) {
        gemm_f32_cols(a, b, c, m, k, n, accumulate, tb, te);
      });
    }
    return;
  }
#endif
  gemm_generic(a, b, c, m, k, n, accumulate, 0, n);
}

template <typename T>
void transpose(const T* src, T* dst, int64_t rows, int64_t cols) {
  constexpr int64_t kBlock = 32;
  for (int64_t i0 = 0; i0 < rows; i0 += kBlock) {
    const int64_t i1 = std::min(rows, i0 + kBlock);
    for (int64_t j0 = 0; j0 < cols; j0 += kBlock) {
      const int64_t j1 = std::min(cols, j0 + kBlock);
      for (int64_t i = i0; i < i1; ++i) {
        for (int64_t j = j0; j < j1; ++j) dst[j * rows + i] = src[i * cols + j];
      }
    }
  }
}

template <typename T>
T rms_norm_row(const T* x, const T* w, T* y, int64_t dim, double eps) {
  double ss = 0.0;
  for (int64_t i = 0; i < dim; ++i) ss += double(x[i]) * double(x[i]);
  const T inv = static_cast<T>(1.0 / std::sqrt(ss / double(dim) + eps));
  for (int64_t i = 0; i < dim; ++i) y[i] = (x[i] * inv) * w[i];
  return inv;
}

template <typename T>
void softmax_row(const T* x, T* y, int64_t n) {
  if (n == 0) return;
  T mx = x[0];
  for (int64_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double sum = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    y[i] = std::exp(x[i] - mx);
    sum += double(y[i]);
  }
  const T inv = static_cast<T>(1.0 / sum);
  for (int64_t i = 0; i < n; ++i) y[i] *= inv;
}

template <typename T>
void log_softmax_row(const T* x, T* y, int64_t n) {
  if (n == 0) return;
  T mx = x[0];
  for (int64_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double sum = 0.0;
  for (int64_t i = 0; i < n; ++i) sum += std::exp(double(x[i] - mx));
  const T lse = static_cast<T>(std::log(sum));
  for (int64_t i = 0; i < n; ++i) y[i] = (x[i] - mx) - lse;
}

template <typename T>
RopeTable<T>::RopeTable(int64_t max_pos_, int64_t head_dim, double theta)
    : max_pos(max_pos_), half(head_dim / 2) {
  cos.resize(static_cast<size_t>(max_pos * half));
  sin.resize(static_cast<size_t>(max_pos * half));
  for (int64_t p = 0; p < max_pos; ++p) {
    for (int64_t i = 0; i < half; ++i) {
      const double freq = std::pow(theta, -2.0 * double(i) / double(head_dim));
      const double angle = double(p) * freq;
      cos[p * half + i] = static_cast<T>(std::cos(angle));
      sin[p * half + i] = static_cast<T>(std::sin(angle));
    }
  }
}

template <typename T>
void rope_row(T* x, int64_t n_heads, int64_t head_dim, const RopeTable<T>& table,
              int64_t pos, bool inverse) {
  const int64_t half = head_dim / 2;
  const T* c = table.cos.data() + pos * half;
  const T* s = table.sin.data() + pos * half;
  for (int64_t h = 0; h < n_heads; ++h) {
    T* v = x + h * head_dim;
    for (int64_t i = 0; i < half; ++i) {
      const T x0 = v[i];
      const T x1 = v[i + half];
      if (!inverse) {
        v[i] = x0 * c[i] - x1 * s[i];
        v[i + half] = x0 * s[i] + x1 * c[i];
      } else {
        v[i] = x0 * c[i] + x1 * s[i];
        v[i + half] = x1 * c[i] - x0 * s[i];
      }
    }
  }
}

template <typename T>
void attend_row(const T* q, const T* k, const T* v, int64_t stride, int64_t len,
                int64_t head_dim, T scale, T* probs, T* out) {
  for (int64_t p = 0; p < len; ++p) {
    const T* kp = k + p * stride;
    T dot = 0;
    for (int64_t d = 0; d < head_dim; ++d) dot = std::fma(q[d], kp[d], dot);
    probs[p] = dot * scale;
  }
  softmax_row(probs, probs, len);
  std::fill(out, out + head_dim, T(0));
  for (int64_t p = 0; p < len; ++p) {
    const T w = probs[p];
    const T* vp = v + p * stride;
    for (int64_t d = 0; d < head_dim; ++d) out[d] = std::fma(w, vp[d], out[d]);
  }
}

template <typename T>
void silu_row(const T* x, T* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = x[i] / (T(1) + std::exp(-x[i]));
}

#define BALCONY_INSTANTIATE_KERNELS(T)                                              \
  template void gemm<T>(const T*, const T*, T*, int64_t, int64_t, int64_t, bool);   \
  template void transpose<T>(const T*, T*, int64_t, int64_t);                       \
  template T rms_norm_row<T>(const T*, const T*, T*, int64_t, double);              \
  template void softmax_row<T>(const T*, T*, int64_t);                              \
  template void log_softmax_row<T>(const T*, T*, int64_t);                          \
  template struct RopeTable<T>;                                                     \
  template void rope_row<T>(T*, int64_t, int64_t, const RopeTable<T>&, int64_t,     \
                            bool);                                                  \
  template void attend_row<T>(const T*, const T*, const T*, int64_t, int64_t,       \
                              int64_t, T, T*, T*);                                  \
  template void silu_row<T>(const T*, T*, int64_t);

BALCONY_INSTANTIATE_KERNELS(float)
BALCONY_INSTANTIATE_KERNELS(double)

}  // namespace balcony::kernels
