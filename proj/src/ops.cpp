// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0

#include "balcony/ops.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>

namespace balcony {

namespace {

template <typename T>
bool should_record(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape<T>::active() == nullptr) return false;
  for (const Tensor<T>* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
void record(const char* op, std::function<void()> fn) {
  Tape<T>::active()->record(op, std::move(fn));
}

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <typename T>
void check_finite(std::span<const T> values, const char* what) {
  for (T v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(what) + " contains a non-finite value");
  }
}

// Strides for broadcasting `shape` to `out` (right-aligned); broadcast axes
// get stride 0.
std::vector<int64_t> broadcast_strides(const Shape& shape, const Shape& out) {
  std::vector<int64_t> strides(out.size(), 0);
  int64_t stride = 1;
  const size_t offset = out.size() - shape.size();
  for (size_t i = shape.size(); i-- > 0;) {
    strides[offset + i] = shape[i] == 1 ? 0 : stride;
    stride *= shape[i];
  }
  return strides;
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.dim(-1) != b.dim(-2)) {
    throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const int64_t m = a.dim(-2);
  const int64_t k = a.dim(-1);
  const int64_t n = b.dim(-1);
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);

  Shape batch(std::max(a_batch.size(), b_batch.size()), 1);
  for (size_t i = 0; i < batch.size(); ++i) {
    const int64_t da = i + a_batch.size() >= batch.size()
                           ? a_batch[i + a_batch.size() - batch.size()]
                           : 1;
    const int64_t db = i + b_batch.size() >= batch.size()
                           ? b_batch[i + b_batch.size() - batch.size()]
                           : 1;
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("matmul batch dimensions not broadcastable: " +
                           shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    batch[i] = std::max(da, db);
  }
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);

  const bool rec = should_record({&a, &b});
  Tensor<T> out = Tensor<T>::zeros(out_shape, rec);
  const int64_t batch_count = shape_numel(batch);

  // Maps a flat output batch index to the (a, b) matrix offsets.
  const auto sa = broadcast_strides(a_batch, batch);
  const auto sb = broadcast_strides(b_batch, batch);
  auto offsets = [batch, sa, sb](int64_t flat) {
    int64_t oa = 0, ob = 0;
    for (size_t i = batch.size(); i-- > 0;) {
      const int64_t idx = flat % batch[i];
      flat /= batch[i];
      oa += idx * sa[i];
      ob += idx * sb[i];
    }
    return std::pair<int64_t, int64_t>{oa, ob};
  };

  // A 2-D right operand: all of a's batch collapses into one tall gemm.
  const bool tall = b_batch.empty() || shape_numel(b_batch) == 1;
  if (tall && shape_numel(a_batch) == batch_count) {
    kernels::gemm(a.data().data(), b.data().data(), out.mutable_data().data(),
                  batch_count * m, k, n, false);
  } else {
    for (int64_t bi = 0; bi < batch_count; ++bi) {
      auto [oa, ob] = offsets(bi);
      kernels::gemm(a.data().data() + oa * m * k, b.data().data() + ob * k * n,
                    out.mutable_data().data() + bi * m * n, m, k, n, false);
    }
  }

  if (rec) {
    NodePtr<T> an = a.node_ptr(), bn = b.node_ptr(), on = out.node_ptr();
    record<T>("matmul", [an, bn, on, m, k, n, batch_count, tall, offsets] {
      if (on->grad.empty()) return;
      const T* g = on->grad.data();
      const int64_t a_batches = static_cast<int64_t>(an->data.size()) / (m * k);
      if (tall && a_batches == batch_count) {
        const int64_t rows = batch_count * m;
        if (an->requires_grad) {
          std::vector<T> bt(static_cast<size_t>(k * n));
          kernels::transpose(bn->data.data(), bt.data(), k, n);
          auto& ga = detail::grad_for_write(*an);
          kernels::gemm(g, bt.data(), ga.data(), rows, n, k, true);
        }
        if (bn->requires_grad) {
          std::vector<T> at(static_cast<size_t>(rows * k));
          kernels::transpose(an->data.data(), at.data(), rows, k);
          auto& gb = detail::grad_for_write(*bn);
          kernels::gemm(at.data(), g, gb.data(), k, rows, n, true);
        }
        return;
      }
      std::vector<T> bt(static_cast<size_t>(k * n));
      std::vector<T> at(static_cast<size_t>(m * k));
      for (int64_t bi = 0; bi < batch_count; ++bi) {
        auto [oa, ob] = offsets(bi);
        const T* gi = g + bi * m * n;
        if (an->requires_grad) {
          kernels::transpose(bn->data.data() + ob * k * n, bt.data(), k, n);
          auto& ga = detail::grad_for_write(*an);
          kernels::gemm(gi, bt.data(), ga.data() + oa * m * k, m, n, k, true);
        }
        if (bn->requires_grad) {
          kernels::transpose(an->data.data() + oa * m * k, at.data(), m, k);
          auto& gb = detail::grad_for_write(*bn);
          kernels::gemm(at.data(), gi, gb.data() + ob * k * n, k, m, n, true);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (bs.size() > as.size() || !std::equal(bs.begin(), bs.end(), as.end() - bs.size())) {
    throw DimensionError("add shape mismatch: " + shape_str(as) + " + " + shape_str(bs));
  }
  const bool rec = should_record({&a, &b});
  Tensor<T> out = Tensor<T>::zeros(as, rec);
  const int64_t inner = b.numel();
  const int64_t outer = inner == 0 ? 0 : a.numel() / inner;
  auto ad = a.data();
  auto bd = b.data();
  auto od = out.mutable_data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t i = 0; i < inner; ++i) od[o * inner + i] = ad[o * inner + i] + bd[i];
  }
  if (rec) {
    NodePtr<T> an = a.node_ptr(), bn = b.node_ptr(), on = out.node_ptr();
    record<T>("add", [an, bn, on, inner, outer] {
      if (on->grad.empty()) return;
      const auto& g = on->grad;
      if (an->requires_grad) {
        auto& ga = detail::grad_for_write(*an);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bn->requires_grad) {
        auto& gb = detail::grad_for_write(*bn);
        for (int64_t o = 0; o < outer; ++o) {
          for (int64_t i = 0; i < inner; ++i) gb[i] += g[o * inner + i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul shape mismatch: " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()));
  }
  const bool rec = should_record({&a, &b});
  Tensor<T> out = Tensor<T>::zeros(a.shape(), rec);
  auto ad = a.data();
  auto bd = b.data();
  auto od = out.mutable_data();
  for (int64_t i = 0; i < a.numel(); ++i) od[i] = ad[i] * bd[i];
  if (rec) {
    NodePtr<T> an = a.node_ptr(), bn = b.node_ptr(), on = out.node_ptr();
    record<T>("mul", [an, bn, on] {
      if (on->grad.empty()) return;
      const auto& g = on->grad;
      if (an->requires_grad) {
        auto& ga = detail::grad_for_write(*an);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        auto& gb = detail::grad_for_write(*bn);
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->data[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  const bool rec = should_record({&a});
  Tensor<T> out = Tensor<T>::zeros(a.shape(), rec);
  auto ad = a.data();
  auto od = out.mutable_data();
  for (int64_t i = 0; i < a.numel(); ++i) od[i] = ad[i] * factor;
  if (rec) {
    NodePtr<T> an = a.node_ptr(), on = out.node_ptr();
    record<T>("scale", [an, on, factor] {
      if (on->grad.empty()) return;
      auto& ga = detail::grad_for_write(*an);
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += on->grad[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  const bool rec = should_record({&a});
  Tensor<T> out = Tensor<T>::zeros(a.shape(), rec);
  kernels::silu_row(a.data().data(), out.mutable_data().data(), a.numel());
  if (rec) {
    NodePtr<T> an = a.node_ptr(), on = out.node_ptr();
    record<T>("silu", [an, on] {
      if (on->grad.empty()) return;
      auto& ga = detail::grad_for_write(*an);
      for (size_t i = 0; i < ga.size(); ++i) {
        const T x = an->data[i];
        const T sig = T(1) / (T(1) + std::exp(-x));
        ga[i] += on->grad[i] * sig * (T(1) + x * (T(1) - sig));
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  const bool rec = should_record({&a});
  T total = 0;
  for (T v : a.data()) total += v;
  Tensor<T> out = Tensor<T>::scalar(total, rec);
  if (rec) {
    NodePtr<T> an = a.node_ptr(), on = out.node_ptr();
    record<T>("sum", [an, on] {
      if (on->grad.empty()) return;
      auto& ga = detail::grad_for_write(*an);
      const T g = on->grad[0];
      for (auto& v : ga) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  const bool rec = should_record({&a});
  Tensor<T> out = Tensor<T>::from(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()), rec);
  if (rec) {
    NodePtr<T> an = a.node_ptr(), on = out.node_ptr();
    record<T>("reshape", [an, on] {
      if (on->grad.empty()) return;
      auto& ga = detail::grad_for_write(*an);
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += on->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const int r = x.rank();
  const int ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) {
    throw DimensionError("softmax axis " + std::to_string(axis) + " invalid for shape " +
                         shape_str(x.shape()));
  }
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= x.shape()[i];
  for (int i = ax + 1; i < r; ++i) inner *= x.shape()[i];
  const int64_t len = x.shape()[ax];

  const bool rec = should_record({&x});
  Tensor<T> out = Tensor<T>::zeros(x.shape(), rec);
  std::vector<T> in_row(static_cast<size_t>(len)), out_row(static_cast<size_t>(len));
  auto xd = x.data();
  auto od = out.mutable_data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t i = 0; i < inner; ++i) {
      const int64_t base = o * len * inner + i;
      for (int64_t l = 0; l < len; ++l) in_row[l] = xd[base + l * inner];
      kernels::softmax_row(in_row.data(), out_row.data(), len);
      for (int64_t l = 0; l < len; ++l) od[base + l * inner] = out_row[l];
    }
  }
  if (rec) {
    NodePtr<T> xn = x.node_ptr(), on = out.node_ptr();
    record<T>("softmax", [xn, on, outer, inner, len] {
      if (on->grad.empty()) return;
      auto& gx = detail::grad_for_write(*xn);
      const auto& y = on->data;
      const auto& g = on->grad;
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t i = 0; i < inner; ++i) {
          const int64_t base = o * len * inner + i;
          T dot = 0;
          for (int64_t l = 0; l < len; ++l) dot += g[base + l * inner] * y[base + l * inner];
          for (int64_t l = 0; l < len; ++l) {
            const int64_t idx = base + l * inner;
            gx[idx] += y[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& weight, double eps) {
  if (x.rank() < 1 || weight.rank() != 1 || weight.dim(0) != x.dim(-1)) {
    throw DimensionError("rms_norm shape mismatch: x " + shape_str(x.shape()) + ", weight " +
                         shape_str(weight.shape()));
  }
  if (!(eps >= 0.0)) throw NumericError("rms_norm eps must be non-negative");
  const int64_t dim = x.dim(-1);
  const int64_t rows = dim == 0 ? 0 : x.numel() / dim;
  const bool rec = should_record({&x, &weight});
  Tensor<T> out = Tensor<T>::zeros(x.shape(), rec);
  std::vector<T> inv(static_cast<size_t>(rows));
  const T* xd = x.data().data();
  const T* wd = weight.data().data();
  T* od = out.mutable_data().data();
  for (int64_t r = 0; r < rows; ++r) {
    inv[r] = kernels::rms_norm_row(xd + r * dim, wd, od + r * dim, dim, eps);
  }
  if (rec) {
    NodePtr<T> xn = x.node_ptr(), wn = weight.node_ptr(), on = out.node_ptr();
    record<T>("rms_norm", [xn, wn, on, inv = std::move(inv), rows, dim] {
      if (on->grad.empty()) return;
      const auto& g = on->grad;
      const auto& xv = xn->data;
      const auto& w = wn->data;
      if (xn->requires_grad) {
        auto& gx = detail::grad_for_write(*xn);
        for (int64_t r = 0; r < rows; ++r) {
          const T* xr = xv.data() + r * dim;
          const T* gr = g.data() + r * dim;
          T dot = 0;
          for (int64_t i = 0; i < dim; ++i) dot += gr[i] * w[i] * xr[i];
          const T ir = inv[r];
          const T coef = ir * ir * ir * dot / static_cast<T>(dim);
          T* out_r = gx.data() + r * dim;
          for (int64_t i = 0; i < dim; ++i) out_r[i] += ir * gr[i] * w[i] - coef * xr[i];
        }
      }
      if (wn->requires_grad) {
        auto& gw = detail::grad_for_write(*wn);
        for (int64_t r = 0; r < rows; ++r) {
          const T* xr = xv.data() + r * dim;
          const T* gr = g.data() + r * dim;
          for (int64_t i = 0; i < dim; ++i) gw[i] += gr[i] * xr[i] * inv[r];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const TokenBatch& tokens) {
  if (table.rank() != 2) {
    throw DimensionError("embedding table must be 2-D, got " + shape_str(table.shape()));
  }
  const int64_t vocab = table.dim(0);
  const int64_t d = table.dim(1);
  for (int32_t id : tokens.ids) {
    if (id < 0 || id >= vocab) {
      throw RangeError("token id " + std::to_string(id) + " outside vocabulary of size " +
                       std::to_string(vocab));
    }
  }
  const bool rec = should_record({&table});
  Tensor<T> out = Tensor<T>::zeros({tokens.batch, tokens.seq, d}, rec);
  T* od = out.mutable_data().data();
  const T* td = table.data().data();
  for (int64_t i = 0; i < tokens.size(); ++i) {
    std::copy_n(td + tokens.ids[i] * d, d, od + i * d);
  }
  if (rec) {
    NodePtr<T> tn = table.node_ptr(), on = out.node_ptr();
    record<T>("embedding", [tn, on, ids = tokens.ids, d] {
      if (on->grad.empty()) return;
      auto& gt = detail::grad_for_write(*tn);
      for (size_t i = 0; i < ids.size(); ++i) {
        T* row = gt.data() + ids[i] * d;
        const T* gr = on->grad.data() + i * d;
        for (int64_t j = 0; j < d; ++j) row[j] += gr[j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> rope(const Tensor<T>& x, int64_t n_heads, int64_t head_dim,
               const kernels::RopeTable<T>& table, int64_t pos_offset) {
  if (x.rank() != 3 || x.dim(2) != n_heads * head_dim || head_dim % 2 != 0) {
    throw DimensionError("rope expects [batch, seq, " + std::to_string(n_heads * head_dim) +
                         "] with even head_dim, got " + shape_str(x.shape()));
  }
  const int64_t batch = x.dim(0), seq = x.dim(1), width = x.dim(2);
  if (pos_offset + seq > table.max_pos) {
    throw RangeError("rope position " + std::to_string(pos_offset + seq - 1) +
                     " exceeds table of " + std::to_string(table.max_pos));
  }
  const bool rec = should_record({&x});
  Tensor<T> out = Tensor<T>::from(x.shape(), std::vector<T>(x.data().begin(), x.data().end()), rec);
  T* od = out.mutable_data().data();
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t s = 0; s < seq; ++s) {
      kernels::rope_row(od + (b * seq + s) * width, n_heads, head_dim, table, pos_offset + s,
                        false);
    }
  }
  if (rec) {
    NodePtr<T> xn = x.node_ptr(), on = out.node_ptr();
    record<T>("rope", [xn, on, &table, n_heads, head_dim, batch, seq, width, pos_offset] {
      if (on->grad.empty()) return;
      std::vector<T> g = on->grad;
      for (int64_t b = 0; b < batch; ++b) {
        for (int64_t s = 0; s < seq; ++s) {
          kernels::rope_row(g.data() + (b * seq + s) * width, n_heads, head_dim, table,
                            pos_offset + s, true);
        }
      }
      auto& gx = detail::grad_for_write(*xn);
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           int64_t n_heads, int64_t head_dim) {
  if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape() ||
      q.dim(2) != n_heads * head_dim) {
    throw DimensionError("causal_attention shape mismatch: q " + shape_str(q.shape()) + ", k " +
                         shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  }
  const int64_t batch = q.dim(0), seq = q.dim(1), width = q.dim(2);
  const T scale_factor = static_cast<T>(1.0 / std::sqrt(double(head_dim)));
  const bool rec = should_record({&q, &k, &v});
  Tensor<T> out = Tensor<T>::zeros(q.shape(), rec);
  // probs[b, h, t, 0..t]
  std::vector<T> probs(static_cast<size_t>(rec ? batch * n_heads * seq * seq : seq));
  const T* qd = q.data().data();
  const T* kd = k.data().data();
  const T* vd = v.data().data();
  T* od = out.mutable_data().data();
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t h = 0; h < n_heads; ++h) {
      const T* kb = kd + b * seq * width + h * head_dim;
      const T* vb = vd + b * seq * width + h * head_dim;
      for (int64_t t = 0; t < seq; ++t) {
        T* pr = rec ? probs.data() + ((b * n_heads + h) * seq + t) * seq : probs.data();
        const int64_t row = (b * seq + t) * width + h * head_dim;
        kernels::attend_row(qd + row, kb, vb, width, t + 1, head_dim, scale_factor, pr, od + row);
      }
    }
  }
  if (rec) {
    NodePtr<T> qn = q.node_ptr(), kn = k.node_ptr(), vn = v.node_ptr(), on = out.node_ptr();
    record<T>("causal_attention", [qn, kn, vn, on, probs = std::move(probs), batch, seq,
                                   width, n_heads, head_dim, scale_factor] {
      if (on->grad.empty()) return;
      std::vector<T> gq(qn->data.size(), T(0)), gk(kn->data.size(), T(0)),
          gv(vn->data.size(), T(0));
      std::vector<T> dp(static_cast<size_t>(seq));
      const T* g = on->grad.data();
      for (int64_t b = 0; b < batch; ++b) {
        for (int64_t h = 0; h < n_heads; ++h) {
          const int64_t head_base = b * seq * width + h * head_dim;
          for (int64_t t = 0; t < seq; ++t) {
            const T* pr = probs.data() + ((b * n_heads + h) * seq + t) * seq;
            const int64_t row = head_base + t * width;
            const T* gt = g + row;
            T weighted = 0;
            for (int64_t s = 0; s <= t; ++s) {
              const T* vs = vn->data.data() + head_base + s * width;
              T dot = 0;
              for (int64_t d = 0; d < head_dim; ++d) dot += gt[d] * vs[d];
              dp[s] = dot;
              weighted += pr[s] * dot;
              T* gvs = gv.data() + head_base + s * width;
              for (int64_t d = 0; d < head_dim; ++d) gvs[d] += pr[s] * gt[d];
            }
            const T* qt = qn->data.data() + row;
            T* gqt = gq.data() + row;
            for (int64_t s = 0; s <= t; ++s) {
              const T ds = pr[s] * (dp[s] - weighted) * scale_factor;
              const T* ks = kn->data.data() + head_base + s * width;
              T* gks = gk.data() + head_base + s * width;
              for (int64_t d = 0; d < head_dim; ++d) {
                gqt[d] += ds * ks[d];
                gks[d] += ds * qt[d];
              }
            }
          }
        }
      }
      auto flush = [](TensorNode<T>& node, const std::vector<T>& src) {
        if (!node.requires_grad) return;
        auto& dst = detail::grad_for_write(node);
        for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      };
      flush(*qn, gq);
      flush(*kn, gk);
      flush(*vn, gv);
    });
  }
  return out;
}

template <typename T>
Tensor<T> kl_divergence(const Tensor<T>& teacher_logits, const Tensor<T>& student_logits) {
  if (teacher_logits.shape() != student_logits.shape() || teacher_logits.rank() < 1) {
    throw DimensionError("kl_divergence shape mismatch: teacher " +
                         shape_str(teacher_logits.shape()) + ", student " +
                         shape_str(student_logits.shape()));
  }
  check_finite(teacher_logits.data(), "teacher logits");
  check_finite(student_logits.data(), "student logits");
  const int64_t vocab = student_logits.dim(-1);
  const int64_t rows = vocab == 0 ? 0 : student_logits.numel() / vocab;
  if (rows == 0) throw DimensionError("kl_divergence of an empty tensor");

  std::vector<T> lt(static_cast<size_t>(vocab)), ls(static_cast<size_t>(vocab));
  const T* td = teacher_logits.data().data();
  const T* sd = student_logits.data().data();
  double total = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    kernels::log_softmax_row(td + r * vocab, lt.data(), vocab);
    kernels::log_softmax_row(sd + r * vocab, ls.data(), vocab);
    double row = 0.0;
    for (int64_t i = 0; i < vocab; ++i) {
      row += double(std::exp(lt[i])) * double(lt[i] - ls[i]);
    }
    // Gibbs: only rounding can push a row below zero.
    total += std::max(row, 0.0);
  }
  const bool rec = should_record({&student_logits});
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / double(rows)), rec);
  if (rec) {
    NodePtr<T> tn = teacher_logits.node_ptr(), sn = student_logits.node_ptr(),
               on = out.node_ptr();
    record<T>("kl_divergence", [tn, sn, on, rows, vocab] {
      if (on->grad.empty()) return;
      const T g = on->grad[0] / static_cast<T>(rows);
      auto& gs = detail::grad_for_write(*sn);
      std::vector<T> pt(static_cast<size_t>(vocab)), ps(static_cast<size_t>(vocab));
      for (int64_t r = 0; r < rows; ++r) {
        kernels::softmax_row(tn->data.data() + r * vocab, pt.data(), vocab);
        kernels::softmax_row(sn->data.data() + r * vocab, ps.data(), vocab);
        T* gr = gs.data() + r * vocab;
        for (int64_t i = 0; i < vocab; ++i) gr[i] += g * (ps[i] - pt[i]);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int32_t> targets,
                        std::span<const uint8_t> mask) {
  if (logits.rank() < 1) throw DimensionError("cross_entropy needs logits with a vocab axis");
  const int64_t vocab = logits.dim(-1);
  const int64_t rows = vocab == 0 ? 0 : logits.numel() / vocab;
  if (static_cast<int64_t>(targets.size()) != rows ||
      (!mask.empty() && static_cast<int64_t>(mask.size()) != rows)) {
    throw DimensionError("cross_entropy: " + std::to_string(rows) + " logit rows but " +
                         std::to_string(targets.size()) + " targets");
  }
  for (int32_t t : targets) {
    if (t < 0 || t >= vocab) {
      throw RangeError("target index " + std::to_string(t) + " outside vocabulary of size " +
                       std::to_string(vocab));
    }
  }
  check_finite(logits.data(), "logits");
  std::vector<T> ls(static_cast<size_t>(vocab));
  const T* ld = logits.data().data();
  double total = 0.0;
  int64_t count = 0;
  for (int64_t r = 0; r < rows; ++r) {
    if (!mask.empty() && mask[r] == 0) continue;
    kernels::log_softmax_row(ld + r * vocab, ls.data(), vocab);
    total -= double(ls[targets[r]]);
    ++count;
  }
  const bool rec = should_record({&logits});
  Tensor<T> out = Tensor<T>::scalar(count ? static_cast<T>(total / double(count)) : T(0), rec);
  if (rec && count > 0) {
    NodePtr<T> ln = logits.node_ptr(), on = out.node_ptr();
    std::vector<int32_t> tgt(targets.begin(), targets.end());
    std::vector<uint8_t> msk(mask.begin(), mask.end());
    record<T>("cross_entropy", [ln, on, tgt = std::move(tgt), msk = std::move(msk), rows, vocab,
                                count] {
      if (on->grad.empty()) return;
      const T g = on->grad[0] / static_cast<T>(count);
      auto& gl = detail::grad_for_write(*ln);
      std::vector<T> p(static_cast<size_t>(vocab));
      for (int64_t r = 0; r < rows; ++r) {
        if (!msk.empty() && msk[r] == 0) continue;
        kernels::softmax_row(ln->data.data() + r * vocab, p.data(), vocab);
        T* gr = gl.data() + r * vocab;
        for (int64_t i = 0; i < vocab; ++i) gr[i] += g * p[i];
        gr[tgt[r]] -= g;
      }
    });
  }
  return out;
}

#define BALCONY_INSTANTIATE_OPS(T)                                                         \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> scale(const Tensor<T>&, T);                                           \
  template Tensor<T> silu(const Tensor<T>&);                                               \
  template Tensor<T> sum(const Tensor<T>&);                                                \
  template Tensor<T> mean(const Tensor<T>&);                                               \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                     \
  template Tensor<T> softmax(const Tensor<T>&, int);                                       \
  template Tensor<T> rms_norm(const Tensor<T>&, const Tensor<T>&, double);                 \
  template Tensor<T> embedding(const Tensor<T>&, const TokenBatch&);                       \
  template Tensor<T> rope(const Tensor<T>&, int64_t, int64_t, const kernels::RopeTable<T>&, \
                          int64_t);                                                        \
  template Tensor<T> causal_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                      int64_t, int64_t);                                   \
  template Tensor<T> kl_divergence(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int32_t>,             \
                                   std::span<const uint8_t>);

BALCONY_INSTANTIATE_OPS(float)
BALCONY_INSTANTIATE_OPS(double)

}  // namespace balcony
