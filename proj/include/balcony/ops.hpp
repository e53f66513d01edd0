// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable tensor operations. Each op computes its forward value
// eagerly and, if a tape is active and any input requires grad, records the
// closure that propagates gradients to those inputs.

#pragma once

#include <cstdint>
#include <span>

#include "balcony/kernels.hpp"
#include "balcony/tensor.hpp"
#include "balcony/tokens.hpp"

namespace balcony {

// a[..., m, k] x b[..., k, n]. Batch dimensions broadcast numpy-style.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// b's shape must equal a's shape or a suffix of it (broadcast over the
// leading dimensions).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

template <typename T>
Tensor<T> silu(const Tensor<T>& a);

template <typename T>
Tensor<T> sum(const Tensor<T>& a);

template <typename T>
Tensor<T> mean(const Tensor<T>& a);

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

// Numerically stable (max-subtracted) softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis);

// x / sqrt(mean(x^2) + eps) * weight over the last axis.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& weight, double eps = 1e-5);

// table[vocab, d] gathered at tokens -> [batch, seq, d].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const TokenBatch& tokens);

// Rotary positions for x[batch, seq, n_heads*head_dim]; the token at sequence
// index s sits at absolute position pos_offset + s.
template <typename T>
Tensor<T> rope(const Tensor<T>& x, int64_t n_heads, int64_t head_dim,
               const kernels::RopeTable<T>& table, int64_t pos_offset = 0);

// Causal multi-head scaled dot-product attention over [batch, seq, heads*hd].
template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           int64_t n_heads, int64_t head_dim);

// KL(softmax(teacher) || softmax(student)): summed over the last (vocabulary)
// axis, averaged over all other positions. The teacher is always treated as
// a constant; gradient flows only into the student.
template <typename T>
Tensor<T> kl_divergence(const Tensor<T>& teacher_logits, const Tensor<T>& student_logits);

// Mean next-token negative log-likelihood. `targets` holds one index per row
// of logits; rows with mask[i] == 0 are excluded. An empty mask keeps all.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int32_t> targets,
                        std::span<const uint8_t> mask = {});

}  // namespace balcony
