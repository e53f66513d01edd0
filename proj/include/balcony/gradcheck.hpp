// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "balcony/tensor.hpp"

namespace balcony {

struct GradCheckEntry {
  std::string name;
  bool frozen = false;
  int64_t elements = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  // Analytic and numeric gradients, flattened; all zeros for frozen entries.
  std::vector<double> analytic;
  std::vector<double> numeric;
};

struct GradCheckReport {
  double h = 0.0;
  double tol = 0.0;
  double max_rel_error = 0.0;
  bool passed = false;
  std::vector<GradCheckEntry> entries;
};

using NamedParams = std::vector<std::pair<std::string, Tensor<double>>>;

// Compares reverse-mode gradients of the scalar f() against central
// differences (f(x+h) - f(x-h)) / 2h, element by element. f must rebuild the
// loss from the current parameter values on every call. Parameters that do
// not require grad (frozen) are not perturbed and report zero on both sides.
// Relative error is |a - n| / max(|a|, |n|, abs_floor).
GradCheckReport finite_diff_check(const std::function<Tensor<double>()>& f,
                                  const NamedParams& params, double h, double tol,
                                  double abs_floor = 1e-6);

}  // namespace balcony
