// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0

#include "balcony/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace balcony {

GradCheckReport finite_diff_check(const std::function<Tensor<double>()>& f,
                                  const NamedParams& params, double h, double tol,
                                  double abs_floor) {
  GradCheckReport report;
  report.h = h;
  report.tol = tol;

  for (const auto& [name, p] : params) p.node().grad.clear();
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> loss = f();
    if (loss.requires_grad()) tape.backward(loss);
  }

  for (const auto& [name, param] : params) {
    GradCheckEntry entry;
    entry.name = name;
    entry.frozen = !param.requires_grad();
    entry.elements = param.numel();
    entry.analytic.assign(static_cast<size_t>(param.numel()), 0.0);
    entry.numeric.assign(static_cast<size_t>(param.numel()), 0.0);
    if (!entry.frozen) {
      if (param.has_grad()) {
        std::copy(param.grad().begin(), param.grad().end(), entry.analytic.begin());
      }
      Tensor<double> p = param;
      auto values = p.mutable_data();
      NoGradScope<double> no_grad;
      for (int64_t i = 0; i < param.numel(); ++i) {
        const double saved = values[i];
        values[i] = saved + h;
        const double up = f().item();
        values[i] = saved - h;
        const double down = f().item();
        values[i] = saved;
        const double num = (up - down) / (2.0 * h);
        const double ana = entry.analytic[i];
        entry.numeric[i] = num;
        const double abs_err = std::abs(ana - num);
        const double denom = std::max({std::abs(ana), std::abs(num), abs_floor});
        entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
        entry.max_rel_error = std::max(entry.max_rel_error, abs_err / denom);
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

}  // namespace balcony
