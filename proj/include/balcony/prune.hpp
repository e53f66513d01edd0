// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0
//
// Structured depth and width pruning of a model config, and the latency sweep
// comparing the two axes at matched non-embedding parameter ratios.

#pragma once

#include <string>
#include <vector>

#include "balcony/inference.hpp"

namespace balcony {

enum class PruneAxis { depth, width };

std::string to_string(PruneAxis axis);
PruneAxis parse_prune_axis(const std::string& text);

struct PruneSpec {
  PruneAxis axis = PruneAxis::depth;
  double target_ratio = 1.0;
};

// Non-embedding params of `pruned` over those of `base`.
double param_ratio(const ModelConfig& base, const ModelConfig& pruned);

// Layer count whose ratio is nearest the target (ties keep more layers).
// Throws RangeError when the target is outside (0, 1].
ModelConfig depth_prune(const ModelConfig& config, double ratio);

// Shrinks d_ff toward d_model first, then removes whole heads at fixed
// head_dim. Throws RangeError when the target lies more than 2% below the
// single-head, d_ff == d_model floor.
ModelConfig width_prune(const ModelConfig& config, double ratio);

ModelConfig prune(const ModelConfig& config, const PruneSpec& spec);

struct SweepRow {
  std::string axis;  // "base", "depth" or "width"
  double target_ratio = 1.0;
  double achieved_ratio = 1.0;
  double median_latency = 0.0;
  double speedup_vs_base = 1.0;
  ModelConfig config;
};

struct SweepReport {
  std::vector<SweepRow> rows;

  const SweepRow& base() const;
  // Row for (axis, target ratio); throws RangeError when absent.
  const SweepRow& find(PruneAxis axis, double target_ratio) const;

  std::vector<std::string> csv_header() const;
  std::vector<std::vector<std::string>> csv_rows() const;
  // Columns: ratio, depth speedup, width speedup; one line per ratio.
  std::string gnuplot() const;
};

// Base row first, then for each ratio the requested axes in order. Weights
// are random; only the architecture matters for latency.
SweepReport run_sweep(const ModelConfig& base, const std::vector<double>& ratios,
                      const std::vector<PruneAxis>& axes, const LatencyParams& latency,
                      uint64_t seed = 0);

}  // namespace balcony
