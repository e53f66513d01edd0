// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0

#include "balcony/prune.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace balcony {

namespace {

void check_ratio(double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) {
    throw RangeError("prune ratio " + std::to_string(ratio) + " outside (0, 1]");
  }
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

}  // namespace

std::string to_string(PruneAxis axis) { return axis == PruneAxis::depth ? "depth" : "width"; }

PruneAxis parse_prune_axis(const std::string& text) {
  if (text == "depth") return PruneAxis::depth;
  if (text == "width") return PruneAxis::width;
  throw ConfigError("unknown prune axis '" + text + "'");
}

double param_ratio(const ModelConfig& base, const ModelConfig& pruned) {
  return static_cast<double>(count_params(pruned, false)) /
         static_cast<double>(count_params(base, false));
}

ModelConfig depth_prune(const ModelConfig& config, double ratio) {
  config.validate();
  check_ratio(ratio);
  ModelConfig best = config;
  double best_err = INFINITY;
  for (int64_t n = config.n_layers; n >= 1; --n) {
    ModelConfig c = config;
    c.n_layers = n;
    const double err = std::abs(param_ratio(config, c) - ratio);
    if (err < best_err) {
      best_err = err;
      best = c;
    }
  }
  return best;
}

ModelConfig width_prune(const ModelConfig& config, double ratio) {
  config.validate();
  check_ratio(ratio);
  if (ratio == 1.0) return config;
  const double D = static_cast<double>(config.d_model), hd = static_cast<double>(config.head_dim);
  const double target = ratio * static_cast<double>(count_params(config, false));
  const double per_layer = (target - D) / static_cast<double>(config.n_layers);
  ModelConfig c = config;

  // Stage 1: intermediate size only.
  const double ff = (per_layer - 4.0 * D * static_cast<double>(config.attn_width()) - 2.0 * D) / (3.0 * D);
  if (ff >= D) {
    c.d_ff = std::min(config.d_ff, static_cast<int64_t>(std::llround(ff)));
    return c;
  }
  // Stage 2: whole heads at the d_ff floor; the remainder goes back to d_ff
  // so the ratio stays on target between head counts.
  const double head_params = 4.0 * D * hd;
  const double heads = std::floor((per_layer - 3.0 * D * D - 2.0 * D) / head_params);
  c.n_heads = std::max<int64_t>(1, static_cast<int64_t>(heads));
  const double rest = (per_layer - head_params * static_cast<double>(c.n_heads) - 2.0 * D) / (3.0 * D);
  c.d_ff = std::max(config.d_model, static_cast<int64_t>(std::llround(rest)));
  const double achieved = param_ratio(config, c);
  if (achieved > ratio * 1.02) {
    throw RangeError("width ratio " + std::to_string(ratio) + " is below the floor " +
                     std::to_string(achieved) + " (1 head, d_ff == d_model)");
  }
  c.validate();
  return c;
}

ModelConfig prune(const ModelConfig& config, const PruneSpec& spec) {
  return spec.axis == PruneAxis::depth ? depth_prune(config, spec.target_ratio)
                                       : width_prune(config, spec.target_ratio);
}

const SweepRow& SweepReport::base() const {
  for (const auto& r : rows) {
    if (r.axis == "base") return r;
  }
  throw RangeError("sweep has no base row");
}

const SweepRow& SweepReport::find(PruneAxis axis, double target_ratio) const {
  for (const auto& r : rows) {
    if (r.axis == to_string(axis) && r.target_ratio == target_ratio) return r;
  }
  throw RangeError("sweep has no " + to_string(axis) + " row at ratio " + std::to_string(target_ratio));
}

std::vector<std::string> SweepReport::csv_header() const {
  return {"axis", "target_ratio", "achieved_ratio", "median_latency", "speedup_vs_base",
          "n_layers", "n_heads", "d_ff"};
}

std::vector<std::vector<std::string>> SweepReport::csv_rows() const {
  std::vector<std::vector<std::string>> out;
  for (const auto& r : rows) {
    out.push_back({r.axis, fixed(r.target_ratio, 4), fixed(r.achieved_ratio, 6),
                   fixed(r.median_latency, 6), fixed(r.speedup_vs_base, 4),
                   std::to_string(r.config.n_layers), std::to_string(r.config.n_heads),
                   std::to_string(r.config.d_ff)});
  }
  return out;
}

std::string SweepReport::gnuplot() const {
  std::ostringstream os;
  os << "# ratio depth_speedup width_speedup\n";
  std::vector<double> ratios;
  for (const auto& r : rows) {
    if (r.axis != "base" && std::find(ratios.begin(), ratios.end(), r.target_ratio) == ratios.end()) {
      ratios.push_back(r.target_ratio);
    }
  }
  os << "1.0000 1.0000 1.0000\n";
  for (double ratio : ratios) {
    os << fixed(ratio, 4);
    for (PruneAxis axis : {PruneAxis::depth, PruneAxis::width}) {
      bool found = false;
      for (const auto& r : rows) {
        if (r.axis == to_string(axis) && r.target_ratio == ratio) {
          os << ' ' << fixed(r.speedup_vs_base, 4);
          found = true;
        }
      }
      if (!found) os << " NaN";
    }
    os << '\n';
  }
  return os.str();
}

SweepReport run_sweep(const ModelConfig& base, const std::vector<double>& ratios,
                      const std::vector<PruneAxis>& axes, const LatencyParams& latency,
                      uint64_t seed) {
  if (latency.prompt_len + latency.gen_len > base.max_seq_len) {
    throw ConfigError("sweep prompt + generation length exceeds max_seq_len");
  }
  SweepReport rep;
  SweepRow b;
  b.axis = "base";
  b.config = base;
  rep.rows.push_back(b);
  for (double ratio : ratios) {
    for (PruneAxis axis : axes) {
      SweepRow r;
      r.axis = to_string(axis);
      r.target_ratio = ratio;
      r.config = prune(base, {axis, ratio});
      r.achieved_ratio = param_ratio(base, r.config);
      rep.rows.push_back(r);
    }
  }
  const BalconySet<float> none;
  std::vector<TransformerTrunk<float>> trunks;
  std::vector<InferenceEngine<float>> engines;
  trunks.reserve(rep.rows.size());
  engines.reserve(rep.rows.size());
  std::vector<LatencyTarget<float>> targets;
  for (const auto& r : rep.rows) {
    trunks.push_back(TransformerTrunk<float>::random(r.config, seed));
    engines.emplace_back(trunks.back(), none);
  }
  for (const auto& e : engines) targets.push_back({&e, BudgetSpec::full()});
  const std::vector<LatencyReport> times = measure_latencies(targets, latency);
  for (size_t i = 0; i < rep.rows.size(); ++i) {
    rep.rows[i].median_latency = times[i].median_s;
    rep.rows[i].speedup_vs_base = i == 0 ? 1.0 : times[0].median_s / times[i].median_s;
  }
  return rep;
}

}  // namespace balcony
