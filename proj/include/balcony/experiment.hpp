// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment drivers shared by the command-line tool and the end-to-end
// tests: balcony distillation with a freeze check, and ablation variants.

#pragma once

#include <string>
#include <vector>

#include "balcony/corpus.hpp"
#include "balcony/train.hpp"

namespace balcony {

enum class Ablation { standard, random_init, mlp_only, attn_only, kl_plus_ce, unfrozen, sorted };

std::string to_string(Ablation a);
// Accepts the names above; throws ConfigError otherwise.
Ablation parse_ablation(const std::string& name);

// A fixed [count, seq] batch of held-out text used to fingerprint the full
// model.
TokenBatch probe_batch(const SyntheticCorpus& corpus, int64_t count = 32, int64_t seq = 64);

template <typename T>
uint64_t logits_hash(const TransformerTrunk<T>& trunk, const TokenBatch& probe);

struct DistillRun {
  TrainReport report;
  uint64_t probe_before = 0;
  uint64_t probe_after = 0;
  bool frozen_ok() const { return probe_before == probe_after; }
};

// Distills `balconies` against `trunk` under `cfg` (kl modes only) and
// fingerprints forward_full on `probe` before and after. Throws
// FreezeViolation when the fingerprints differ and `cfg.freeze_trunk` holds.
DistillRun distill(const TrainConfig& cfg, TransformerTrunk<float>& trunk, BalconySet<float>& balconies,
                   const SyntheticCorpus& corpus, const std::vector<LmBatch>& heldout,
                   const TokenBatch& probe);

struct AblationResult {
  Ablation variant = Ablation::standard;
  EvalMetrics initial;
  EvalMetrics final;
  int64_t balcony_params = 0;  // per exit, 0 for sorted
  bool probe_changed = false;
  double wall_seconds = 0.0;
};

// Runs one variant from a copy of `pretrained`. `base` supplies steps,
// batch, lr and seed; the variant overrides init, body, loss mode and
// freezing. Balcony init seeds derive from base.seed.
AblationResult run_ablation(Ablation variant, const TransformerTrunk<float>& pretrained,
                            const ExitPointSet& exits, const TrainConfig& base,
                            const SyntheticCorpus& corpus, const std::vector<LmBatch>& heldout,
                            const TokenBatch& probe);

}  // namespace balcony
