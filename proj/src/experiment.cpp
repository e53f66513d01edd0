// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0

#include "balcony/experiment.hpp"

#include "balcony/checkpoint.hpp"

namespace balcony {

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::standard: return "standard";
    case Ablation::random_init: return "random_init";
    case Ablation::mlp_only: return "mlp_only";
    case Ablation::attn_only: return "attn_only";
    case Ablation::kl_plus_ce: return "kl_plus_ce";
    case Ablation::unfrozen: return "unfrozen";
    case Ablation::sorted: return "sorted";
  }
  return "unknown";
}

Ablation parse_ablation(const std::string& name) {
  for (Ablation a : {Ablation::standard, Ablation::random_init, Ablation::mlp_only, Ablation::attn_only,
                     Ablation::kl_plus_ce, Ablation::unfrozen, Ablation::sorted}) {
    if (to_string(a) == name) return a;
  }
  throw ConfigError("unknown variant '" + name +
                    "' (standard, random_init, mlp_only, attn_only, kl_plus_ce, unfrozen, sorted)");
}

TokenBatch probe_batch(const SyntheticCorpus& corpus, int64_t count, int64_t seq) {
  const std::string& text = corpus.heldout();
  if (static_cast<int64_t>(text.size()) < count * seq) throw ConfigError("held-out text too short for probe");
  TokenBatch probe(count, seq);
  const int64_t stride = static_cast<int64_t>(text.size()) / count;
  for (int64_t b = 0; b < count; ++b) {
    for (int64_t s = 0; s < seq; ++s) probe.at(b, s) = static_cast<unsigned char>(text[b * stride + s]);
  }
  return probe;
}

template <typename T>
uint64_t logits_hash(const TransformerTrunk<T>& trunk, const TokenBatch& probe) {
  NoGradScope<T> no_grad;
  return tensor_hash(trunk.forward_full(probe));
}

DistillRun distill(const TrainConfig& cfg, TransformerTrunk<float>& trunk, BalconySet<float>& balconies,
                   const SyntheticCorpus& corpus, const std::vector<LmBatch>& heldout,
                   const TokenBatch& probe) {
  if (cfg.loss_mode != LossMode::kl_only && cfg.loss_mode != LossMode::kl_plus_ce) {
    throw ConfigError("distillation needs loss_mode kl_only or kl_plus_ce");
  }
  DistillRun run;
  run.probe_before = logits_hash(trunk, probe);
  run.report = train(cfg, trunk, balconies, corpus, heldout);
  run.probe_after = logits_hash(trunk, probe);
  if (cfg.freeze_trunk && !run.frozen_ok()) {
    throw FreezeViolation("full-model probe logits changed during frozen-trunk distillation");
  }
  return run;
}

AblationResult run_ablation(Ablation variant, const TransformerTrunk<float>& pretrained,
                            const ExitPointSet& exits, const TrainConfig& base,
                            const SyntheticCorpus& corpus, const std::vector<LmBatch>& heldout,
                            const TokenBatch& probe) {
  TransformerTrunk<float> trunk = pretrained.clone();
  TrainConfig cfg = base;
  cfg.loss_mode = LossMode::kl_only;
  cfg.freeze_trunk = true;
  InitMode init = InitMode::from_last_layer;
  BalconyVariant body = BalconyVariant::decoder;
  switch (variant) {
    case Ablation::standard: break;
    case Ablation::random_init: init = InitMode::random; break;
    case Ablation::mlp_only: body = BalconyVariant::mlp_only; break;
    case Ablation::attn_only: body = BalconyVariant::attn_only; break;
    case Ablation::kl_plus_ce: cfg.loss_mode = LossMode::kl_plus_ce; break;
    case Ablation::unfrozen: cfg.freeze_trunk = false; break;
    case Ablation::sorted:
      cfg.loss_mode = LossMode::sorted_avg;
      cfg.freeze_trunk = false;
      break;
  }
  AblationResult out;
  out.variant = variant;
  BalconySet<float> set;
  if (variant != Ablation::sorted) {
    set = BalconySet<float>(attach_balconies(trunk, exits, init, body, mix_seed(base.seed, 77)));
    out.balcony_params = set.modules().begin()->second.param_count();
  }
  const uint64_t before = logits_hash(trunk, probe);
  TrainReport report;
  if (variant == Ablation::sorted) {
    report = train(cfg, trunk, set, corpus, heldout, exits);
  } else {
    report = distill(cfg, trunk, set, corpus, heldout, probe).report;
  }
  out.initial = report.initial();
  out.final = report.final();
  out.probe_changed = logits_hash(trunk, probe) != before;
  out.wall_seconds = report.wall_seconds;
  return out;
}

template uint64_t logits_hash(const TransformerTrunk<float>&, const TokenBatch&);
template uint64_t logits_hash(const TransformerTrunk<double>&, const TokenBatch&);

}  // namespace balcony
