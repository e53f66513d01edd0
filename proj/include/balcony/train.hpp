// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training: frozen-trunk KL self-distillation of balconies and its ablations
// (KL+CE, unfrozen trunk, joint from-scratch pretraining, sorted baseline),
// with AdamW, global-norm clipping and cosine/trapezoidal schedules.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "balcony/balcony.hpp"
#include "balcony/corpus.hpp"

namespace balcony {

enum class LossMode { kl_only, kl_plus_ce, ce_joint_avg, sorted_avg };
enum class Schedule { cosine, trapezoidal };

std::string to_string(LossMode mode);
std::string to_string(Schedule schedule);
LossMode parse_loss_mode(const std::string& name);
Schedule parse_schedule(const std::string& name);

struct TrainConfig {
  LossMode loss_mode = LossMode::kl_only;
  double kl_weight = 0.001;
  bool freeze_trunk = true;
  double lr_max = 5e-4;
  Schedule schedule = Schedule::cosine;
  double warmup_frac = 0.05;
  double decay_frac = 0.2;
  int64_t batch_size = 8;
  int64_t seq_len = 64;
  int64_t steps = 500;
  uint64_t seed = 0;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;
  // Held-out evaluation cadence in steps; 0 evaluates only before and after.
  int64_t eval_every = 0;

  void validate() const;
  std::vector<std::pair<std::string, std::string>> to_kv() const;
  static TrainConfig from_kv(const std::map<std::string, std::string>& kv);
};

// Learning rate for update `step` of `total_steps` (0 <= step <= total).
double lr_at(int64_t step, Schedule schedule, double lr_max, int64_t total_steps,
             double warmup_frac = 0.05, double decay_frac = 0.2);

// Decoupled weight decay Adam. Decay applies to matrices only.
template <typename T>
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;
  };

  AdamW(NamedTensors<T> params, Options options);

  // Applies one update from the current grads; params without grad are skipped.
  void step(double lr);
  void zero_grad();
  int64_t step_count() const { return t_; }

  const NamedTensors<T>& params() const { return params_; }
  // First and second moments, named "<path>.m" / "<path>.v".
  NamedTensors<T> state() const;
  void load_state(const NamedTensors<T>& state, int64_t step_count);

 private:
  NamedTensors<T> params_;
  Options options_;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
  int64_t t_ = 0;
};

// Scales grads so their global L2 norm is at most max_norm; returns the norm
// before clipping.
template <typename T>
double clip_grad_norm(const NamedTensors<T>& params, double max_norm);

// Losses from one step, keyed by exit layer (n_layers for the full model).
struct StepLosses {
  std::map<int, double> per_exit;
  double total = 0.0;
};

// Frozen-trunk distillation step: one untaped trunk pass yields the teacher
// logits and every X_j; loss = sum_j w_j KL(teacher || student_j). Exits with
// weight 0 are dropped. Grads land only in the balconies; any trunk grad
// raises FreezeViolation.
template <typename T>
StepLosses distill_step(const TransformerTrunk<T>& trunk, BalconySet<T>& balconies,
                        const TokenBatch& batch, const std::map<int, double>& exit_weights = {});

// loss_j = kl_weight * KL_j + CE_j on the same batch.
template <typename T>
StepLosses distill_step_with_ce(const TransformerTrunk<T>& trunk, BalconySet<T>& balconies,
                                const LmBatch& batch, double kl_weight);

// Unfrozen ablation: sum_j KL with a detached teacher, grads reach the trunk.
template <typename T>
StepLosses distill_step_unfrozen(TransformerTrunk<T>& trunk, BalconySet<T>& balconies,
                                 const TokenBatch& batch);

// Mean CE over the full model and every balcony submodel; all params train.
template <typename T>
StepLosses joint_pretrain_step(TransformerTrunk<T>& trunk, BalconySet<T>& balconies,
                               const LmBatch& batch);

// Mean CE over the full model and final_norm + head read at each exit.
template <typename T>
StepLosses sorted_baseline_step(TransformerTrunk<T>& trunk, const ExitPointSet& exits,
                                const LmBatch& batch);

// Throws FreezeViolation naming the first trunk tensor holding a grad.
template <typename T>
void check_trunk_untouched(const TransformerTrunk<T>& trunk);

struct EvalMetrics {
  std::map<int, double> kl;  // per exit, vs the current full model
  std::map<int, double> ce;  // per exit
  double full_ce = 0.0;

  double mean_kl() const;
  double mean_ce() const;
  // Mean CE over exits and the full model.
  double mean_ce_with_full() const;
};

// Balcony exits are read through their modules, `direct_exits` through the
// trunk's final_norm + head (sorted baseline).
template <typename T>
EvalMetrics evaluate(const TransformerTrunk<T>& trunk, const BalconySet<T>& balconies,
                     const std::vector<LmBatch>& batches, const ExitPointSet& direct_exits = {});

struct LossRecord {
  int64_t step = 0;
  int exit_layer = 0;
  double loss = 0.0;
  double lr = 0.0;
  int64_t tokens = 0;
};

struct EvalPoint {
  int64_t step = 0;
  EvalMetrics metrics;
};

struct TrainReport {
  std::vector<LossRecord> losses;
  std::vector<EvalPoint> evals;
  double wall_seconds = 0.0;
  int64_t tokens = 0;

  const EvalMetrics& initial() const;
  const EvalMetrics& final() const;
  // Training loss trace for one exit, in step order.
  std::vector<double> loss_series(int exit_layer) const;
};

// Runs cfg.steps updates under cfg.loss_mode. Parameter trainability is set
// from the mode: kl modes train balconies (and the trunk when
// freeze_trunk == false), ce_joint_avg trains everything, sorted_avg trains
// the trunk. `sorted_exits` is used only by sorted_avg.
template <typename T>
TrainReport train(const TrainConfig& cfg, TransformerTrunk<T>& trunk, BalconySet<T>& balconies,
                  const SyntheticCorpus& corpus, const std::vector<LmBatch>& heldout,
                  const ExitPointSet& sorted_exits = {});

}  // namespace balcony
