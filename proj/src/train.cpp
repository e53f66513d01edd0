// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0

#include "balcony/train.hpp"

#include <chrono>
#include <cmath>
#include <numbers>
#include <sstream>

namespace balcony {

std::string to_string(LossMode mode) {
  switch (mode) {
    case LossMode::kl_only: return "kl_only";
    case LossMode::kl_plus_ce: return "kl_plus_ce";
    case LossMode::ce_joint_avg: return "ce_joint_avg";
    case LossMode::sorted_avg: return "sorted_avg";
  }
  return "?";
}

std::string to_string(Schedule schedule) {
  return schedule == Schedule::cosine ? "cosine" : "trapezoidal";
}

LossMode parse_loss_mode(const std::string& name) {
  if (name == "kl_only") return LossMode::kl_only;
  if (name == "kl_plus_ce") return LossMode::kl_plus_ce;
  if (name == "ce_joint_avg") return LossMode::ce_joint_avg;
  if (name == "sorted_avg") return LossMode::sorted_avg;
  throw ConfigError("train.loss_mode: unknown mode '" + name +
                    "' (kl_only|kl_plus_ce|ce_joint_avg|sorted_avg)");
}

Schedule parse_schedule(const std::string& name) {
  if (name == "cosine") return Schedule::cosine;
  if (name == "trapezoidal") return Schedule::trapezoidal;
  throw ConfigError("train.schedule: unknown schedule '" + name + "' (cosine|trapezoidal)");
}

// ---------------------------------------------------------------------------
// TrainConfig

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

struct KvReader {
  const std::map<std::string, std::string>& kv;

  const std::string* find(const std::string& key) const {
    auto it = kv.find(key);
    return it == kv.end() ? nullptr : &it->second;
  }
  int64_t integer(const std::string& key, int64_t fallback) const {
    const std::string* s = find(key);
    if (!s) return fallback;
    size_t used = 0;
    int64_t v = 0;
    try {
      v = std::stoll(*s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != s->size()) {
      throw ConfigError("train." + key + ": expected an integer, got '" + *s + "'");
    }
    return v;
  }
  double real(const std::string& key, double fallback) const {
    const std::string* s = find(key);
    if (!s) return fallback;
    size_t used = 0;
    double v = 0;
    try {
      v = std::stod(*s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != s->size()) {
      throw ConfigError("train." + key + ": expected a number, got '" + *s + "'");
    }
    return v;
  }
  bool boolean(const std::string& key, bool fallback) const {
    const std::string* s = find(key);
    if (!s) return fallback;
    if (*s == "true" || *s == "1") return true;
    if (*s == "false" || *s == "0") return false;
    throw ConfigError("train." + key + ": expected true or false, got '" + *s + "'");
  }
};

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("train config: " + msg); };
  if (loss_mode == LossMode::kl_plus_ce && !(kl_weight > 0.0)) {
    fail("kl_weight must be positive for kl_plus_ce");
  }
  if ((loss_mode == LossMode::ce_joint_avg || loss_mode == LossMode::sorted_avg) && freeze_trunk) {
    fail(to_string(loss_mode) + " trains the trunk; set freeze_trunk = false");
  }
  if (loss_mode == LossMode::kl_plus_ce && !freeze_trunk) {
    fail("kl_plus_ce requires freeze_trunk = true");
  }
  if (!(lr_max >= 0.0)) fail("lr_max must be non-negative");
  if (warmup_frac < 0.0 || decay_frac < 0.0 || warmup_frac + decay_frac > 1.0) {
    fail("warmup_frac and decay_frac must be non-negative and sum to at most 1");
  }
  if (batch_size < 1) fail("batch_size must be positive");
  if (seq_len < 1) fail("seq_len must be positive");
  if (steps < 0) fail("steps must be non-negative");
  if (eval_every < 0) fail("eval_every must be non-negative");
  if (weight_decay < 0.0) fail("weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0,1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (!(grad_clip >= 0.0)) fail("grad_clip must be non-negative (0 disables)");
}

std::vector<std::pair<std::string, std::string>> TrainConfig::to_kv() const {
  return {
      {"loss_mode", to_string(loss_mode)},
      {"kl_weight", fmt(kl_weight)},
      {"freeze_trunk", freeze_trunk ? "true" : "false"},
      {"lr_max", fmt(lr_max)},
      {"schedule", to_string(schedule)},
      {"warmup_frac", fmt(warmup_frac)},
      {"decay_frac", fmt(decay_frac)},
      {"batch_size", std::to_string(batch_size)},
      {"seq_len", std::to_string(seq_len)},
      {"steps", std::to_string(steps)},
      {"seed", std::to_string(seed)},
      {"weight_decay", fmt(weight_decay)},
      {"beta1", fmt(beta1)},
      {"beta2", fmt(beta2)},
      {"adam_eps", fmt(adam_eps)},
      {"grad_clip", fmt(grad_clip)},
      {"eval_every", std::to_string(eval_every)},
  };
}

TrainConfig TrainConfig::from_kv(const std::map<std::string, std::string>& kv) {
  KvReader r{kv};
  TrainConfig c;
  if (const std::string* s = r.find("loss_mode")) c.loss_mode = parse_loss_mode(*s);
  if (const std::string* s = r.find("schedule")) c.schedule = parse_schedule(*s);
  c.kl_weight = r.real("kl_weight", c.kl_weight);
  c.freeze_trunk = r.boolean("freeze_trunk", c.freeze_trunk);
  c.lr_max = r.real("lr_max", c.lr_max);
  c.warmup_frac = r.real("warmup_frac", c.warmup_frac);
  c.decay_frac = r.real("decay_frac", c.decay_frac);
  c.batch_size = r.integer("batch_size", c.batch_size);
  c.seq_len = r.integer("seq_len", c.seq_len);
  c.steps = r.integer("steps", c.steps);
  c.seed = static_cast<uint64_t>(r.integer("seed", static_cast<int64_t>(c.seed)));
  c.weight_decay = r.real("weight_decay", c.weight_decay);
  c.beta1 = r.real("beta1", c.beta1);
  c.beta2 = r.real("beta2", c.beta2);
  c.adam_eps = r.real("adam_eps", c.adam_eps);
  c.grad_clip = r.real("grad_clip", c.grad_clip);
  c.eval_every = r.integer("eval_every", c.eval_every);
  return c;
}

double lr_at(int64_t step, Schedule schedule, double lr_max, int64_t total_steps,
             double warmup_frac, double decay_frac) {
  if (total_steps < 0 || step < 0 || step > total_steps) {
    throw RangeError("lr step " + std::to_string(step) + " outside 0.." +
                     std::to_string(total_steps));
  }
  if (total_steps == 0) return lr_max;
  const double s = static_cast<double>(step);
  const double n = static_cast<double>(total_steps);
  if (schedule == Schedule::cosine) {
    return lr_max * 0.5 * (1.0 + std::cos(std::numbers::pi * s / n));
  }
  const double warm = warmup_frac * n;
  const double decay_start = n - decay_frac * n;
  if (s < warm) return lr_max * s / warm;
  if (s <= decay_start) return lr_max;
  return lr_max * (n - s) / (n - decay_start);
}

// ---------------------------------------------------------------------------
// AdamW

template <typename T>
AdamW<T>::AdamW(NamedTensors<T> params, Options options)
    : params_(std::move(params)), options_(options) {
  for (const auto& [name, p] : params_) {
    m_.emplace_back(static_cast<size_t>(p.numel()), T(0));
    v_.emplace_back(static_cast<size_t>(p.numel()), T(0));
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor<T> p = params_[i].second;
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    const double decay = p.rank() >= 2 ? options_.weight_decay : 0.0;
    for (size_t k = 0; k < w.size(); ++k) {
      const double gk = static_cast<double>(g[k]);
      const double mk = b1 * static_cast<double>(m[k]) + (1.0 - b1) * gk;
      const double vk = b2 * static_cast<double>(v[k]) + (1.0 - b2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      double wk = static_cast<double>(w[k]);
      wk -= lr * decay * wk;
      wk -= lr * (mk / c1) / (std::sqrt(vk / c2) + options_.eps);
      w[k] = static_cast<T>(wk);
    }
  }
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (auto& [name, p] : params_) {
    Tensor<T> h = p;
    h.clear_grad();
  }
}

template <typename T>
NamedTensors<T> AdamW<T>::state() const {
  NamedTensors<T> out;
  for (size_t i = 0; i < params_.size(); ++i) {
    const Shape& shape = params_[i].second.shape();
    out.emplace_back(params_[i].first + ".m", Tensor<T>::from(shape, m_[i]));
    out.emplace_back(params_[i].first + ".v", Tensor<T>::from(shape, v_[i]));
  }
  return out;
}

template <typename T>
void AdamW<T>::load_state(const NamedTensors<T>& state, int64_t step_count) {
  std::map<std::string, const Tensor<T>*> by_name;
  for (const auto& [name, t] : state) by_name[name] = &t;
  for (size_t i = 0; i < params_.size(); ++i) {
    for (int which = 0; which < 2; ++which) {
      const std::string name = params_[i].first + (which == 0 ? ".m" : ".v");
      auto it = by_name.find(name);
      if (it == by_name.end()) throw FormatError("optimizer state is missing '" + name + "'");
      if (it->second->shape() != params_[i].second.shape()) {
        throw DimensionError("optimizer state '" + name + "' has shape " +
                             shape_str(it->second->shape()) + ", expected " +
                             shape_str(params_[i].second.shape()));
      }
      auto src = it->second->data();
      (which == 0 ? m_[i] : v_[i]).assign(src.begin(), src.end());
    }
  }
  t_ = step_count;
}

template <typename T>
double clip_grad_norm(const NamedTensors<T>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / (norm + 1e-6);
    for (const auto& [name, p] : params) {
      if (!p.has_grad()) continue;
      Tensor<T> h = p;
      for (T& g : h.mutable_grad()) g = static_cast<T>(static_cast<double>(g) * factor);
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Steps

namespace {

template <typename T>
void clear_grads(const ParamGroup<T>& group) {
  for (const auto& [path, t] : group.entries()) {
    Tensor<T> h = t;
    h.clear_grad();
  }
}

template <typename T>
Tensor<T> accumulate(const Tensor<T>& total, const Tensor<T>& term) {
  return total.defined() ? add(total, term) : term;
}

template <typename T>
void run_backward(Tape<T>& tape, const Tensor<T>& loss) {
  if (loss.defined() && loss.requires_grad()) tape.backward(loss);
}

double weight_for(const std::map<int, double>& weights, int exit_layer) {
  auto it = weights.find(exit_layer);
  return it == weights.end() ? 1.0 : it->second;
}

// Untaped trunk pass collecting the states at `exits` and the full logits.
template <typename T>
std::pair<std::map<int, HiddenState<T>>, Tensor<T>> teacher_pass(const TransformerTrunk<T>& trunk,
                                                                  const std::vector<int>& exits,
                                                                  const TokenBatch& batch) {
  NoGradScope<T> no_grad;
  std::map<int, HiddenState<T>> states;
  HiddenState<T> h = trunk.embed(batch);
  size_t next = 0;
  for (int i = 1; i <= trunk.config().n_layers; ++i) {
    h = trunk.layer_forward(h, i);
    if (next < exits.size() && exits[next] == i) {
      states.emplace(i, h);
      ++next;
    }
  }
  return {std::move(states), trunk.head(h.values)};
}

}  // namespace

template <typename T>
void check_trunk_untouched(const TransformerTrunk<T>& trunk) {
  const ParamGroup<T> params = trunk.parameters();
  for (const auto& [path, t] : params.entries()) {
    if (t.has_grad()) throw FreezeViolation("trunk parameter '" + path + "' received a gradient");
  }
}

template <typename T>
StepLosses distill_step(const TransformerTrunk<T>& trunk, BalconySet<T>& balconies,
                        const TokenBatch& batch, const std::map<int, double>& exit_weights) {
  clear_grads(balconies.parameters());
  std::vector<int> active;
  for (int j : balconies.exits()) {
    if (weight_for(exit_weights, j) != 0.0) active.push_back(j);
  }
  auto [states, teacher] = teacher_pass(trunk, active, batch);

  StepLosses out;
  Tape<T> tape;
  {
    TapeScope<T> scope(tape);
    Tensor<T> total;
    for (int j : active) {
      Tensor<T> student = balcony_forward(states.at(j), balconies.at(j), trunk);
      Tensor<T> kl = kl_divergence(teacher, student);
      out.per_exit[j] = static_cast<double>(kl.item());
      const double w = weight_for(exit_weights, j);
      total = accumulate(total, w == 1.0 ? kl : scale(kl, static_cast<T>(w)));
    }
    if (total.defined()) out.total = static_cast<double>(total.item());
    run_backward(tape, total);
  }
  check_trunk_untouched(trunk);
  return out;
}

template <typename T>
StepLosses distill_step_with_ce(const TransformerTrunk<T>& trunk, BalconySet<T>& balconies,
                                const LmBatch& batch, double kl_weight) {
  clear_grads(balconies.parameters());
  const std::vector<int> exits = balconies.exits();
  auto [states, teacher] = teacher_pass(trunk, exits, batch.inputs);

  StepLosses out;
  Tape<T> tape;
  {
    TapeScope<T> scope(tape);
    Tensor<T> total;
    for (int j : exits) {
      Tensor<T> student = balcony_forward(states.at(j), balconies.at(j), trunk);
      Tensor<T> ce = cross_entropy(student, std::span<const int32_t>(batch.targets));
      Tensor<T> loss = ce;
      if (kl_weight != 0.0) {
        loss = add(scale(kl_divergence(teacher, student), static_cast<T>(kl_weight)), ce);
      }
      out.per_exit[j] = static_cast<double>(loss.item());
      total = accumulate(total, loss);
    }
    if (total.defined()) out.total = static_cast<double>(total.item());
    run_backward(tape, total);
  }
  check_trunk_untouched(trunk);
  return out;
}

template <typename T>
StepLosses distill_step_unfrozen(TransformerTrunk<T>& trunk, BalconySet<T>& balconies,
                                 const TokenBatch& batch) {
  clear_grads(balconies.parameters());
  clear_grads(trunk.parameters());
  const std::vector<int> exits = balconies.exits();
  Tensor<T> teacher;
  {
    NoGradScope<T> no_grad;
    teacher = trunk.forward_full(batch);
  }
  StepLosses out;
  Tape<T> tape;
  {
    TapeScope<T> scope(tape);
    Tensor<T> total;
    HiddenState<T> h = trunk.embed(batch);
    for (int j : exits) {
      while (h.layer_index < j) h = trunk.layer_forward(h, h.layer_index + 1);
      Tensor<T> kl = kl_divergence(teacher, balcony_forward(h, balconies.at(j), trunk));
      out.per_exit[j] = static_cast<double>(kl.item());
      total = accumulate(total, kl);
    }
    if (total.defined()) out.total = static_cast<double>(total.item());
    run_backward(tape, total);
  }
  return out;
}

template <typename T>
StepLosses joint_pretrain_step(TransformerTrunk<T>& trunk, BalconySet<T>& balconies,
                               const LmBatch& batch) {
  clear_grads(balconies.parameters());
  clear_grads(trunk.parameters());
  const int n = static_cast<int>(trunk.config().n_layers);
  const std::span<const int32_t> targets(batch.targets);
  StepLosses out;
  Tape<T> tape;
  {
    TapeScope<T> scope(tape);
    Tensor<T> total;
    HiddenState<T> h = trunk.embed(batch.inputs);
    for (int i = 1; i <= n; ++i) {
      h = trunk.layer_forward(h, i);
      if (i < n && balconies.contains(i)) {
        Tensor<T> ce = cross_entropy(balcony_forward(h, balconies.at(i), trunk), targets);
        out.per_exit[i] = static_cast<double>(ce.item());
        total = accumulate(total, ce);
      }
    }
    Tensor<T> full = cross_entropy(trunk.head(h.values), targets);
    out.per_exit[n] = static_cast<double>(full.item());
    total = accumulate(total, full);
    total = scale(total, static_cast<T>(1.0 / static_cast<double>(out.per_exit.size())));
    out.total = static_cast<double>(total.item());
    run_backward(tape, total);
  }
  return out;
}

template <typename T>
StepLosses sorted_baseline_step(TransformerTrunk<T>& trunk, const ExitPointSet& exits,
                                const LmBatch& batch) {
  clear_grads(trunk.parameters());
  const int n = static_cast<int>(trunk.config().n_layers);
  const std::span<const int32_t> targets(batch.targets);
  StepLosses out;
  Tape<T> tape;
  {
    TapeScope<T> scope(tape);
    Tensor<T> total;
    HiddenState<T> h = trunk.embed(batch.inputs);
    for (int i = 1; i <= n; ++i) {
      h = trunk.layer_forward(h, i);
      if (i < n && exits.contains(i)) {
        Tensor<T> ce = cross_entropy(trunk.head(h.values), targets);
        out.per_exit[i] = static_cast<double>(ce.item());
        total = accumulate(total, ce);
      }
    }
    Tensor<T> full = cross_entropy(trunk.head(h.values), targets);
    out.per_exit[n] = static_cast<double>(full.item());
    total = accumulate(total, full);
    total = scale(total, static_cast<T>(1.0 / static_cast<double>(out.per_exit.size())));
    out.total = static_cast<double>(total.item());
    run_backward(tape, total);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

double EvalMetrics::mean_kl() const {
  double s = 0.0;
  for (const auto& [j, v] : kl) s += v;
  return kl.empty() ? 0.0 : s / static_cast<double>(kl.size());
}

double EvalMetrics::mean_ce() const {
  double s = 0.0;
  for (const auto& [j, v] : ce) s += v;
  return ce.empty() ? 0.0 : s / static_cast<double>(ce.size());
}

double EvalMetrics::mean_ce_with_full() const {
  double s = full_ce;
  for (const auto& [j, v] : ce) s += v;
  return s / static_cast<double>(ce.size() + 1);
}

template <typename T>
EvalMetrics evaluate(const TransformerTrunk<T>& trunk, const BalconySet<T>& balconies,
                     const std::vector<LmBatch>& batches, const ExitPointSet& direct_exits) {
  NoGradScope<T> no_grad;
  EvalMetrics m;
  if (batches.empty()) return m;
  const int n = static_cast<int>(trunk.config().n_layers);
  for (const LmBatch& batch : batches) {
    const std::span<const int32_t> targets(batch.targets);
    std::map<int, Tensor<T>> exit_logits;
    HiddenState<T> h = trunk.embed(batch.inputs);
    for (int i = 1; i <= n; ++i) {
      h = trunk.layer_forward(h, i);
      if (i == n) break;
      if (balconies.contains(i)) {
        exit_logits[i] = balcony_forward(h, balconies.at(i), trunk);
      } else if (direct_exits.contains(i)) {
        exit_logits[i] = trunk.head(h.values);
      }
    }
    Tensor<T> teacher = trunk.head(h.values);
    m.full_ce += static_cast<double>(cross_entropy(teacher, targets).item());
    for (const auto& [j, logits] : exit_logits) {
      m.kl[j] += static_cast<double>(kl_divergence(teacher, logits).item());
      m.ce[j] += static_cast<double>(cross_entropy(logits, targets).item());
    }
  }
  const double count = static_cast<double>(batches.size());
  m.full_ce /= count;
  for (auto& [j, v] : m.kl) v /= count;
  for (auto& [j, v] : m.ce) v /= count;
  return m;
}

const EvalMetrics& TrainReport::initial() const {
  if (evals.empty()) throw Error("train report has no evaluations");
  return evals.front().metrics;
}

const EvalMetrics& TrainReport::final() const {
  if (evals.empty()) throw Error("train report has no evaluations");
  return evals.back().metrics;
}

std::vector<double> TrainReport::loss_series(int exit_layer) const {
  std::vector<double> out;
  for (const auto& r : losses) {
    if (r.exit_layer == exit_layer) out.push_back(r.loss);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trainer

template <typename T>
TrainReport train(const TrainConfig& cfg, TransformerTrunk<T>& trunk, BalconySet<T>& balconies,
                  const SyntheticCorpus& corpus, const std::vector<LmBatch>& heldout,
                  const ExitPointSet& sorted_exits) {
  cfg.validate();
  if (cfg.seq_len > trunk.config().max_seq_len) {
    throw ConfigError("train.seq_len " + std::to_string(cfg.seq_len) + " exceeds max_seq_len " +
                      std::to_string(trunk.config().max_seq_len));
  }
  const bool kl_mode = cfg.loss_mode == LossMode::kl_only || cfg.loss_mode == LossMode::kl_plus_ce;
  if (kl_mode && balconies.empty()) throw ConfigError("distillation needs at least one exit");

  ParamGroup<T> trainable;
  switch (cfg.loss_mode) {
    case LossMode::kl_only:
    case LossMode::kl_plus_ce:
      trunk.set_frozen(cfg.freeze_trunk);
      balconies.set_frozen(false);
      trainable.merge(balconies.parameters());
      if (!cfg.freeze_trunk) trainable.merge(trunk.parameters());
      break;
    case LossMode::ce_joint_avg:
      trunk.set_frozen(false);
      balconies.set_frozen(false);
      trainable.merge(trunk.parameters());
      trainable.merge(balconies.parameters());
      break;
    case LossMode::sorted_avg:
      trunk.set_frozen(false);
      balconies.set_frozen(true);
      trainable.merge(trunk.parameters());
      break;
  }

  typename AdamW<T>::Options opts;
  opts.beta1 = cfg.beta1;
  opts.beta2 = cfg.beta2;
  opts.eps = cfg.adam_eps;
  opts.weight_decay = cfg.weight_decay;
  AdamW<T> optimizer(trainable.trainable(), opts);
  BatchSampler sampler(corpus.train(), cfg.batch_size, cfg.seq_len, mix_seed(cfg.seed, 5));

  TrainReport report;
  auto eval_now = [&](int64_t step) {
    if (heldout.empty()) return;
    report.evals.push_back({step, evaluate(trunk, balconies, heldout, sorted_exits)});
  };
  const auto start = std::chrono::steady_clock::now();
  eval_now(0);
  const int64_t tokens_per_step = cfg.batch_size * cfg.seq_len;
  for (int64_t step = 0; step < cfg.steps; ++step) {
    const LmBatch batch = sampler.next();
    StepLosses losses;
    switch (cfg.loss_mode) {
      case LossMode::kl_only:
        losses = cfg.freeze_trunk ? distill_step(trunk, balconies, batch.inputs)
                                  : distill_step_unfrozen(trunk, balconies, batch.inputs);
        break;
      case LossMode::kl_plus_ce:
        losses = distill_step_with_ce(trunk, balconies, batch, cfg.kl_weight);
        break;
      case LossMode::ce_joint_avg:
        losses = joint_pretrain_step(trunk, balconies, batch);
        break;
      case LossMode::sorted_avg:
        losses = sorted_baseline_step(trunk, sorted_exits, batch);
        break;
    }
    for (const auto& [j, v] : losses.per_exit) {
      if (!std::isfinite(v)) {
        throw NumericError("non-finite loss " + std::to_string(v) + " at step " +
                           std::to_string(step) + ", exit " + std::to_string(j));
      }
    }
    const double lr = lr_at(step, cfg.schedule, cfg.lr_max, cfg.steps, cfg.warmup_frac,
                            cfg.decay_frac);
    if (cfg.grad_clip > 0.0) clip_grad_norm(optimizer.params(), cfg.grad_clip);
    optimizer.step(lr);
    optimizer.zero_grad();
    report.tokens += tokens_per_step;
    for (const auto& [j, v] : losses.per_exit) {
      report.losses.push_back({step, j, v, lr, report.tokens});
    }
    if (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.steps) {
      eval_now(step + 1);
    }
  }
  if (cfg.steps > 0) eval_now(cfg.steps);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

#define BALCONY_INSTANTIATE(T)                                                                    \
  template class AdamW<T>;                                                                        \
  template double clip_grad_norm(const NamedTensors<T>&, double);                                 \
  template void check_trunk_untouched(const TransformerTrunk<T>&);                                \
  template StepLosses distill_step(const TransformerTrunk<T>&, BalconySet<T>&, const TokenBatch&, \
                                   const std::map<int, double>&);                                 \
  template StepLosses distill_step_with_ce(const TransformerTrunk<T>&, BalconySet<T>&,            \
                                           const LmBatch&, double);                               \
  template StepLosses distill_step_unfrozen(TransformerTrunk<T>&, BalconySet<T>&,                 \
                                            const TokenBatch&);                                   \
  template StepLosses joint_pretrain_step(TransformerTrunk<T>&, BalconySet<T>&, const LmBatch&);  \
  template StepLosses sorted_baseline_step(TransformerTrunk<T>&, const ExitPointSet&,             \
                                           const LmBatch&);                                       \
  template EvalMetrics evaluate(const TransformerTrunk<T>&, const BalconySet<T>&,                 \
                                const std::vector<LmBatch>&, const ExitPointSet&);                \
  template TrainReport train(const TrainConfig&, TransformerTrunk<T>&, BalconySet<T>&,            \
                             const SyntheticCorpus&, const std::vector<LmBatch>&,                 \
                             const ExitPointSet&);

BALCONY_INSTANTIATE(float)
BALCONY_INSTANTIATE(double)

}  // namespace balcony
