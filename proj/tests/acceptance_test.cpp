// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance suite on the toy configuration (8 layers, width 128,
// exits 2, 4, 6). Prints one PASS/FAIL line per criterion and exits non-zero
// when any fails. The KL moving-average trend is reported alongside but does
// not set the exit status.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "balcony/checkpoint.hpp"
#include "balcony/experiment.hpp"
#include "balcony/gradcheck.hpp"
#include "balcony/inference.hpp"
#include "balcony/ops.hpp"
#include "balcony/prune.hpp"

namespace balcony {
namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;
using TD = Tensor<double>;

struct Verdict {
  bool pass = true;
  std::string detail;
};

std::string strf(const char* fmt, ...) {
  char buf[1024];
  va_list args;
  va_start(args, fmt);
  std::vsnprintf(buf, sizeof buf, fmt, args);
  va_end(args);
  return buf;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

const ExitPointSet& toy_exits() {
  static const ExitPointSet e({2, 4, 6}, 8);
  return e;
}

// Shared state built once: corpus, pretrained toy trunk, distilled balconies.
struct World {
  SyntheticCorpus corpus;
  std::vector<LmBatch> heldout;
  TokenBatch probe;
  TransformerTrunk<float> pretrained{ModelConfig{}};
  double pretrain_ce_before = 0.0;
  double pretrain_ce_after = 0.0;
  double pretrain_seconds = 0.0;

  TransformerTrunk<float> distilled_trunk{ModelConfig{}};
  BalconySet<float> balconies;
  TrainReport distill_report;
  Tensor<float> probe_logits_before;
  Tensor<float> probe_logits_after;
  bool trunk_tensors_unchanged = false;
  bool freeze_violation = false;
  std::string freeze_message;
  double distill_seconds = 0.0;

  fs::path dir;
};

World& world() {
  static World w;
  return w;
}

void pretrain(World& w) {
  w.heldout = heldout_batches(w.corpus, 4, 8, 64);
  w.probe = probe_batch(w.corpus, 32, 64);
  w.pretrained = TransformerTrunk<float>::random(ModelConfig{}, 1);
  TrainConfig cfg;
  cfg.loss_mode = LossMode::ce_joint_avg;
  cfg.freeze_trunk = false;
  cfg.lr_max = 3e-3;
  cfg.schedule = Schedule::trapezoidal;
  cfg.steps = 700;
  cfg.seed = 1;
  BalconySet<float> none;
  const TrainReport r = train(cfg, w.pretrained, none, w.corpus, w.heldout);
  w.pretrained.set_frozen(true);
  w.pretrain_ce_before = r.initial().full_ce;
  w.pretrain_ce_after = r.final().full_ce;
  w.pretrain_seconds = r.wall_seconds;
  std::printf("  pretrained toy trunk: held-out CE %.4f -> %.4f in %.0fs\n", w.pretrain_ce_before,
              w.pretrain_ce_after, w.pretrain_seconds);
  std::fflush(stdout);
}

void run_distillation(World& w) {
  w.distilled_trunk = w.pretrained.clone();
  w.distilled_trunk.set_frozen(true);
  const ParamGroup<float> snapshot = w.pretrained.clone().parameters();
  w.balconies = BalconySet<float>(attach_balconies(w.distilled_trunk, toy_exits(), InitMode::from_last_layer,
                                                   BalconyVariant::decoder, 0));
  {
    NoGradScope<float> no_grad;
    w.probe_logits_before = w.distilled_trunk.forward_full(w.probe).clone();
  }
  TrainConfig cfg;  // kl_only, frozen, cosine 5e-4, batch 8 x 64
  cfg.steps = 500;
  cfg.eval_every = 100;
  const auto t0 = Clock::now();
  try {
    const DistillRun run = distill(cfg, w.distilled_trunk, w.balconies, w.corpus, w.heldout, w.probe);
    w.distill_report = run.report;
  } catch (const FreezeViolation& e) {
    w.freeze_violation = true;
    w.freeze_message = e.what();
  }
  w.distill_seconds = seconds_since(t0);
  {
    NoGradScope<float> no_grad;
    w.probe_logits_after = w.distilled_trunk.forward_full(w.probe).clone();
  }
  const ParamGroup<float> after = w.distilled_trunk.parameters();
  w.trunk_tensors_unchanged = after.size() == snapshot.size();
  for (const auto& [path, t] : snapshot.entries()) {
    w.trunk_tensors_unchanged = w.trunk_tensors_unchanged && after.contains(path) && t.bitwise_equal(after.at(path));
  }
  std::printf("  distilled exits 2,4,6 for %lld steps in %.0fs\n", static_cast<long long>(cfg.steps),
              w.distill_seconds);
  std::fflush(stdout);
}

// ---------------------------------------------------------------- 1

Verdict freeze_invariance(const World& w) {
  Verdict v;
  const bool logits_equal = w.probe_logits_before.bitwise_equal(w.probe_logits_after);
  v.pass = !w.freeze_violation && logits_equal && w.trunk_tensors_unchanged && w.distill_seconds < 900.0;
  v.detail = strf("500 steps, 32x64 probe logits %s, trunk tensors %s, %.0fs", logits_equal ? "bitwise equal" : "DIFFER",
                  w.trunk_tensors_unchanged ? "bitwise equal" : "DIFFER", w.distill_seconds);
  if (w.freeze_violation) v.detail += "; " + w.freeze_message;
  return v;
}

// ---------------------------------------------------------------- 2

Verdict gradient_isolation(const World& w) {
  auto trunk = TransformerTrunk<float>::random(ModelConfig{}, 21);
  trunk.set_frozen(true);
  BalconySet<float> set(attach_balconies(trunk, toy_exits(), InitMode::random, BalconyVariant::decoder, 5));
  BatchSampler sampler(w.corpus.train(), 2, 32, 99);
  int64_t compared = 0, mismatched = 0, leaked = 0;
  for (int batch = 0; batch < 10; ++batch) {
    const LmBatch b = sampler.next();
    distill_step(trunk, set, b.inputs);
    std::map<std::string, std::vector<float>> reference;
    for (const auto& [path, t] : set.parameters().entries()) reference[path] = {t.grad().begin(), t.grad().end()};
    for (int masked : toy_exits().layers()) {
      distill_step(trunk, set, b.inputs, {{masked, 0.0}});
      const std::string prefix = "balcony." + std::to_string(masked) + ".";
      for (const auto& [path, t] : set.parameters().entries()) {
        if (path.rfind(prefix, 0) == 0) {
          if (t.has_grad()) {
            const auto g = t.grad();
            leaked += std::any_of(g.begin(), g.end(), [](float x) { return x != 0.0f; });
          }
          continue;
        }
        ++compared;
        const std::vector<float> g(t.grad().begin(), t.grad().end());
        mismatched += g != reference.at(path);
      }
    }
  }
  Verdict v;
  v.pass = mismatched == 0 && leaked == 0;
  v.detail = strf("10 batches x 3 masked exits: %lld tensors compared, %lld differ, %lld masked tensors with grads",
                  static_cast<long long>(compared), static_cast<long long>(mismatched),
                  static_cast<long long>(leaked));
  return v;
}

// ---------------------------------------------------------------- 3

Verdict initialization_contract(const World& w) {
  const auto modules = attach_balconies(w.pretrained, toy_exits(), InitMode::from_last_layer,
                                        BalconyVariant::decoder, 3);
  ParamGroup<float> last;
  w.pretrained.layer(8).collect("", last);
  double max_diff = 0.0;
  bool structure_ok = modules.size() == 3;
  for (const auto& m : modules) {
    ParamGroup<float> body;
    m.body.collect("", body);
    structure_ok = structure_ok && body.size() == last.size();
    for (const auto& [path, t] : last.entries()) {
      if (!body.contains(path) || body.at(path).shape() != t.shape()) {
        structure_ok = false;
        continue;
      }
      const auto a = t.data(), b = body.at(path).data();
      for (size_t i = 0; i < a.size(); ++i) max_diff = std::max(max_diff, std::fabs(double(a[i]) - double(b[i])));
    }
  }
  Verdict v;
  v.pass = structure_ok && max_diff == 0.0;
  v.detail = strf("3 bodies vs layer 8 over %zu tensors each: max |diff| = %g", last.size(), max_diff);
  return v;
}

// ---------------------------------------------------------------- 4

TD random_tensor(Shape shape, Rng& rng, bool requires_grad = true, double scale_by = 1.0) {
  std::vector<double> values(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : values) x = rng.normal() * scale_by;
  return TD::from(std::move(shape), std::move(values), requires_grad);
}

void jitter(const ParamGroup<double>& group, Rng& rng, double sigma) {
  for (const auto& [path, t] : group.entries()) {
    Tensor<double> h = t;
    for (auto& x : h.mutable_data()) x += rng.normal() * sigma;
  }
}

Verdict gradient_correctness() {
  const auto t0 = Clock::now();
  const double h = 1e-5, tol = 1e-4;
  double worst = 0.0;
  int checks = 0;
  std::string failures;
  auto check = [&](const std::string& what, const std::function<TD()>& f, const NamedParams& params) {
    const GradCheckReport r = finite_diff_check(f, params, h, tol);
    worst = std::max(worst, r.max_rel_error);
    ++checks;
    if (!r.passed) failures += " " + what;
  };
  for (int trial = 0; trial < 24; ++trial) {
    Rng rng(5000 + trial);
    auto dim = [&] { return 1 + static_cast<int64_t>(rng.below(8)); };
    const int64_t b = dim(), s = dim(), d = dim(), e = dim();
    const std::string tag = "#" + std::to_string(trial);
    TD probe_bsd = random_tensor({b, s, d}, rng, false);
    TD probe_bse = random_tensor({b, s, e}, rng, false);

    TD x = random_tensor({b, s, d}, rng), w = random_tensor({d, e}, rng);
    check("matmul" + tag, [&] { return sum(mul(matmul(x, w), probe_bse)); }, {{"x", x}, {"w", w}});
    TD bw = random_tensor({b, d, e}, rng);
    check("batched_matmul" + tag, [&] { return sum(mul(matmul(x, bw), probe_bse)); }, {{"x", x}, {"w", bw}});
    TD y = random_tensor({b, s, d}, rng), z = random_tensor({b, s, d}, rng), bias = random_tensor({d}, rng);
    check("add" + tag, [&] { return sum(mul(add(y, bias), probe_bsd)); }, {{"y", y}, {"bias", bias}});
    check("mul" + tag, [&] { return sum(mul(mul(y, z), probe_bsd)); }, {{"y", y}, {"z", z}});
    check("scale_mean" + tag, [&] { return mean(mul(scale(y, 0.7), probe_bsd)); }, {{"y", y}});
    check("silu" + tag, [&] { return sum(mul(silu(y), probe_bsd)); }, {{"y", y}});
    check("reshape" + tag, [&] { return sum(mul(reshape(y, {b * s, d}), reshape(probe_bsd, {b * s, d}))); },
          {{"y", y}});
    const int axis = static_cast<int>(rng.below(3));
    check("softmax" + tag, [&] { return sum(mul(softmax(y, axis), probe_bsd)); }, {{"y", y}});
    TD nw = random_tensor({d}, rng);
    check("rms_norm" + tag, [&] { return sum(mul(rms_norm(y, nw, 1e-5), probe_bsd)); }, {{"y", y}, {"w", nw}});

    const int64_t vocab = 2 + static_cast<int64_t>(rng.below(7));
    TD table = random_tensor({vocab, d}, rng);
    TokenBatch tokens(b, s);
    for (auto& t : tokens.ids) t = static_cast<int32_t>(rng.below(vocab));
    check("embedding" + tag, [&] { return sum(mul(embedding(table, tokens), probe_bsd)); }, {{"table", table}});

    const int64_t heads = 1 + static_cast<int64_t>(rng.below(2));
    const int64_t hd = 2 * (1 + static_cast<int64_t>(rng.below(2)));
    kernels::RopeTable<double> table_rope(16, hd, 10000.0);
    TD q = random_tensor({b, s, heads * hd}, rng), k = random_tensor({b, s, heads * hd}, rng),
       v = random_tensor({b, s, heads * hd}, rng), probe_att = random_tensor({b, s, heads * hd}, rng, false);
    const int64_t offset = static_cast<int64_t>(rng.below(8));
    check("rope" + tag, [&] { return sum(mul(rope(q, heads, hd, table_rope, offset), probe_att)); }, {{"q", q}});
    check("causal_attention" + tag, [&] { return sum(mul(causal_attention(q, k, v, heads, hd), probe_att)); },
          {{"q", q}, {"k", k}, {"v", v}});

    TD teacher = random_tensor({b, s, e}, rng, false), student = random_tensor({b, s, e}, rng);
    check("kl_divergence" + tag, [&] { return kl_divergence(teacher, student); }, {{"student", student}});
    std::vector<int32_t> targets(static_cast<size_t>(b * s));
    for (auto& t : targets) t = static_cast<int32_t>(rng.below(e));
    check("cross_entropy" + tag, [&] { return cross_entropy(student, targets); }, {{"student", student}});

    // Composed submodel loss: frozen trunk prefix, balcony body, exit norm,
    // shared head, KL to the full model (plus CE).
    const int64_t n_layers = 2 + static_cast<int64_t>(rng.below(2));
    const int64_t width = heads * hd;
    const int64_t d_ff = width + static_cast<int64_t>(rng.below(static_cast<uint64_t>(9 - width)));
    const ModelConfig c = ModelConfig::make(n_layers, width, heads, d_ff, vocab, 8);
    auto trunk = TransformerTrunk<double>::random(c, 40 + trial);
    jitter(trunk.parameters(), rng, 0.3);
    trunk.set_frozen(true);
    const int exit = 1 + static_cast<int>(rng.below(n_layers - 1));
    const auto variant = std::array{BalconyVariant::decoder, BalconyVariant::mlp_only,
                                    BalconyVariant::attn_only}[trial % 3];
    auto module = make_balcony(trunk, exit, InitMode::from_last_layer, variant, 60 + trial);
    jitter(module.parameters(), rng, 0.3);
    TokenBatch ids(b, s);
    for (auto& t : ids.ids) t = static_cast<int32_t>(rng.below(vocab));
    std::vector<int32_t> next(static_cast<size_t>(b * s));
    for (auto& t : next) t = static_cast<int32_t>(rng.below(vocab));
    const TD full_logits = trunk.forward_full(ids);
    NamedParams params;
    for (const auto& [path, t] : module.parameters().entries()) params.emplace_back(path, t);
    auto student_logits = [&] { return balcony_forward(trunk.forward_to_layer(ids, exit), module, trunk); };
    check("balcony_kl" + tag, [&] { return kl_divergence(full_logits, student_logits()); }, params);
    check("balcony_kl_ce" + tag,
          [&] {
            const TD st = student_logits();
            return add(scale(kl_divergence(full_logits, st), 0.001), cross_entropy(st, next));
          },
          params);
  }
  const double secs = seconds_since(t0);
  Verdict v;
  v.pass = failures.empty() && secs < 300.0;
  v.detail = strf("%d finite-difference checks (14 ops + composed submodel loss), max rel error %.2e, %.1fs",
                  checks, worst, secs);
  if (!failures.empty()) v.detail += "; failed:" + failures;
  return v;
}

// ---------------------------------------------------------------- 5

Verdict distillation_efficacy(const World& w) {
  Verdict v;
  if (w.freeze_violation) return {false, "distillation aborted: " + w.freeze_message};
  const EvalMetrics& a = w.distill_report.initial();
  const EvalMetrics& b = w.distill_report.final();
  for (int j : toy_exits().layers()) {
    const double ratio = b.kl.at(j) / a.kl.at(j);
    v.pass = v.pass && ratio <= 0.5;
    v.detail += strf("KL%d %.4f->%.4f (%.0f%%) ", j, a.kl.at(j), b.kl.at(j), 100.0 * ratio);
  }
  const double gap2 = b.ce.at(2) - b.full_ce, gap6 = b.ce.at(6) - b.full_ce;
  v.pass = v.pass && gap6 < gap2;
  v.detail += strf("| CE gap exit6 %.4f < exit2 %.4f", gap6, gap2);
  return v;
}

// The 100-step moving average of each exit's training KL never rises more
// than 5% above its running minimum.
Verdict moving_average_trend(const World& w) {
  Verdict v;
  if (w.freeze_violation) return {false, "distillation aborted"};
  for (int j : toy_exits().layers()) {
    const std::vector<double> series = w.distill_report.loss_series(j);
    const size_t window = 100;
    double acc = 0.0, best = INFINITY, worst_excursion = 0.0;
    size_t worst_at = 0;
    for (size_t i = 0; i < series.size(); ++i) {
      acc += series[i];
      if (i >= window) acc -= series[i - window];
      if (i + 1 < window) continue;
      const double ma = acc / window;
      best = std::min(best, ma);
      if (ma / best - 1.0 > worst_excursion) {
        worst_excursion = ma / best - 1.0;
        worst_at = i + 1;
      }
    }
    v.pass = v.pass && series.size() >= window && worst_excursion <= 0.05;
    v.detail += strf("exit %d max rise %.2f%% (window ending step %zu) ", j, 100.0 * worst_excursion, worst_at);
  }
  return v;
}

// ---------------------------------------------------------------- 6

Verdict ablation_directions(const World& w) {
  int a_hold = 0, b_hold = 0, c_hold = 0;
  std::string detail;
  const auto t0 = Clock::now();
  for (uint64_t seed : {0, 1, 2}) {
    TrainConfig base;
    base.steps = 200;
    base.batch_size = 4;
    base.seed = seed;
    std::map<Ablation, AblationResult> r;
    for (Ablation a : {Ablation::standard, Ablation::random_init, Ablation::kl_plus_ce, Ablation::unfrozen,
                       Ablation::sorted}) {
      r[a] = run_ablation(a, w.pretrained, toy_exits(), base, w.corpus, w.heldout, w.probe);
    }
    const AblationResult& std_run = r.at(Ablation::standard);
    bool init_ok = true;
    for (int j : toy_exits().layers()) init_ok = init_ok && std_run.final.kl.at(j) < r.at(Ablation::random_init).final.kl.at(j);
    const double ce_kl = std_run.final.mean_ce(), ce_mix = r.at(Ablation::kl_plus_ce).final.mean_ce();
    const double rel = ce_mix / ce_kl - 1.0;
    const bool ce_ok = std::fabs(rel) <= 0.03;
    const double frozen = std_run.final.full_ce, unfrozen = r.at(Ablation::unfrozen).final.full_ce,
                 sorted = r.at(Ablation::sorted).final.full_ce;
    const bool freeze_ok = frozen <= unfrozen && frozen <= sorted;
    a_hold += init_ok;
    b_hold += ce_ok;
    c_hold += freeze_ok;
    std::printf("  seed %llu: init %s, kl+ce CE %+.2f%%, full CE frozen %.4f unfrozen %.4f sorted %.4f\n",
                static_cast<unsigned long long>(seed), init_ok ? "ok" : "no", 100.0 * rel, frozen, unfrozen, sorted);
    std::fflush(stdout);
  }
  Verdict v;
  v.pass = a_hold >= 2 && b_hold >= 2 && c_hold >= 2;
  v.detail = strf("seeds holding (a) init %d/3, (b) kl+ce within 3%% %d/3, (c) frozen full CE %d/3; %.0fs", a_hold,
                  b_hold, c_hold, seconds_since(t0));
  return v;
}

// ---------------------------------------------------------------- 7

Verdict depth_vs_width() {
  const auto t0 = Clock::now();
  LatencyParams lp;
  lp.repeats = 31;
  lp.warmup = 2;
  const std::vector<double> ratios = {0.75, 0.5, 0.25};
  const SweepReport rep = run_sweep(ModelConfig{}, ratios, {PruneAxis::depth, PruneAxis::width}, lp, 0);
  Verdict v;
  for (double r : ratios) {
    const double d = rep.find(PruneAxis::depth, r).speedup_vs_base, wd = rep.find(PruneAxis::width, r).speedup_vs_base;
    const bool ok = d >= 0.95 * wd && (r > 0.5 || d > wd);
    v.pass = v.pass && ok;
    v.detail += strf("%.2f: depth %.2fx width %.2fx; ", r, d, wd);
  }
  const double secs = seconds_since(t0);
  v.pass = v.pass && secs < 600.0;
  v.detail += strf("median of %d, %.0fs", lp.repeats, secs);
  return v;
}

// ---------------------------------------------------------------- 8

Verdict latency_monotonicity(const World& w) {
  const InferenceEngine<float> engine(w.distilled_trunk, w.balconies);
  std::vector<LatencyTarget<float>> targets;
  for (int j : {8, 6, 4, 2}) targets.push_back({&engine, BudgetSpec::exit(j)});
  LatencyParams lp;
  lp.repeats = 15;
  lp.warmup = 2;
  const auto reps = measure_latencies(targets, lp);
  Verdict v;
  for (size_t i = 0; i < reps.size(); ++i) {
    if (i > 0) v.pass = v.pass && reps[i].median_s < reps[i - 1].median_s;
    v.detail += strf("%s %.2fms%s", reps[i].handle.c_str(), 1e3 * reps[i].median_s, i + 1 < reps.size() ? " > " : "");
  }
  v.detail += strf(" (speedups %.2fx/%.2fx/%.2fx)", reps[0].median_s / reps[1].median_s,
                   reps[0].median_s / reps[2].median_s, reps[0].median_s / reps[3].median_s);
  return v;
}

// ---------------------------------------------------------------- 9

Verdict cache_and_swap(const World& w) {
  const InferenceEngine<float> engine(w.distilled_trunk, w.balconies);
  const TokenBatch prompt(2, 16, [&] {
    std::vector<int32_t> ids;
    for (int64_t b = 0; b < 2; ++b) {
      for (int64_t s = 0; s < 16; ++s) ids.push_back(w.probe.at(b * 5, s));
    }
    return ids;
  }());
  int cache_ok = 0, swap_ok = 0, swaps = 0;
  const auto handles = engine.available();
  for (const auto& info : handles) {
    GenerationParams p;
    p.max_new_tokens = 48;
    const auto cached = generate(engine, prompt, BudgetSpec::exit(info.exit_layer), p);
    p.use_cache = false;
    cache_ok += cached == generate(engine, prompt, BudgetSpec::exit(info.exit_layer), p);
  }
  Session<float> s(engine, BudgetSpec::exit(2), 2);
  s.feed(prompt);
  GenerationParams p;
  p.max_new_tokens = 8;
  s.generate(p);
  for (int target : {6, 4, 8, 2, 8}) {
    s.swap_budget(BudgetSpec::exit(target));
    const TokenBatch so_far(2, s.length(), s.tokens());
    GenerationParams fresh_p = p;
    fresh_p.use_cache = false;
    const auto fresh = generate(engine, so_far, BudgetSpec::exit(target), fresh_p);
    ++swaps;
    swap_ok += s.generate(p) == fresh;
  }
  Verdict v;
  v.pass = cache_ok == static_cast<int>(handles.size()) && swap_ok == swaps;
  v.detail = strf("cached == uncached greedy for %d/%zu handles (48 tokens); post-swap == from-scratch %d/%d swaps",
                  cache_ok, handles.size(), swap_ok, swaps);
  return v;
}

// ---------------------------------------------------------------- 10

Verdict parameter_accounting() {
  const int64_t large = decoder_layer_params(ModelConfig::make(1, 4096, 32, 11008, 32000, 4096));
  const bool large_ok = std::fabs(double(large) - 202e6) <= 0.01 * 202e6;
  int mismatches = 0, compared = 0;
  auto expect_eq = [&](int64_t a, int64_t b) {
    ++compared;
    mismatches += a != b;
  };
  auto nonembed_enumerated = [](const TransformerTrunk<float>& t) {
    int64_t n = 0;
    for (const auto& [path, x] : t.parameters().entries()) {
      if (path != "embed" && path != "lm_head") n += x.numel();
    }
    return n;
  };
  const ModelConfig toy;
  const auto trunk = TransformerTrunk<float>::random(toy, 2);
  std::vector<ModelConfig> configs = {toy};
  for (double r : {0.75, 0.5, 0.25}) {
    configs.push_back(depth_prune(toy, r));
    configs.push_back(width_prune(toy, r));
  }
  for (const auto& c : configs) {
    const TransformerTrunk<float> t(c);
    expect_eq(count_params(c, false), nonembed_enumerated(t));
    expect_eq(count_params(c, true), t.parameters().total_elements());
    expect_eq(decoder_layer_params(c), t.layer(1).param_count());
  }
  for (BalconyVariant variant : {BalconyVariant::decoder, BalconyVariant::mlp_only, BalconyVariant::attn_only}) {
    const BalconySet<float> set(attach_balconies(trunk, toy_exits(), InitMode::from_last_layer, variant, 0));
    const ParamGroup<float> tp = trunk.parameters();
    for (int j : {2, 4, 6, 8}) {
      int64_t enumerated = 0;
      for (const auto& [path, t] : tp.entries()) {
        if (j == 8) {
          if (path != "embed" && path != "lm_head") enumerated += t.numel();
          continue;
        }
        for (int i = 1; i <= j; ++i) {
          if (path.rfind("layers." + std::to_string(i) + ".", 0) == 0) enumerated += t.numel();
        }
      }
      if (j < 8) {
        for (const auto& [path, t] : set.at(j).parameters().entries()) enumerated += t.numel();
      }
      expect_eq(make_submodel(trunk, set, j).nonembed_param_count(), enumerated);
    }
  }
  Verdict v;
  v.pass = large_ok && mismatches == 0;
  v.detail = strf("4096/11008 layer = %lld (%.2fM, %+.2f%% vs 202M); toy counts %d/%d equal enumeration",
                  static_cast<long long>(large), large / 1e6, 100.0 * (large / 202e6 - 1.0), compared - mismatches,
                  compared);
  return v;
}

// ---------------------------------------------------------------- 11

bool groups_equal(const ParamGroup<float>& a, const ParamGroup<float>& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [path, t] : a.entries()) {
    if (!b.contains(path) || !t.bitwise_equal(b.at(path))) return false;
  }
  return true;
}

Verdict checkpoint_round_trip(const World& w) {
  const fs::path dir = w.dir;
  auto p = [&](const char* name) { return (dir / name).string(); };
  int passed = 0, total = 0;
  auto record = [&](bool ok) {
    ++total;
    passed += ok;
  };

  save_trunk(p("trunk.blcn"), w.distilled_trunk);
  const auto trunk = load_trunk<float>(p("trunk.blcn"));
  record(groups_equal(trunk.parameters(), w.distilled_trunk.parameters()) && trunk.config() == ModelConfig{});
  save_trunk(p("trunk2.blcn"), trunk);
  record(read_file(p("trunk.blcn")) == read_file(p("trunk2.blcn")));

  save_balcony(p("b4.blcn"), w.balconies.at(4), trunk.config());
  const auto b4 = load_balcony(p("b4.blcn"), trunk);
  record(groups_equal(b4.parameters(), w.balconies.at(4).parameters()) && b4.exit_layer == 4);

  save_bundle(p("bundle.blcn"), w.distilled_trunk, w.balconies);
  const auto [bt, bs] = load_bundle<float>(p("bundle.blcn"));
  record(groups_equal(bt.parameters(), w.distilled_trunk.parameters()) &&
         groups_equal(bs.parameters(), w.balconies.parameters()));
  save_bundle(p("bundle2.blcn"), bt, bs);
  record(read_file(p("bundle.blcn")) == read_file(p("bundle2.blcn")));

  // Train a balcony in a child process from the saved trunk; the parent
  // reloads both files and must reproduce the child's submodel logits.
  const TokenBatch probe = w.probe;
  const pid_t child = ::fork();
  if (child == 0) {
    auto t = load_trunk<float>(p("trunk.blcn"));
    BalconySet<float> set(attach_balconies(t, ExitPointSet({4}, 8), InitMode::from_last_layer,
                                           BalconyVariant::decoder, 0));
    TrainConfig cfg;
    cfg.steps = 20;
    cfg.batch_size = 4;
    cfg.seed = 9;
    const SyntheticCorpus corpus;
    train(cfg, t, set, corpus, heldout_batches(corpus, 1, 4, 64));
    save_balcony(p("child.blcn"), set.at(4), t.config());
    NoGradScope<float> no_grad;
    const Tensor<float> logits = make_submodel(t, set, 4).forward(probe);
    std::ofstream out(p("child.logits"), std::ios::binary);
    out.write(reinterpret_cast<const char*>(logits.data().data()),
              static_cast<std::streamsize>(logits.data().size() * sizeof(float)));
    out.close();
    ::_exit(out ? 0 : 1);
  }
  int status = -1;
  if (child > 0) ::waitpid(child, &status, 0);
  bool cross = child > 0 && WIFEXITED(status) && WEXITSTATUS(status) == 0;
  if (cross) {
    BalconySet<float> set;
    set.install(load_balcony(p("child.blcn"), trunk));
    NoGradScope<float> no_grad;
    const Tensor<float> logits = make_submodel(trunk, set, 4).forward(probe);
    const auto bytes = read_file(p("child.logits"));
    cross = bytes.size() == logits.data().size() * sizeof(float) &&
            std::memcmp(bytes.data(), logits.data().data(), bytes.size()) == 0;
  }
  record(cross);
  Verdict v;
  v.pass = passed == total;
  v.detail = strf("%d/%d round-trip checks (trunk, balcony, bundle, re-encode bytes, cross-process logits)", passed, total);
  return v;
}

}  // namespace
}  // namespace balcony

// Criterion ids on the command line select a subset; none runs everything.
int main(int argc, char** argv) {
  using namespace balcony;
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  auto wanted = [&](std::initializer_list<int> ids) {
    if (selected.empty()) return true;
    for (int id : ids) {
      if (selected.count(id)) return true;
    }
    return false;
  };
  World& w = world();
  w.dir = fs::temp_directory_path() / ("balcony_accept_" + std::to_string(::getpid()));
  fs::create_directories(w.dir);

  std::map<int, std::pair<std::string, Verdict>> results;
  auto run = [&](int id, const std::string& name, const std::function<Verdict()>& fn) {
    if (!wanted({id})) return;
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    std::printf("%s criterion %d (%s): %s\n", v.pass ? "PASS" : "FAIL", id, name.c_str(), v.detail.c_str());
    std::fflush(stdout);
    results[id] = {name, v};
  };

  run(4, "gradient correctness", [] { return gradient_correctness(); });
  run(10, "parameter accounting", [] { return parameter_accounting(); });
  run(2, "gradient isolation", [&] { return gradient_isolation(w); });
  run(7, "depth vs width speedup", [] { return depth_vs_width(); });

  std::optional<Verdict> trend;
  if (wanted({1, 3, 5, 6, 8, 9, 11})) {
    pretrain(w);
    run(3, "initialization contract", [&] { return initialization_contract(w); });
  }
  if (wanted({1, 5, 8, 9, 11})) {
    run_distillation(w);
    run(1, "freeze invariance", [&] { return freeze_invariance(w); });
    run(5, "distillation efficacy", [&] { return distillation_efficacy(w); });
    trend = moving_average_trend(w);
    std::printf("%s training check, not a criterion (KL moving average trend): %s\n", trend->pass ? "PASS" : "FAIL",
                trend->detail.c_str());
    run(9, "cache and swap", [&] { return cache_and_swap(w); });
    run(8, "latency monotonicity", [&] { return latency_monotonicity(w); });
    run(11, "checkpoint round trip", [&] { return checkpoint_round_trip(w); });
  }
  run(6, "ablation directions", [&] { return ablation_directions(w); });

  std::printf("\nsummary\n");
  int failed = 0;
  for (const auto& [id, r] : results) {
    std::printf("%s criterion %d: %s\n", r.second.pass ? "PASS" : "FAIL", id, r.first.c_str());
    failed += !r.second.pass;
  }
  if (trend) std::printf("%s training check: KL moving average trend\n", trend->pass ? "PASS" : "FAIL");
  fs::remove_all(w.dir);
  return failed == 0 ? 0 : 1;
}
