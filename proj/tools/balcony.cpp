// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0
//
// balcony: pretrain, distill, generate, bench, ablate and eval subcommands.
//
// Exit codes: 0 success, 1 other failure, 2 config error, 3 freeze
// violation, 4 infeasible budget, 5 I/O or format error.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>

#include "balcony/checkpoint.hpp"
#include "balcony/experiment.hpp"
#include "balcony/inference.hpp"
#include "balcony/kernels.hpp"
#include "balcony/prune.hpp"
#include "balcony/runconfig.hpp"

namespace fs = std::filesystem;
using namespace balcony;

namespace {

struct Common {
  std::string config_path;
  std::optional<uint64_t> seed;
  std::optional<std::string> exits;
  std::optional<int64_t> steps;
  std::string out = ".";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "run config file");
  cmd->add_option("--seed", c.seed, "overrides train.seed");
  cmd->add_option("--exits", c.exits, "comma list of exit layers, overrides exits.layers");
  cmd->add_option("--steps", c.steps, "overrides train.steps");
  cmd->add_option("--out", c.out, "output directory");
}

RunConfig resolve_config(const Common& c) {
  RunConfig rc = c.config_path.empty() ? RunConfig::parse("") : RunConfig::load(c.config_path);
  if (c.seed) rc.train.seed = *c.seed;
  if (c.exits) rc.exits.layers = parse_int_list(*c.exits);
  if (c.steps) rc.train.steps = *c.steps;
  return rc;
}

std::string out_path(const Common& c, const std::string& name) {
  fs::create_directories(c.out);
  return (fs::path(c.out) / name).string();
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string hex(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

CsvTable loss_table(const TrainReport& r) {
  CsvTable t{{"step", "exit", "loss", "lr", "tokens"}, {}};
  for (const auto& l : r.losses) {
    t.rows.push_back({std::to_string(l.step), std::to_string(l.exit_layer), fmt(l.loss), fmt(l.lr),
                      std::to_string(l.tokens)});
  }
  return t;
}

CsvTable eval_table(const TrainReport& r) {
  CsvTable t{{"step", "exit", "heldout_kl", "heldout_ce"}, {}};
  for (const auto& e : r.evals) {
    for (const auto& [j, ce] : e.metrics.ce) {
      const auto kl = e.metrics.kl.find(j);
      t.rows.push_back({std::to_string(e.step), std::to_string(j),
                        kl == e.metrics.kl.end() ? "" : fmt(kl->second), fmt(ce)});
    }
    t.rows.push_back({std::to_string(e.step), "full", "0.000000", fmt(e.metrics.full_ce)});
  }
  return t;
}

std::vector<LmBatch> heldout_for(const SyntheticCorpus& corpus, const RunConfig& rc) {
  return heldout_batches(corpus, 4, rc.train.batch_size, rc.train.seq_len);
}

// A trunk from either a trunk checkpoint or a bundle, plus the bundle's
// balconies when present.
std::pair<TransformerTrunk<float>, BalconySet<float>> load_model(const std::string& path) {
  const CheckpointHeader h = read_checkpoint_header(path);
  if (h.kind == CheckpointKind::full_bundle) return load_bundle<float>(path);
  if (h.kind == CheckpointKind::trunk) return {load_trunk<float>(path), BalconySet<float>{}};
  throw FormatError("'" + path + "' holds a " + to_string(h.kind) + " checkpoint, expected trunk or bundle");
}

int cmd_pretrain(const Common& c, const std::string& mode) {
  RunConfig rc = resolve_config(c);
  if (mode == "plain") {
    rc.train.loss_mode = LossMode::ce_joint_avg;
    rc.exits.layers.clear();
  } else if (mode == "joint") {
    rc.train.loss_mode = LossMode::ce_joint_avg;
  } else if (mode == "sorted") {
    rc.train.loss_mode = LossMode::sorted_avg;
  } else if (!mode.empty()) {
    throw ConfigError("--mode must be plain, joint or sorted");
  }
  if (rc.train.loss_mode != LossMode::ce_joint_avg && rc.train.loss_mode != LossMode::sorted_avg) {
    throw ConfigError("pretrain needs train.loss_mode ce_joint_avg or sorted_avg (or --mode)");
  }
  rc.train.freeze_trunk = false;
  rc.validate();
  const SyntheticCorpus corpus;
  auto trunk = TransformerTrunk<float>::random(rc.model, rc.train.seed);
  const ExitPointSet exits = rc.exit_points();
  BalconySet<float> set;
  const bool joint = rc.train.loss_mode == LossMode::ce_joint_avg && !exits.empty();
  if (joint) {
    set = BalconySet<float>(attach_balconies(trunk, exits, rc.exits.init_mode, rc.exits.variant,
                                             mix_seed(rc.train.seed, 77)));
  }
  const TrainReport report = train(rc.train, trunk, set, corpus, heldout_for(corpus, rc),
                                   rc.train.loss_mode == LossMode::sorted_avg ? exits : ExitPointSet{});
  trunk.set_frozen(true);
  const std::string ckpt = out_path(c, joint ? "bundle.blcn" : "trunk.blcn");
  if (joint) {
    save_bundle(ckpt, trunk, set);
  } else {
    save_trunk(ckpt, trunk);
  }
  write_csv(out_path(c, "pretrain.csv"), loss_table(report), rc.hash(), rc.train.seed);
  write_csv(out_path(c, "pretrain_eval.csv"), eval_table(report), rc.hash(), rc.train.seed);
  write_text(out_path(c, "config.ini"), rc.normalized());
  if (!report.evals.empty()) {
    std::printf("held-out full CE %.4f -> %.4f\n", report.initial().full_ce, report.final().full_ce);
  }
  std::printf("tokens %lld  wall %.1fs  wrote %s\n", static_cast<long long>(report.tokens),
              report.wall_seconds, ckpt.c_str());
  return 0;
}

int cmd_distill(const Common& c, const std::string& trunk_path, const std::string& variant_name) {
  RunConfig rc = resolve_config(c);
  if (rc.train.loss_mode != LossMode::kl_only && rc.train.loss_mode != LossMode::kl_plus_ce) {
    rc.train.loss_mode = LossMode::kl_only;
  }
  rc.train.freeze_trunk = true;
  if (!variant_name.empty()) {
    switch (parse_ablation(variant_name)) {
      case Ablation::standard: break;
      case Ablation::random_init: rc.exits.init_mode = InitMode::random; break;
      case Ablation::mlp_only: rc.exits.variant = BalconyVariant::mlp_only; break;
      case Ablation::attn_only: rc.exits.variant = BalconyVariant::attn_only; break;
      case Ablation::kl_plus_ce: rc.train.loss_mode = LossMode::kl_plus_ce; break;
      default: throw ConfigError("distill --variant takes standard, random_init, mlp_only, attn_only or kl_plus_ce");
    }
  }
  auto [trunk, unused] = load_model(trunk_path);
  rc.model = trunk.config();
  rc.validate();
  const ExitPointSet exits = rc.exit_points();
  if (exits.empty()) throw ConfigError("distill needs at least one exit (--exits)");
  const SyntheticCorpus corpus;
  BalconySet<float> set(attach_balconies(trunk, exits, rc.exits.init_mode, rc.exits.variant,
                                         mix_seed(rc.train.seed, 77)));
  const DistillRun run = distill(rc.train, trunk, set, corpus, heldout_for(corpus, rc), probe_batch(corpus));
  for (const auto& [j, m] : set.modules()) save_balcony(out_path(c, "balcony_" + std::to_string(j) + ".blcn"), m, trunk.config());
  save_bundle(out_path(c, "bundle.blcn"), trunk, set);
  write_csv(out_path(c, "distill.csv"), loss_table(run.report), rc.hash(), rc.train.seed);
  write_csv(out_path(c, "distill_eval.csv"), eval_table(run.report), rc.hash(), rc.train.seed);
  write_text(out_path(c, "config.ini"), rc.normalized());
  std::printf("probe logits hash %s -> %s (unchanged)\n", hex(run.probe_before).c_str(), hex(run.probe_after).c_str());
  for (int j : exits.layers()) {
    std::printf("exit %d  held-out KL %.4f -> %.4f  CE %.4f -> %.4f\n", j, run.report.initial().kl.at(j),
                run.report.final().kl.at(j), run.report.initial().ce.at(j), run.report.final().ce.at(j));
  }
  std::printf("full model CE %.4f\n", run.report.final().full_ce);
  return 0;
}

struct GenerateArgs {
  std::string bundle;
  std::string prompt;
  std::string budget;
  std::optional<int> exit;
  std::optional<int64_t> max_params;
  int64_t max_new = 64;
  bool sample = false;
  double temperature = 1.0;
  uint64_t seed = 0;
  bool no_cache = false;
};

int cmd_generate(const GenerateArgs& a) {
  const auto [trunk, set] = load_model(a.bundle);
  BudgetSpec budget = a.budget.empty() ? BudgetSpec::full() : BudgetSpec::parse(a.budget);
  if (a.exit) budget = BudgetSpec::exit(*a.exit);
  if (a.max_params) budget = BudgetSpec::max_params(*a.max_params);
  const InferenceEngine<float> engine(trunk, set);
  GenerationParams p;
  p.max_new_tokens = a.max_new;
  p.mode = a.sample ? DecodeMode::sample : DecodeMode::greedy;
  p.temperature = a.temperature;
  p.seed = a.seed;
  p.use_cache = !a.no_cache;
  if (a.prompt.empty()) throw ConfigError("--prompt must be non-empty");
  const SubmodelInfo info = resolve_budget(budget, engine.available());
  const auto out = generate(engine, TokenBatch::from_text(a.prompt), budget, p);
  std::fprintf(stderr, "submodel %s (%lld non-embedding params)\n", info.name().c_str(),
               static_cast<long long>(info.nonembed_param_count));
  std::cout << a.prompt << tokens_to_text(out[0]) << "\n";
  return 0;
}

int cmd_bench(const Common& c, const std::string& bundle, const std::optional<std::string>& axis,
              const std::optional<std::string>& ratios) {
  RunConfig rc = resolve_config(c);
  if (axis) {
    rc.bench.axes = *axis == "both" ? std::vector<PruneAxis>{PruneAxis::depth, PruneAxis::width}
                                    : std::vector<PruneAxis>{parse_prune_axis(*axis)};
  }
  if (ratios) rc.bench.ratios = parse_real_list(*ratios);
  std::optional<std::pair<TransformerTrunk<float>, BalconySet<float>>> model;
  if (!bundle.empty()) {
    model.emplace(load_model(bundle));
    rc.model = model->first.config();
  }
  rc.validate();
  const SweepReport rep = run_sweep(rc.model, rc.bench.ratios, rc.bench.axes, rc.bench.latency, rc.train.seed);
  write_csv(out_path(c, "sweep.csv"), {rep.csv_header(), rep.csv_rows()}, rc.hash(), rc.train.seed);
  write_text(out_path(c, "sweep.dat"), rep.gnuplot());
  for (const auto& row : rep.csv_rows()) {
    std::printf("%-6s target %-6s achieved %-9s median %ss speedup %s\n", row[0].c_str(), row[1].c_str(),
                row[2].c_str(), row[3].c_str(), row[4].c_str());
  }
  if (rc.bench.axes.size() == 2) {
    bool all = true;
    for (double r : rc.bench.ratios) {
      all = all && rep.find(PruneAxis::depth, r).speedup_vs_base >= rep.find(PruneAxis::width, r).speedup_vs_base;
    }
    std::printf("depth >= width speedup at every ratio: %s\n", all ? "yes" : "no");
  }
  if (model && !model->second.empty()) {
    const InferenceEngine<float> engine(model->first, model->second);
    std::vector<LatencyTarget<float>> targets;
    for (const auto& h : engine.available()) targets.push_back({&engine, BudgetSpec::exit(h.exit_layer)});
    const auto reps = measure_latencies(targets, rc.bench.latency);
    const double full = reps.back().median_s;
    CsvTable t{{"handle", "exit_layer", "nonembed_params", "median_latency", "speedup_vs_full", "tokens_per_s"}, {}};
    for (const auto& r : reps) {
      t.rows.push_back({r.handle, std::to_string(r.exit_layer), std::to_string(r.nonembed_params), fmt(r.median_s),
                        fmt(full / r.median_s), fmt(r.tokens_per_s)});
      std::printf("%-8s median %.6fs speedup %.3f\n", r.handle.c_str(), r.median_s, full / r.median_s);
    }
    write_csv(out_path(c, "handles.csv"), t, rc.hash(), rc.train.seed);
  }
  return 0;
}

int cmd_ablate(const Common& c, const std::string& trunk_path, const std::string& variant_name) {
  RunConfig rc = resolve_config(c);
  const Ablation variant = parse_ablation(variant_name);
  auto [trunk, unused] = load_model(trunk_path);
  rc.model = trunk.config();
  rc.train.loss_mode = LossMode::kl_only;
  rc.train.freeze_trunk = true;
  rc.validate();
  const ExitPointSet exits = rc.exit_points();
  if (exits.empty()) throw ConfigError("ablate needs at least one exit (--exits)");
  const SyntheticCorpus corpus;
  const auto heldout = heldout_for(corpus, rc);
  const TokenBatch probe = probe_batch(corpus);
  CsvTable t{{"variant", "exit", "heldout_kl_init", "heldout_kl_final", "heldout_ce_final", "full_ce_final",
              "probe_changed", "balcony_params"},
             {}};
  std::vector<Ablation> runs = {Ablation::standard};
  if (variant != Ablation::standard) runs.push_back(variant);
  for (Ablation a : runs) {
    const AblationResult r = run_ablation(a, trunk, exits, rc.train, corpus, heldout, probe);
    for (int j : exits.layers()) {
      t.rows.push_back({to_string(a), std::to_string(j), fmt(r.initial.kl.at(j)), fmt(r.final.kl.at(j)),
                        fmt(r.final.ce.at(j)), fmt(r.final.full_ce), r.probe_changed ? "yes" : "no",
                        std::to_string(r.balcony_params)});
      std::printf("%-12s exit %d  KL %.4f -> %.4f  CE %.4f  full CE %.4f%s\n", to_string(a).c_str(), j,
                  r.initial.kl.at(j), r.final.kl.at(j), r.final.ce.at(j), r.final.full_ce,
                  r.probe_changed ? "  (full model changed)" : "");
    }
  }
  write_csv(out_path(c, "ablate_" + variant_name + ".csv"), t, rc.hash(), rc.train.seed);
  return 0;
}

int cmd_eval(const Common& c, const std::string& bundle) {
  RunConfig rc = resolve_config(c);
  const auto [trunk, set] = load_model(bundle);
  rc.model = trunk.config();
  rc.validate();
  const SyntheticCorpus corpus;
  const EvalMetrics m = evaluate(trunk, set, heldout_for(corpus, rc));
  CsvTable t{{"handle", "heldout_kl", "heldout_ce"}, {}};
  for (const auto& [j, ce] : m.ce) {
    t.rows.push_back({"exit:" + std::to_string(j), fmt(m.kl.at(j)), fmt(ce)});
    std::printf("exit:%d  KL %.4f  CE %.4f\n", j, m.kl.at(j), ce);
  }
  t.rows.push_back({"full", "0.000000", fmt(m.full_ce)});
  std::printf("full    CE %.4f\n", m.full_ce);
  std::printf("probe_logits_hash=%s\n", hex(logits_hash(trunk, probe_batch(corpus))).c_str());
  write_csv(out_path(c, "eval.csv"), t, rc.hash(), rc.train.seed);
  return 0;
}

void apply_thread_env() {
  if (const char* env = std::getenv("BALCONY_THREADS")) {
    const int n = std::atoi(env);
    if (n < 1) throw ConfigError("BALCONY_THREADS must be a positive integer");
    kernels::set_thread_count(n);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Balcony: frozen-trunk dynamic-depth inference toolkit"};
  app.require_subcommand(1);

  Common pre, dis, ben, abl, evl;
  std::string mode, trunk_path, variant, bundle, abl_trunk, abl_variant, eval_bundle, bench_bundle;
  std::optional<std::string> axis, ratios;
  GenerateArgs gen;

  auto* p = app.add_subcommand("pretrain", "train a trunk from scratch (plain, joint or sorted)");
  add_common(p, pre);
  p->add_option("--mode", mode, "plain | joint | sorted (default: train.loss_mode)");

  auto* d = app.add_subcommand("distill", "attach balconies to a frozen trunk and distill them");
  add_common(d, dis);
  d->add_option("--trunk", trunk_path, "trunk or bundle checkpoint")->required();
  d->add_option("--variant", variant, "standard | random_init | mlp_only | attn_only | kl_plus_ce");

  auto* g = app.add_subcommand("generate", "decode a continuation under a budget");
  g->add_option("--bundle", gen.bundle, "bundle or trunk checkpoint")->required();
  g->add_option("--prompt", gen.prompt, "prompt text")->required();
  g->add_option("--budget", gen.budget, "full | exit:J | params:N | speedup:X");
  g->add_option("--exit", gen.exit, "same as --budget exit:J");
  g->add_option("--max-params", gen.max_params, "same as --budget params:N");
  g->add_option("--max-new", gen.max_new, "tokens to generate");
  g->add_flag("--sample", gen.sample, "sample instead of greedy decoding");
  g->add_option("--temperature", gen.temperature, "sampling temperature");
  g->add_option("--seed", gen.seed, "sampling seed");
  g->add_flag("--no-cache", gen.no_cache, "recompute the full prefix every token");

  auto* b = app.add_subcommand("bench", "depth vs width latency sweep");
  add_common(b, ben);
  b->add_option("--bundle", bench_bundle, "optional bundle; also times every submodel");
  b->add_option("--axis", axis, "depth | width | both");
  b->add_option("--ratios", ratios, "comma list of parameter ratios");

  auto* a = app.add_subcommand("ablate", "run one ablation variant next to the standard recipe");
  add_common(a, abl);
  a->add_option("--trunk", abl_trunk, "trunk or bundle checkpoint")->required();
  a->add_option("--variant", abl_variant, "random_init | mlp_only | attn_only | kl_plus_ce | unfrozen | sorted")
      ->required();

  auto* e = app.add_subcommand("eval", "held-out metrics and probe fingerprint");
  add_common(e, evl);
  e->add_option("--bundle", eval_bundle, "bundle or trunk checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : 2;
  }

  try {
    apply_thread_env();
    if (*p) return cmd_pretrain(pre, mode);
    if (*d) return cmd_distill(dis, trunk_path, variant);
    if (*g) return cmd_generate(gen);
    if (*b) return cmd_bench(ben, bench_bundle, axis, ratios);
    if (*a) return cmd_ablate(abl, abl_trunk, abl_variant);
    if (*e) return cmd_eval(evl, eval_bundle);
  } catch (const ConfigError& err) {
    std::fprintf(stderr, "config error: %s\n", err.what());
    return 2;
  } catch (const FreezeViolation& err) {
    std::fprintf(stderr, "freeze violation: %s\n", err.what());
    return 3;
  } catch (const BudgetError& err) {
    std::fprintf(stderr, "budget error: %s\n", err.what());
    return 4;
  } catch (const IoError& err) {
    std::fprintf(stderr, "i/o error: %s\n", err.what());
    return 5;
  } catch (const FormatError& err) {
    std::fprintf(stderr, "format error: %s\n", err.what());
    return 5;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 1;
  }
  return 1;
}
