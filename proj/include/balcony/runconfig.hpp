// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0
//
// Run configuration files and CSV reports.
//
// A run config is an INI-style document with sections [model], [train],
// [exits] and [bench]. Lines are `key = value`; `#` starts a comment.
// Unknown sections or keys are errors.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "balcony/balcony.hpp"
#include "balcony/prune.hpp"
#include "balcony/train.hpp"

namespace balcony {

struct ExitsConfig {
  std::vector<int> layers = {2, 4, 6};
  InitMode init_mode = InitMode::from_last_layer;
  BalconyVariant variant = BalconyVariant::decoder;
};

struct BenchConfig {
  LatencyParams latency;
  std::vector<double> ratios = {0.75, 0.5, 0.25};
  std::vector<PruneAxis> axes = {PruneAxis::depth, PruneAxis::width};
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  ExitsConfig exits;
  BenchConfig bench;

  // Throws ConfigError naming "section.key" for unknown keys, malformed
  // values and failed validation.
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::string& path);

  void validate() const;
  ExitPointSet exit_points() const;

  // Every key of every section in canonical order; parse(normalized())
  // reproduces the same text.
  std::string normalized() const;
  // FNV-1a of normalized(), 16 hex digits.
  std::string hash() const;
};

std::vector<double> parse_real_list(const std::string& text);
std::vector<int> parse_int_list(const std::string& text);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

// "# config_hash=<hash> seed=<seed>", the header row, then the rows.
// Fields containing commas, quotes or newlines are quoted.
std::string to_csv(const CsvTable& table, const std::string& config_hash, uint64_t seed);
void write_csv(const std::string& path, const CsvTable& table, const std::string& config_hash,
               uint64_t seed);
void write_text(const std::string& path, const std::string& text);

}  // namespace balcony
