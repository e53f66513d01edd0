// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0

#include "balcony/runconfig.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "balcony/checkpoint.hpp"
#include "balcony/hash.hpp"

namespace balcony {

namespace {

using Section = std::map<std::string, std::string>;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string join(const std::vector<std::string>& parts) {
  std::string s;
  for (const auto& p : parts) s += (s.empty() ? "" : ",") + p;
  return s;
}

std::string fmt_real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::vector<std::string> keys_of(const std::vector<std::pair<std::string, std::string>>& kv) {
  std::vector<std::string> out;
  for (const auto& [k, v] : kv) out.push_back(k);
  return out;
}

const std::vector<std::string>& exits_keys() {
  static const std::vector<std::string> k = {"layers", "init_mode", "variant"};
  return k;
}

const std::vector<std::string>& bench_keys() {
  static const std::vector<std::string> k = {"prompt_len", "gen_len", "batch", "repeats",
                                             "warmup",     "seed",    "ratios", "axis"};
  return k;
}

// Re-throws any error from `fn` as a ConfigError prefixed with the section.
template <typename F>
auto in_section(const std::string& section, F&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    throw ConfigError("[" + section + "] " + e.what());
  } catch (const Error& e) {
    throw ConfigError("[" + section + "] " + e.what());
  }
}

int64_t int_value(const Section& s, const std::string& key, int64_t fallback) {
  auto it = s.find(key);
  if (it == s.end()) return fallback;
  size_t used = 0;
  int64_t v = 0;
  try {
    v = std::stoll(it->second, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != it->second.size()) {
    throw ConfigError(key + ": expected an integer, got '" + it->second + "'");
  }
  return v;
}

}  // namespace

std::vector<double> parse_real_list(const std::string& text) {
  std::vector<double> out;
  for (const auto& item : split(text)) {
    size_t used = 0;
    double v = 0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw ConfigError("'" + item + "' is not a number");
    out.push_back(v);
  }
  return out;
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  for (const auto& item : split(text)) {
    size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw ConfigError("'" + item + "' is not an integer");
    out.push_back(v);
  }
  return out;
}

RunConfig RunConfig::parse(const std::string& text) {
  const std::map<std::string, std::vector<std::string>> known = {
      {"model", keys_of(ModelConfig{}.to_kv())},
      {"train", keys_of(TrainConfig{}.to_kv())},
      {"exits", exits_keys()},
      {"bench", bench_keys()},
  };
  std::map<std::string, Section> sections;
  std::string current;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "unterminated section header");
      current = trim(line.substr(1, line.size() - 2));
      if (!known.count(current)) throw ConfigError(where + "unknown section [" + current + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    if (current.empty()) throw ConfigError(where + "key outside any section");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    const auto& allowed = known.at(current);
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError(where + "unknown key " + current + "." + key);
    }
    if (!sections[current].emplace(key, value).second) {
      throw ConfigError(where + "duplicate key " + current + "." + key);
    }
  }

  RunConfig rc;
  rc.model = in_section("model", [&] { return ModelConfig::from_kv(sections["model"]); });
  rc.train = in_section("train", [&] { return TrainConfig::from_kv(sections["train"]); });
  in_section("exits", [&] {
    const Section& s = sections["exits"];
    if (auto it = s.find("layers"); it != s.end()) rc.exits.layers = parse_int_list(it->second);
    if (auto it = s.find("init_mode"); it != s.end()) rc.exits.init_mode = parse_init_mode(it->second);
    if (auto it = s.find("variant"); it != s.end()) rc.exits.variant = parse_variant(it->second);
    return 0;
  });
  in_section("bench", [&] {
    const Section& s = sections["bench"];
    LatencyParams& lp = rc.bench.latency;
    lp.prompt_len = int_value(s, "prompt_len", lp.prompt_len);
    lp.gen_len = int_value(s, "gen_len", lp.gen_len);
    lp.batch = int_value(s, "batch", lp.batch);
    lp.repeats = static_cast<int>(int_value(s, "repeats", lp.repeats));
    lp.warmup = static_cast<int>(int_value(s, "warmup", lp.warmup));
    lp.seed = static_cast<uint64_t>(int_value(s, "seed", static_cast<int64_t>(lp.seed)));
    if (auto it = s.find("ratios"); it != s.end()) rc.bench.ratios = parse_real_list(it->second);
    if (auto it = s.find("axis"); it != s.end()) {
      if (it->second == "both") {
        rc.bench.axes = {PruneAxis::depth, PruneAxis::width};
      } else {
        rc.bench.axes = {parse_prune_axis(it->second)};
      }
    }
    return 0;
  });
  rc.validate();
  return rc;
}

RunConfig RunConfig::load(const std::string& path) {
  const std::vector<uint8_t> bytes = read_file(path);
  return parse(std::string(bytes.begin(), bytes.end()));
}

void RunConfig::validate() const {
  in_section("model", [&] {
    model.validate();
    return 0;
  });
  in_section("train", [&] {
    train.validate();
    if (train.seq_len > model.max_seq_len) throw ConfigError("seq_len exceeds model max_seq_len");
    return 0;
  });
  in_section("exits", [&] { return exit_points().size(); });
  in_section("bench", [&] {
    const LatencyParams& lp = bench.latency;
    if (lp.prompt_len < 1 || lp.gen_len < 0 || lp.batch < 1) throw ConfigError("lengths must be positive");
    if (lp.repeats < 1 || lp.warmup < 0) throw ConfigError("repeats must be positive, warmup non-negative");
    if (lp.prompt_len + lp.gen_len > model.max_seq_len) {
      throw ConfigError("prompt_len + gen_len exceeds model max_seq_len");
    }
    for (double r : bench.ratios) {
      if (!(r > 0.0 && r <= 1.0)) throw ConfigError("ratio " + fmt_real(r) + " outside (0, 1]");
    }
    if (bench.axes.empty()) throw ConfigError("axis must be depth, width or both");
    return 0;
  });
}

ExitPointSet RunConfig::exit_points() const {
  return ExitPointSet(exits.layers, static_cast<int>(model.n_layers));
}

std::string RunConfig::normalized() const {
  std::ostringstream os;
  auto section = [&](const std::string& name, const std::vector<std::pair<std::string, std::string>>& kv) {
    os << '[' << name << "]\n";
    for (const auto& [k, v] : kv) os << k << " = " << v << '\n';
  };
  section("model", model.to_kv());
  os << '\n';
  section("train", train.to_kv());
  os << '\n';
  std::vector<std::string> layers;
  for (int j : exits.layers) layers.push_back(std::to_string(j));
  section("exits", {{"layers", join(layers)},
                    {"init_mode", to_string(exits.init_mode)},
                    {"variant", to_string(exits.variant)}});
  os << '\n';
  std::vector<std::string> ratios;
  for (double r : bench.ratios) ratios.push_back(fmt_real(r));
  const LatencyParams& lp = bench.latency;
  section("bench", {{"prompt_len", std::to_string(lp.prompt_len)},
                    {"gen_len", std::to_string(lp.gen_len)},
                    {"batch", std::to_string(lp.batch)},
                    {"repeats", std::to_string(lp.repeats)},
                    {"warmup", std::to_string(lp.warmup)},
                    {"seed", std::to_string(lp.seed)},
                    {"ratios", join(ratios)},
                    {"axis", bench.axes.size() == 2 ? "both" : to_string(bench.axes.front())}});
  return os.str();
}

std::string RunConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(normalized())));
  return buf;
}

std::string to_csv(const CsvTable& table, const std::string& config_hash, uint64_t seed) {
  auto field = [](const std::string& f) {
    if (f.find_first_of(",\"\n") == std::string::npos) return f;
    std::string q = "\"";
    for (char c : f) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
  };
  auto row = [&](const std::vector<std::string>& r) {
    std::string line;
    for (size_t i = 0; i < r.size(); ++i) line += (i ? "," : "") + field(r[i]);
    return line + "\n";
  };
  std::string out = "# config_hash=" + config_hash + " seed=" + std::to_string(seed) + "\n";
  out += row(table.header);
  for (const auto& r : table.rows) {
    if (r.size() != table.header.size()) throw DimensionError("csv row width differs from header");
    out += row(r);
  }
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  write_file_atomic(path, std::vector<uint8_t>(text.begin(), text.end()));
}

void write_csv(const std::string& path, const CsvTable& table, const std::string& config_hash,
               uint64_t seed) {
  write_text(path, to_csv(table, config_hash, seed));
}

}  // namespace balcony
