// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0

#include "balcony/checkpoint.hpp"

#include <unistd.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "balcony/hash.hpp"

namespace balcony {

namespace {

constexpr char kMagic[4] = {'B', 'L', 'C', 'N'};

size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

uint64_t align_up(uint64_t v) { return (v + kPayloadAlignment - 1) / kPayloadAlignment * kPayloadAlignment; }

class Writer {
 public:
  explicit Writer(std::vector<uint8_t>& out) : out_(out) {}
  template <typename U>
  void uint(U v) {
    for (size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  void str(const std::string& s) {
    uint(static_cast<uint32_t>(s.size()));
    out_.insert(out_.end(), s.begin(), s.end());
  }

 private:
  std::vector<uint8_t>& out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<uint8_t>& in) : in_(in) {}
  template <typename U>
  U uint() {
    need(sizeof(U));
    U v = 0;
    for (size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(in_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  std::string str() {
    const uint32_t n = uint<uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  size_t pos() const { return pos_; }
  void need(size_t n) const {
    if (pos_ + n > in_.size()) throw FormatError("checkpoint header is truncated");
  }

 private:
  const std::vector<uint8_t>& in_;
  size_t pos_ = 0;
};

template <typename T>
void put_values(std::span<const T> values, uint8_t* dst) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(dst, values.data(), values.size() * sizeof(T));
  } else {
    using U = std::conditional_t<sizeof(T) == 4, uint32_t, uint64_t>;
    for (size_t i = 0; i < values.size(); ++i) {
      const U bits = std::bit_cast<U>(values[i]);
      for (size_t b = 0; b < sizeof(U); ++b) dst[i * sizeof(U) + b] = static_cast<uint8_t>(bits >> (8 * b));
    }
  }
}

template <typename T>
void get_values(const uint8_t* src, std::span<T> values) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(values.data(), src, values.size() * sizeof(T));
  } else {
    using U = std::conditional_t<sizeof(T) == 4, uint32_t, uint64_t>;
    for (size_t i = 0; i < values.size(); ++i) {
      U bits = 0;
      for (size_t b = 0; b < sizeof(U); ++b) bits |= static_cast<U>(src[i * sizeof(U) + b]) << (8 * b);
      values[i] = std::bit_cast<T>(bits);
    }
  }
}

std::map<std::string, std::string> with_prefix(const std::vector<std::pair<std::string, std::string>>& kv,
                                               const std::string& prefix) {
  std::map<std::string, std::string> out;
  for (const auto& [k, v] : kv) out[prefix + k] = v;
  return out;
}

std::map<std::string, std::string> strip_prefix(const std::map<std::string, std::string>& kv,
                                                const std::string& prefix) {
  std::map<std::string, std::string> out;
  for (const auto& [k, v] : kv) {
    if (k.rfind(prefix, 0) == 0) out[k.substr(prefix.size())] = v;
  }
  return out;
}

const std::string& manifest_at(const CheckpointHeader& h, const std::string& key) {
  auto it = h.manifest.find(key);
  if (it == h.manifest.end()) throw FormatError("checkpoint manifest lacks '" + key + "'");
  return it->second;
}

void expect_kind(const CheckpointHeader& h, CheckpointKind kind) {
  if (h.kind != kind) {
    throw FormatError("checkpoint kind is " + to_string(h.kind) + ", expected " + to_string(kind));
  }
}

int parse_int_field(const std::string& key, const std::string& v) {
  size_t used = 0;
  int out = 0;
  try {
    out = std::stoi(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw FormatError("manifest field '" + key + "' is not an integer");
  return out;
}

// Copies checkpoint tensors into the same-named destinations; the two name
// sets must match exactly.
template <typename T>
void assign_params(const ParamGroup<T>& dst, const std::map<std::string, Tensor<T>>& src,
                   const std::string& prefix) {
  size_t used = 0;
  for (const auto& [path, t] : dst.entries()) {
    auto it = src.find(prefix + path);
    if (it == src.end()) throw FormatError("checkpoint lacks tensor '" + prefix + path + "'");
    if (it->second.shape() != t.shape()) {
      throw FormatError("tensor '" + prefix + path + "' has shape " + shape_str(it->second.shape()) +
                        ", expected " + shape_str(t.shape()));
    }
    Tensor<T> target = t;
    std::copy(it->second.data().begin(), it->second.data().end(), target.mutable_data().begin());
    ++used;
  }
  size_t available = 0;
  for (const auto& [name, t] : src) available += name.rfind(prefix, 0) == 0;
  if (available != used) throw FormatError("checkpoint has unexpected tensors under '" + prefix + "'");
}

// Config recorded in a checkpoint must equal the trunk's field by field.
void check_config(const ModelConfig& recorded, const ModelConfig& trunk) {
  const std::string field = recorded.first_difference(trunk);
  if (field.empty()) return;
  std::string a, b;
  for (const auto& [k, v] : recorded.to_kv()) {
    if (k == field) a = v;
  }
  for (const auto& [k, v] : trunk.to_kv()) {
    if (k == field) b = v;
  }
  throw ConfigError("config mismatch in field '" + field + "': checkpoint has " + a + ", trunk has " + b);
}

}  // namespace

std::string to_string(CheckpointKind kind) {
  switch (kind) {
    case CheckpointKind::trunk: return "trunk";
    case CheckpointKind::balcony: return "balcony";
    case CheckpointKind::optimizer_state: return "optimizer_state";
    case CheckpointKind::full_bundle: return "full_bundle";
  }
  return "unknown";
}

template <typename T>
std::vector<uint8_t> encode_checkpoint(CheckpointKind kind,
                                       const std::map<std::string, std::string>& manifest,
                                       const NamedTensors<T>& tensors) {
  std::vector<const std::pair<std::string, Tensor<T>>*> order;
  for (const auto& e : tensors) order.push_back(&e);
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->first < b->first; });
  for (size_t i = 1; i < order.size(); ++i) {
    if (order[i]->first == order[i - 1]->first) {
      throw Error("checkpoint tensor name '" + order[i]->first + "' is not unique");
    }
  }

  // Table entries are fixed width per name, so the header size is known
  // before offsets are assigned.
  uint64_t header = 4 + 4 + 4 + 4 + 4;
  for (const auto& [k, v] : manifest) header += 8 + k.size() + v.size();
  for (const auto* e : order) header += 4 + e->first.size() + 2 + 8 * e->second.shape().size() + 16;

  std::vector<uint64_t> offsets;
  uint64_t end = align_up(header);
  for (const auto* e : order) {
    offsets.push_back(end);
    end = align_up(end + static_cast<uint64_t>(e->second.numel()) * sizeof(T));
  }
  const uint64_t file_size =
      order.empty() ? align_up(header) : offsets.back() + static_cast<uint64_t>(order.back()->second.numel()) * sizeof(T);

  std::vector<uint8_t> out;
  out.reserve(file_size);
  Writer w(out);
  out.insert(out.end(), kMagic, kMagic + 4);
  w.uint(kCheckpointVersion);
  w.uint(static_cast<uint32_t>(kind));
  w.uint(static_cast<uint32_t>(manifest.size()));
  for (const auto& [k, v] : manifest) {
    w.str(k);
    w.str(v);
  }
  w.uint(static_cast<uint32_t>(order.size()));
  for (size_t i = 0; i < order.size(); ++i) {
    const auto& [name, t] = *order[i];
    w.str(name);
    w.uint(static_cast<uint8_t>(dtype_of<T>()));
    w.uint(static_cast<uint8_t>(t.shape().size()));
    for (int64_t d : t.shape()) w.uint(static_cast<uint64_t>(d));
    w.uint(offsets[i]);
    w.uint(static_cast<uint64_t>(t.numel()) * sizeof(T));
  }
  out.resize(file_size, 0);
  for (size_t i = 0; i < order.size(); ++i) put_values<T>(order[i]->second.data(), out.data() + offsets[i]);
  return out;
}

CheckpointHeader decode_header(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 4 || !std::equal(kMagic, kMagic + 4, bytes.begin())) {
    throw FormatError("not a checkpoint: bad magic");
  }
  Reader r(bytes);
  r.need(4);
  for (int i = 0; i < 4; ++i) r.uint<uint8_t>();
  CheckpointHeader h;
  h.version = r.uint<uint32_t>();
  if (h.version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(h.version));
  }
  const uint32_t kind = r.uint<uint32_t>();
  if (kind < 1 || kind > 4) throw FormatError("unknown checkpoint kind " + std::to_string(kind));
  h.kind = static_cast<CheckpointKind>(kind);
  const uint32_t n_manifest = r.uint<uint32_t>();
  for (uint32_t i = 0; i < n_manifest; ++i) {
    std::string k = r.str();
    h.manifest[k] = r.str();
  }
  const uint32_t n_entries = r.uint<uint32_t>();
  std::set<std::string> names;
  for (uint32_t i = 0; i < n_entries; ++i) {
    EntryInfo e;
    e.name = r.str();
    if (!names.insert(e.name).second) throw FormatError("duplicate tensor name '" + e.name + "'");
    const uint8_t dtype = r.uint<uint8_t>();
    if (dtype != 1 && dtype != 2) throw FormatError("unknown dtype code " + std::to_string(dtype));
    e.dtype = static_cast<DType>(dtype);
    const uint8_t rank = r.uint<uint8_t>();
    uint64_t numel = 1;
    for (uint8_t d = 0; d < rank; ++d) {
      const uint64_t dim = r.uint<uint64_t>();
      if (dim > (uint64_t{1} << 40)) throw FormatError("tensor '" + e.name + "' has an absurd dimension");
      e.shape.push_back(static_cast<int64_t>(dim));
      numel *= dim;
    }
    e.offset = r.uint<uint64_t>();
    e.length = r.uint<uint64_t>();
    if (e.length != numel * dtype_size(e.dtype)) {
      throw FormatError("tensor '" + e.name + "' length disagrees with its shape");
    }
    h.entries.push_back(std::move(e));
  }
  const uint64_t header_end = r.pos();
  std::vector<const EntryInfo*> by_offset;
  for (const auto& e : h.entries) {
    if (e.offset % kPayloadAlignment != 0) throw FormatError("tensor '" + e.name + "' is misaligned");
    if (e.offset < header_end || e.offset > bytes.size() || e.length > bytes.size() - e.offset) {
      throw FormatError("tensor '" + e.name + "' lies outside the payload");
    }
    by_offset.push_back(&e);
  }
  std::sort(by_offset.begin(), by_offset.end(), [](auto* a, auto* b) { return a->offset < b->offset; });
  for (size_t i = 1; i < by_offset.size(); ++i) {
    if (by_offset[i - 1]->offset + by_offset[i - 1]->length > by_offset[i]->offset) {
      throw FormatError("tensors '" + by_offset[i - 1]->name + "' and '" + by_offset[i]->name + "' overlap");
    }
  }
  std::sort(h.entries.begin(), h.entries.end(), [](const EntryInfo& a, const EntryInfo& b) { return a.name < b.name; });
  return h;
}

template <typename T>
CheckpointData<T> decode_checkpoint(const std::vector<uint8_t>& bytes) {
  CheckpointData<T> out;
  out.header = decode_header(bytes);
  for (const auto& e : out.header.entries) {
    if (e.dtype != dtype_of<T>()) throw FormatError("tensor '" + e.name + "' has a different dtype");
    Tensor<T> t = Tensor<T>::zeros(e.shape);
    get_values<T>(bytes.data() + e.offset, t.mutable_data());
    out.tensors.emplace(e.name, std::move(t));
  }
  return out;
}

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  in.seekg(0, std::ios::end);
  const std::streamoff size = in.tellg();
  in.seekg(0);
  std::vector<uint8_t> bytes(static_cast<size_t>(size));
  if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), size)) {
    throw IoError("cannot read '" + path + "'");
  }
  return bytes;
}

void write_file_atomic(const std::string& path, const std::vector<uint8_t>& bytes) {
  const std::string tmp = path + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ignored;
      std::filesystem::remove(tmp, ignored);
      throw IoError("short write to '" + tmp + "'");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot rename into '" + path + "'");
  }
}

template <typename T>
void save_checkpoint(const std::string& path, CheckpointKind kind,
                     const std::map<std::string, std::string>& manifest,
                     const NamedTensors<T>& tensors) {
  write_file_atomic(path, encode_checkpoint(kind, manifest, tensors));
}

template <typename T>
CheckpointData<T> load_checkpoint(const std::string& path) {
  return decode_checkpoint<T>(read_file(path));
}

CheckpointHeader read_checkpoint_header(const std::string& path) { return decode_header(read_file(path)); }

// ---------------------------------------------------------------------------
// Typed wrappers

namespace {

template <typename T>
NamedTensors<T> named(const ParamGroup<T>& group, const std::string& prefix) {
  NamedTensors<T> out;
  for (const auto& [path, t] : group.entries()) out.emplace_back(prefix + path, t);
  return out;
}

template <typename T>
TransformerTrunk<T> trunk_from(const CheckpointData<T>& data, const std::string& prefix) {
  const ModelConfig c = ModelConfig::from_kv(strip_prefix(data.header.manifest, "model."));
  c.validate();
  TransformerTrunk<T> trunk(c);
  assign_params(trunk.parameters(), data.tensors, prefix);
  return trunk;
}

template <typename T>
BalconyModule<T> balcony_from(const CheckpointData<T>& data, const TransformerTrunk<T>& trunk,
                              const std::string& meta, const std::string& prefix, int exit_layer) {
  const BalconyVariant variant = parse_variant(manifest_at(data.header, meta + "variant"));
  const InitMode init = parse_init_mode(manifest_at(data.header, meta + "init_mode"));
  if (exit_layer < 1 || exit_layer >= trunk.config().n_layers) {
    throw RangeError("balcony exit layer " + std::to_string(exit_layer) + " outside 1.." +
                     std::to_string(trunk.config().n_layers - 1));
  }
  BalconyModule<T> m = make_balcony(trunk, exit_layer, InitMode::random, variant, 0);
  m.init_mode = init;
  assign_params(m.parameters(), data.tensors, prefix);
  return m;
}

}  // namespace

template <typename T>
void save_trunk(const std::string& path, const TransformerTrunk<T>& trunk) {
  save_checkpoint(path, CheckpointKind::trunk, with_prefix(trunk.config().to_kv(), "model."),
                  named(trunk.parameters(), ""));
}

template <typename T>
TransformerTrunk<T> load_trunk(const std::string& path) {
  const CheckpointData<T> data = load_checkpoint<T>(path);
  expect_kind(data.header, CheckpointKind::trunk);
  return trunk_from(data, "");
}

template <typename T>
void save_balcony(const std::string& path, const BalconyModule<T>& module, const ModelConfig& config) {
  auto manifest = with_prefix(config.to_kv(), "model.");
  manifest["exit_layer"] = std::to_string(module.exit_layer);
  manifest["init_mode"] = to_string(module.init_mode);
  manifest["variant"] = to_string(module.variant);
  save_checkpoint(path, CheckpointKind::balcony, manifest, named(module.parameters(), ""));
}

template <typename T>
BalconyModule<T> load_balcony(const std::string& path, const TransformerTrunk<T>& trunk) {
  const CheckpointData<T> data = load_checkpoint<T>(path);
  expect_kind(data.header, CheckpointKind::balcony);
  check_config(ModelConfig::from_kv(strip_prefix(data.header.manifest, "model.")), trunk.config());
  const int j = parse_int_field("exit_layer", manifest_at(data.header, "exit_layer"));
  return balcony_from(data, trunk, "", "", j);
}

template <typename T>
void save_optimizer(const std::string& path, const AdamW<T>& optimizer) {
  std::map<std::string, std::string> manifest{{"step_count", std::to_string(optimizer.step_count())}};
  save_checkpoint(path, CheckpointKind::optimizer_state, manifest, optimizer.state());
}

template <typename T>
void load_optimizer(const std::string& path, AdamW<T>& optimizer) {
  const CheckpointData<T> data = load_checkpoint<T>(path);
  expect_kind(data.header, CheckpointKind::optimizer_state);
  NamedTensors<T> state(data.tensors.begin(), data.tensors.end());
  optimizer.load_state(state, parse_int_field("step_count", manifest_at(data.header, "step_count")));
}

template <typename T>
void save_bundle(const std::string& path, const TransformerTrunk<T>& trunk, const BalconySet<T>& set) {
  auto manifest = with_prefix(trunk.config().to_kv(), "model.");
  std::string exits;
  NamedTensors<T> tensors = named(trunk.parameters(), "trunk.");
  for (const auto& [j, m] : set.modules()) {
    exits += (exits.empty() ? "" : ",") + std::to_string(j);
    const std::string meta = "balcony." + std::to_string(j) + ".";
    manifest[meta + "init_mode"] = to_string(m.init_mode);
    manifest[meta + "variant"] = to_string(m.variant);
    for (auto& e : named(m.parameters(), meta)) tensors.push_back(std::move(e));
  }
  manifest["exits"] = exits;
  save_checkpoint(path, CheckpointKind::full_bundle, manifest, tensors);
}

template <typename T>
std::pair<TransformerTrunk<T>, BalconySet<T>> load_bundle(const std::string& path) {
  const CheckpointData<T> data = load_checkpoint<T>(path);
  expect_kind(data.header, CheckpointKind::full_bundle);
  TransformerTrunk<T> trunk = trunk_from(data, "trunk.");
  const ExitPointSet exits = ExitPointSet::parse(manifest_at(data.header, "exits"), static_cast<int>(trunk.config().n_layers));
  BalconySet<T> set;
  for (int j : exits.layers()) {
    const std::string meta = "balcony." + std::to_string(j) + ".";
    set.install(balcony_from(data, trunk, meta, meta, j));
  }
  size_t expected = trunk.parameters().size() + set.parameters().size();
  if (expected != data.tensors.size()) throw FormatError("bundle has tensors outside trunk and balconies");
  return {std::move(trunk), std::move(set)};
}

template <typename T>
uint64_t tensor_hash(const Tensor<T>& tensor) {
  std::vector<uint8_t> bytes(static_cast<size_t>(tensor.numel()) * sizeof(T));
  put_values<T>(tensor.data(), bytes.data());
  return fnv1a(bytes.data(), bytes.size());
}

template <typename T>
uint64_t tensor_hash(const ParamGroup<T>& group) {
  uint64_t h = kFnvOffset;
  for (const auto& [path, t] : group.entries()) {
    h = fnv1a(path, h);
    std::vector<uint8_t> bytes(static_cast<size_t>(t.numel()) * sizeof(T));
    put_values<T>(t.data(), bytes.data());
    h = fnv1a(bytes.data(), bytes.size(), h);
  }
  return h;
}

#define BALCONY_INSTANTIATE(T)                                                                     \
  template std::vector<uint8_t> encode_checkpoint(CheckpointKind,                                  \
                                                  const std::map<std::string, std::string>&,       \
                                                  const NamedTensors<T>&);                         \
  template CheckpointData<T> decode_checkpoint(const std::vector<uint8_t>&);                       \
  template void save_checkpoint(const std::string&, CheckpointKind,                                \
                                const std::map<std::string, std::string>&, const NamedTensors<T>&); \
  template CheckpointData<T> load_checkpoint(const std::string&);                                  \
  template void save_trunk(const std::string&, const TransformerTrunk<T>&);                        \
  template TransformerTrunk<T> load_trunk(const std::string&);                                     \
  template void save_balcony(const std::string&, const BalconyModule<T>&, const ModelConfig&);     \
  template BalconyModule<T> load_balcony(const std::string&, const TransformerTrunk<T>&);          \
  template void save_optimizer(const std::string&, const AdamW<T>&);                               \
  template void load_optimizer(const std::string&, AdamW<T>&);                                     \
  template void save_bundle(const std::string&, const TransformerTrunk<T>&, const BalconySet<T>&); \
  template std::pair<TransformerTrunk<T>, BalconySet<T>> load_bundle(const std::string&);          \
  template uint64_t tensor_hash(const Tensor<T>&);                                                 \
  template uint64_t tensor_hash(const ParamGroup<T>&);

BALCONY_INSTANTIATE(float)
BALCONY_INSTANTIATE(double)

}  // namespace balcony
