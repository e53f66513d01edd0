// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0

#include "balcony/balcony.hpp"

#include <algorithm>
#include <sstream>

#include "balcony/rng.hpp"

namespace balcony {

std::string to_string(BalconyVariant variant) {
  switch (variant) {
    case BalconyVariant::decoder: return "decoder";
    case BalconyVariant::mlp_only: return "mlp_only";
    case BalconyVariant::attn_only: return "attn_only";
  }
  return "?";
}

std::string to_string(InitMode mode) {
  return mode == InitMode::from_last_layer ? "from_last_layer" : "random";
}

BalconyVariant parse_variant(const std::string& name) {
  if (name == "decoder") return BalconyVariant::decoder;
  if (name == "mlp_only") return BalconyVariant::mlp_only;
  if (name == "attn_only") return BalconyVariant::attn_only;
  throw ConfigError("unknown balcony variant '" + name + "' (decoder|mlp_only|attn_only)");
}

InitMode parse_init_mode(const std::string& name) {
  if (name == "from_last_layer") return InitMode::from_last_layer;
  if (name == "random") return InitMode::random;
  throw ConfigError("unknown init mode '" + name + "' (from_last_layer|random)");
}

// ---------------------------------------------------------------------------
// ExitPointSet

ExitPointSet::ExitPointSet(std::vector<int> layers, int64_t n_layers) : layers_(std::move(layers)) {
  for (size_t i = 0; i < layers_.size(); ++i) {
    const int j = layers_[i];
    if (j < 1 || j >= n_layers) {
      throw RangeError("exit " + std::to_string(j) + " must lie in 1.." +
                       std::to_string(n_layers - 1) + " (exit " + std::to_string(n_layers) +
                       " is the full model)");
    }
    if (i > 0 && j == layers_[i - 1]) throw RangeError("duplicate exit " + std::to_string(j));
    if (i > 0 && j < layers_[i - 1]) throw RangeError("exits must be strictly increasing");
  }
}

ExitPointSet ExitPointSet::parse(const std::string& list, int64_t n_layers) {
  std::vector<int> layers;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (item.empty()) continue;
    size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size()) throw ConfigError("exit list: '" + item + "' is not an integer");
    layers.push_back(v);
  }
  return ExitPointSet(std::move(layers), n_layers);
}

bool ExitPointSet::contains(int layer) const {
  return std::binary_search(layers_.begin(), layers_.end(), layer);
}

std::string ExitPointSet::str() const {
  std::string out;
  for (size_t i = 0; i < layers_.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(layers_[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// BalconyModule

template <typename T>
ParamGroup<T> BalconyModule<T>::parameters() const {
  ParamGroup<T> g;
  body.collect("body.", g);
  g.add("exit_norm", exit_norm);
  return g;
}

template <typename T>
BalconyModule<T> BalconyModule<T>::clone() const {
  BalconyModule out = *this;
  out.body = body.clone();
  out.exit_norm = exit_norm.clone();
  return out;
}

template <typename T>
BalconyModule<T> make_balcony(const TransformerTrunk<T>& trunk, int exit_layer, InitMode mode,
                              BalconyVariant variant, uint64_t seed) {
  const ModelConfig& c = trunk.config();
  ExitPointSet({exit_layer}, c.n_layers);
  BalconyModule<T> m;
  m.exit_layer = exit_layer;
  m.variant = variant;
  m.init_mode = mode;
  if (mode == InitMode::from_last_layer) {
    m.body = trunk.layer(static_cast<int>(c.n_layers)).clone();
    m.exit_norm = trunk.final_norm().clone();
  } else {
    m.body = DecoderLayer<T>::random(c, mix_seed(seed, 1000 + exit_layer));
    m.exit_norm = Tensor<T>::full({c.d_model}, T(1));
  }
  if (variant == BalconyVariant::mlp_only) m.body.attn.reset();
  if (variant == BalconyVariant::attn_only) m.body.mlp.reset();
  m.set_frozen(false);
  return m;
}

template <typename T>
std::vector<BalconyModule<T>> attach_balconies(const TransformerTrunk<T>& trunk,
                                               const ExitPointSet& exits, InitMode mode,
                                               BalconyVariant variant, uint64_t seed) {
  std::vector<BalconyModule<T>> out;
  out.reserve(exits.size());
  for (int j : exits.layers()) out.push_back(make_balcony(trunk, j, mode, variant, seed));
  return out;
}

template <typename T>
Tensor<T> balcony_forward(const HiddenState<T>& x, const BalconyModule<T>& module,
                          const TransformerTrunk<T>& trunk) {
  if (x.layer_index != module.exit_layer) {
    throw RangeError("balcony at exit " + std::to_string(module.exit_layer) +
                     " received the output of layer " + std::to_string(x.layer_index));
  }
  const ModelConfig& c = trunk.config();
  Tensor<T> h = decoder_layer_forward(module.body, x.values, c, trunk.rope_table());
  return trunk.lm_head_only(rms_norm(h, module.exit_norm, c.norm_eps));
}

// ---------------------------------------------------------------------------
// BalconySet

template <typename T>
BalconySet<T>::BalconySet(std::vector<BalconyModule<T>> modules) {
  for (auto& m : modules) install(std::move(m));
}

template <typename T>
void BalconySet<T>::install(BalconyModule<T> module) {
  const int j = module.exit_layer;
  modules_.insert_or_assign(j, std::move(module));
}

template <typename T>
const BalconyModule<T>& BalconySet<T>::at(int exit_layer) const {
  auto it = modules_.find(exit_layer);
  if (it == modules_.end()) throw RangeError("no balcony at exit " + std::to_string(exit_layer));
  return it->second;
}

template <typename T>
BalconyModule<T>& BalconySet<T>::mutable_at(int exit_layer) {
  auto it = modules_.find(exit_layer);
  if (it == modules_.end()) throw RangeError("no balcony at exit " + std::to_string(exit_layer));
  return it->second;
}

template <typename T>
std::vector<int> BalconySet<T>::exits() const {
  std::vector<int> out;
  for (const auto& [j, m] : modules_) out.push_back(j);
  return out;
}

template <typename T>
ParamGroup<T> BalconySet<T>::parameters() const {
  ParamGroup<T> g;
  for (const auto& [j, m] : modules_) {
    const std::string prefix = "balcony." + std::to_string(j) + ".";
    const ParamGroup<T> own = m.parameters();
    for (const auto& [path, t] : own.entries()) g.add(prefix + path, t);
  }
  return g;
}

template <typename T>
void BalconySet<T>::set_frozen(bool frozen) {
  for (auto& [j, m] : modules_) m.set_frozen(frozen);
}

template <typename T>
BalconySet<T> BalconySet<T>::clone() const {
  BalconySet out;
  for (const auto& [j, m] : modules_) out.install(m.clone());
  return out;
}

// ---------------------------------------------------------------------------
// Submodels

std::string SubmodelInfo::name() const {
  return full ? std::string("full") : "exit:" + std::to_string(exit_layer);
}

int64_t submodel_nonembed_params(const ModelConfig& config, int exit_layer,
                                 int64_t balcony_params) {
  return exit_layer * decoder_layer_params(config) + balcony_params;
}

template <typename T>
SubmodelHandle<T>::SubmodelHandle(const TransformerTrunk<T>& trunk, const BalconyModule<T>* balcony)
    : trunk_(&trunk), balcony_(balcony) {
  const ModelConfig& c = trunk.config();
  if (balcony) {
    info_.exit_layer = balcony->exit_layer;
    info_.full = false;
    info_.nonembed_param_count =
        submodel_nonembed_params(c, balcony->exit_layer, balcony->param_count());
  } else {
    info_.exit_layer = static_cast<int>(c.n_layers);
    info_.full = true;
    info_.nonembed_param_count = count_params(c, false);
  }
}

template <typename T>
Tensor<T> SubmodelHandle<T>::forward(const TokenBatch& tokens) const {
  if (!balcony_) return trunk_->forward_full(tokens);
  return balcony_forward(trunk_->forward_to_layer(tokens, balcony_->exit_layer), *balcony_, *trunk_);
}

template <typename T>
SubmodelHandle<T> make_submodel(const TransformerTrunk<T>& trunk, const BalconySet<T>& balconies,
                                int exit_layer) {
  if (exit_layer == trunk.config().n_layers) return SubmodelHandle<T>(trunk, nullptr);
  if (!balconies.contains(exit_layer)) {
    std::string have;
    for (int j : balconies.exits()) have += std::to_string(j) + ",";
    have += "full";
    throw RangeError("unknown exit " + std::to_string(exit_layer) + " (available: " + have + ")");
  }
  return SubmodelHandle<T>(trunk, &balconies.at(exit_layer));
}

template <typename T>
std::vector<SubmodelInfo> available_submodels(const TransformerTrunk<T>& trunk,
                                              const BalconySet<T>& balconies) {
  std::vector<SubmodelInfo> out;
  for (const auto& [j, m] : balconies.modules()) out.push_back(SubmodelHandle<T>(trunk, &m).info());
  out.push_back(SubmodelHandle<T>(trunk, nullptr).info());
  return out;
}

#define BALCONY_INSTANTIATE(T)                                                                \
  template struct BalconyModule<T>;                                                           \
  template class BalconySet<T>;                                                               \
  template class SubmodelHandle<T>;                                                           \
  template BalconyModule<T> make_balcony(const TransformerTrunk<T>&, int, InitMode,           \
                                         BalconyVariant, uint64_t);                           \
  template std::vector<BalconyModule<T>> attach_balconies(                                    \
      const TransformerTrunk<T>&, const ExitPointSet&, InitMode, BalconyVariant, uint64_t);   \
  template Tensor<T> balcony_forward(const HiddenState<T>&, const BalconyModule<T>&,          \
                                     const TransformerTrunk<T>&);                             \
  template SubmodelHandle<T> make_submodel(const TransformerTrunk<T>&, const BalconySet<T>&,  \
                                           int);                                              \
  template std::vector<SubmodelInfo> available_submodels(const TransformerTrunk<T>&,          \
                                                         const BalconySet<T>&);

BALCONY_INSTANTIATE(float)
BALCONY_INSTANTIATE(double)

}  // namespace balcony
