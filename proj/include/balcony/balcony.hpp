// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0
//
// Exit modules ("balconies"): a decoder layer plus an exit norm attached after
// trunk layer j, producing logits through the trunk's shared LM head.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "balcony/model.hpp"

namespace balcony {

enum class BalconyVariant { decoder, mlp_only, attn_only };
enum class InitMode { from_last_layer, random };

std::string to_string(BalconyVariant variant);
std::string to_string(InitMode mode);
BalconyVariant parse_variant(const std::string& name);
InitMode parse_init_mode(const std::string& name);

// Strictly increasing layer indices in 1..n_layers-1.
class ExitPointSet {
 public:
  ExitPointSet() = default;
  ExitPointSet(std::vector<int> layers, int64_t n_layers);
  // Comma-separated list such as "2,4,6"; empty string gives no exits.
  static ExitPointSet parse(const std::string& list, int64_t n_layers);

  const std::vector<int>& layers() const { return layers_; }
  bool contains(int layer) const;
  size_t size() const { return layers_.size(); }
  bool empty() const { return layers_.empty(); }
  int max() const { return layers_.empty() ? 0 : layers_.back(); }
  std::string str() const;

 private:
  std::vector<int> layers_;
};

template <typename T>
struct BalconyModule {
  int exit_layer = 0;
  BalconyVariant variant = BalconyVariant::decoder;
  InitMode init_mode = InitMode::from_last_layer;
  DecoderLayer<T> body;
  Tensor<T> exit_norm;  // [D]

  // Paths "body.attn.wq", ..., "exit_norm".
  ParamGroup<T> parameters() const;
  int64_t param_count() const { return parameters().total_elements(); }
  void set_frozen(bool frozen) { parameters().set_frozen(frozen); }
  BalconyModule clone() const;
};

template <typename T>
BalconyModule<T> make_balcony(const TransformerTrunk<T>& trunk, int exit_layer, InitMode mode,
                              BalconyVariant variant, uint64_t seed);

// One module per exit. Trunk tensors are only read.
template <typename T>
std::vector<BalconyModule<T>> attach_balconies(const TransformerTrunk<T>& trunk,
                                               const ExitPointSet& exits, InitMode mode,
                                               BalconyVariant variant, uint64_t seed);

// X_j -> body -> exit_norm -> shared lm_head. The trunk's final norm is not used.
template <typename T>
Tensor<T> balcony_forward(const HiddenState<T>& x, const BalconyModule<T>& module,
                          const TransformerTrunk<T>& trunk);

// Modules keyed by exit layer; installing at an occupied exit replaces it.
template <typename T>
class BalconySet {
 public:
  BalconySet() = default;
  explicit BalconySet(std::vector<BalconyModule<T>> modules);

  void install(BalconyModule<T> module);
  bool contains(int exit_layer) const { return modules_.count(exit_layer) != 0; }
  const BalconyModule<T>& at(int exit_layer) const;
  BalconyModule<T>& mutable_at(int exit_layer);
  std::vector<int> exits() const;
  size_t size() const { return modules_.size(); }
  bool empty() const { return modules_.empty(); }

  // Paths "balcony.{j}.body...", "balcony.{j}.exit_norm".
  ParamGroup<T> parameters() const;
  void set_frozen(bool frozen);
  BalconySet clone() const;

  const std::map<int, BalconyModule<T>>& modules() const { return modules_; }

 private:
  std::map<int, BalconyModule<T>> modules_;
};

// Structural description of one submodel. exit_layer == n_layers is FULL.
struct SubmodelInfo {
  int exit_layer = 0;
  bool full = false;
  int64_t nonembed_param_count = 0;

  std::string name() const;
  bool operator==(const SubmodelInfo&) const = default;
};

// Submodel j = trunk layers 1..j + balcony j (non-embedding accounting).
int64_t submodel_nonembed_params(const ModelConfig& config, int exit_layer,
                                 int64_t balcony_params);

// Executable view over a trunk and an optional balcony. Both must outlive it.
template <typename T>
class SubmodelHandle {
 public:
  SubmodelHandle(const TransformerTrunk<T>& trunk, const BalconyModule<T>* balcony);

  const SubmodelInfo& info() const { return info_; }
  int exit_layer() const { return info_.exit_layer; }
  bool is_full() const { return info_.full; }
  int64_t nonembed_param_count() const { return info_.nonembed_param_count; }
  std::string name() const { return info_.name(); }

  const TransformerTrunk<T>& trunk() const { return *trunk_; }
  const BalconyModule<T>* balcony() const { return balcony_; }

  Tensor<T> forward(const TokenBatch& tokens) const;

 private:
  const TransformerTrunk<T>* trunk_;
  const BalconyModule<T>* balcony_;
  SubmodelInfo info_;
};

// exit_layer == n_layers selects FULL, bypassing every balcony.
template <typename T>
SubmodelHandle<T> make_submodel(const TransformerTrunk<T>& trunk, const BalconySet<T>& balconies,
                                int exit_layer);

// Every installed exit plus FULL, ascending by exit layer.
template <typename T>
std::vector<SubmodelInfo> available_submodels(const TransformerTrunk<T>& trunk,
                                              const BalconySet<T>& balconies);

}  // namespace balcony
