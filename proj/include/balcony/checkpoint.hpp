// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoints ("BLCN" files). See FORMAT.md for the byte layout.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "balcony/balcony.hpp"
#include "balcony/train.hpp"

namespace balcony {

inline constexpr uint32_t kCheckpointVersion = 1;
inline constexpr uint64_t kPayloadAlignment = 64;

enum class CheckpointKind : uint32_t { trunk = 1, balcony = 2, optimizer_state = 3, full_bundle = 4 };

std::string to_string(CheckpointKind kind);

enum class DType : uint8_t { f32 = 1, f64 = 2 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::f32; }
template <>
constexpr DType dtype_of<double>() { return DType::f64; }

struct EntryInfo {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  uint64_t offset = 0;
  uint64_t length = 0;
};

// Header of a checkpoint: kind, manifest and entry table, without payload.
struct CheckpointHeader {
  uint32_t version = kCheckpointVersion;
  CheckpointKind kind = CheckpointKind::trunk;
  std::map<std::string, std::string> manifest;
  std::vector<EntryInfo> entries;  // sorted by name
};

template <typename T>
struct CheckpointData {
  CheckpointHeader header;
  std::map<std::string, Tensor<T>> tensors;
};

// Serialized bytes; tensors are written in name order so equal inputs give
// identical bytes. Throws Error on duplicate names.
template <typename T>
std::vector<uint8_t> encode_checkpoint(CheckpointKind kind,
                                       const std::map<std::string, std::string>& manifest,
                                       const NamedTensors<T>& tensors);

// Validates magic, version, table bounds, alignment and overlap.
CheckpointHeader decode_header(const std::vector<uint8_t>& bytes);
template <typename T>
CheckpointData<T> decode_checkpoint(const std::vector<uint8_t>& bytes);

// Writes via a temporary file renamed into place. Throws IoError.
template <typename T>
void save_checkpoint(const std::string& path, CheckpointKind kind,
                     const std::map<std::string, std::string>& manifest,
                     const NamedTensors<T>& tensors);
template <typename T>
CheckpointData<T> load_checkpoint(const std::string& path);
CheckpointHeader read_checkpoint_header(const std::string& path);

std::vector<uint8_t> read_file(const std::string& path);
void write_file_atomic(const std::string& path, const std::vector<uint8_t>& bytes);

// Typed wrappers. Model configs are stored under "model.<key>".
template <typename T>
void save_trunk(const std::string& path, const TransformerTrunk<T>& trunk);
template <typename T>
TransformerTrunk<T> load_trunk(const std::string& path);

template <typename T>
void save_balcony(const std::string& path, const BalconyModule<T>& module, const ModelConfig& config);
// Rejects a kind other than balcony, a config that differs from the
// trunk's (naming the field) and an exit layer outside 1..N-1. The trunk is
// only read.
template <typename T>
BalconyModule<T> load_balcony(const std::string& path, const TransformerTrunk<T>& trunk);

template <typename T>
void save_optimizer(const std::string& path, const AdamW<T>& optimizer);
// Restores moments and step count into an optimizer over the same params.
template <typename T>
void load_optimizer(const std::string& path, AdamW<T>& optimizer);

template <typename T>
void save_bundle(const std::string& path, const TransformerTrunk<T>& trunk, const BalconySet<T>& set);
template <typename T>
std::pair<TransformerTrunk<T>, BalconySet<T>> load_bundle(const std::string& path);

// FNV-1a 64 over the current values of `tensors`, in name order.
template <typename T>
uint64_t tensor_hash(const ParamGroup<T>& tensors);
template <typename T>
uint64_t tensor_hash(const Tensor<T>& tensor);

}  // namespace balcony
