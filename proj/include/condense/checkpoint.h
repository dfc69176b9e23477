#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "condense/model.h"

namespace condense {

struct CheckpointMeta {
  int epochs_trained = 0;
  std::vector<std::string> augmentations_used;
  double val_top1 = 0.0;
  std::uint64_t seed = 0;
  std::string dataset;

  bool operator==(const CheckpointMeta&) const = default;
};

struct ParamEntry {
  std::string name;
  Shape shape;

  bool operator==(const ParamEntry&) const = default;
};

// Squeezed knowledge container: weights plus BN running statistics.
struct Checkpoint {
  BackboneSpec spec;
  std::vector<ParamEntry> param_layout;
  std::vector<float> parameters;  // concatenated in param_layout order
  std::vector<BNLayerStats> bn_stats;
  CheckpointMeta meta;
};

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

template <typename T>
Checkpoint make_checkpoint(Model<T>& model, const BackboneSpec& spec, CheckpointMeta meta);

// Rebuilds the network for checkpoint.spec and loads weights and BN stats.
template <typename T>
Model<T> instantiate(const Checkpoint& checkpoint);

// Copy of the stored statistics; throws StructuralError when there are none.
std::vector<BNLayerStats> extract_bn_stats(const Checkpoint& checkpoint);

// Hex digest identifying the weights and statistics (not the metadata).
std::string checkpoint_id(const Checkpoint& checkpoint);

// File layout (little-endian):
//   "CNDSCKPT" | u32 version | u64 n | n bytes JSON header
//   | u64 count | f32[count] parameters
//   | u64 count | f32[count] BN stats (per layer: mean[C] then var[C])
//   | u32 CRC-32 of every preceding byte
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace condense
