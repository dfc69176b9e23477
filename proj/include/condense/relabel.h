#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "condense/checkpoint.h"
#include "condense/data.h"
#include "condense/image_ops.h"
#include "condense/recover.h"

namespace condense {

enum class LabelPrecision { kFloat32, kFloat16, kTopK };

std::string precision_name(LabelPrecision p);
LabelPrecision parse_precision(const std::string& name);  // throws ConfigError

struct RelabelConfig {
  double temperature = 20.0;
  int epochs = 100;
  CropParams crop;
  LabelPrecision precision = LabelPrecision::kFloat16;
  int top_k = 10;
  std::uint64_t seed = 0;

  bool operator==(const RelabelConfig&) const = default;
};

void validate_relabel_config(const RelabelConfig& cfg);  // throws ConfigError
std::string relabel_config_json(const RelabelConfig& cfg);

// Placement for (image, epoch); a pure function of its arguments.
CropDraw plan_crop(std::uint64_t seed, int image, int epoch, int height, int width,
                   const CropParams& crop);

// schedule[image][epoch].
std::vector<std::vector<CropDraw>> generate_crop_plan(int num_images, int epochs, int height,
                                                      int width, const CropParams& crop,
                                                      std::uint64_t seed);

// Stored form of one label: f16 bit patterns for every class (float16), or
// for the k kept classes (topk, with their indices). Empty for float32.
struct EncodedLabel {
  std::vector<std::uint16_t> classes;
  std::vector<std::uint16_t> bits;

  bool operator==(const EncodedLabel&) const = default;
};

struct CropRecord {
  int epoch = 0;
  CropRect rect;
  bool hflip = false;
  std::vector<float> soft_label;  // dense, decoded from `encoded`
  EncodedLabel encoded;

  bool operator==(const CropRecord&) const = default;
};

struct ArchiveMeta {
  std::string teacher_id;
  double temperature = 0;
  int epochs = 0;
  CropParams crop;
  LabelPrecision precision = LabelPrecision::kFloat16;
  int top_k = 0;
  std::uint64_t seed = 0;
  int num_images = 0;
  int num_classes = 0;
  int resolution = 0;  // source image side

  bool operator==(const ArchiveMeta&) const = default;
};

struct CropLabelArchive {
  ArchiveMeta meta;
  std::vector<std::vector<CropRecord>> records;  // [image][epoch]

  bool operator==(const CropLabelArchive&) const = default;
};

// Reduces a probability vector to the declared precision. Top-k keeps the
// k largest entries.
EncodedLabel encode_label(const std::vector<double>& probs, LabelPrecision precision, int top_k);
// Dense distribution summing to 1; top-k spreads the residual mass uniformly
// over the classes it dropped. `probs` is only read for float32.
std::vector<float> decode_label(const EncodedLabel& encoded, const std::vector<double>& probs,
                                LabelPrecision precision, int num_classes);

// Teacher soft labels softmax(logits / tau) for every planned crop, with the
// teacher in inference mode.
CropLabelArchive relabel(const CondensedDataset& cd, const Checkpoint& teacher,
                         const RelabelConfig& cfg);

// Layout (little-endian):
//   "CNDSLBLS" | u32 version | u64 n | n bytes JSON meta
//   | per image, per epoch: i32 top, left, height, width | u8 hflip | label
//   | u32 CRC-32 of every preceding byte
// label: f32[K] (float32), f16[K] (float16) or u16 count then count x
// (u16 class, f16 prob) (topk).
// save_archive returns the number of bytes written.
std::uintmax_t save_archive(const CropLabelArchive& archive, const std::filesystem::path& path);
CropLabelArchive load_archive(const std::filesystem::path& path);

}  // namespace condense
