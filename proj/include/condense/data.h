#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "condense/tensor.h"

namespace condense {

enum class Split { kTrain, kVal };

std::string split_name(Split split);
Split parse_split(const std::string& name);

// Per-channel mean/std applied as (raw - mean) / std, raw in [0, 1].
struct Normalization {
  std::vector<float> mean;
  std::vector<float> std;

  float normalize(int channel, float raw) const { return (raw - mean[channel]) / std[channel]; }
  float denormalize(int channel, float v) const { return v * std[channel] + mean[channel]; }
  bool operator==(const Normalization&) const = default;
};

// Fixed per-dataset constants (cifar10, cifar100, tiny-imagenet, imagenet,
// toy10). Squeeze, recovery clamping and relabel all read them from here.
Normalization normalization_for(const std::string& dataset_name);
std::vector<std::string> registered_datasets();

struct LabeledDataset {
  std::string name;
  Split split = Split::kTrain;
  int resolution = 0;
  int channels = 0;
  int num_classes = 0;
  std::vector<std::string> class_names;
  Tensor<float> images;  // N x C x H x W, normalized
  std::vector<int> labels;
  Normalization normalization;

  int size() const { return static_cast<int>(labels.size()); }
  // Indices of samples whose label is in `classes`, in dataset order.
  std::vector<int> indices_of(const std::vector<int>& classes) const;
};

// Supported layouts under `root`:
//   <root>/<split>/<class>/*.png   class indices follow sorted folder names,
//                                  files are read in sorted order
//   CIFAR-10 binary (data_batch_1..5.bin / test_batch.bin)
//   CIFAR-100 binary (train.bin / test.bin, fine labels)
// Throws IngestError naming every offending class folder or file.
LabeledDataset load_dataset(const std::filesystem::path& root, const std::string& name,
                            Split split);

// Hash of images and labels; equal for identical loads.
std::string dataset_checksum(const LabeledDataset& dataset);

struct Provenance {
  std::string checkpoint_id;
  std::string config_hash;
  int iterations = 0;
  bool complete = true;

  bool operator==(const Provenance&) const = default;
};

// Synthetic set: image k of class slot s is at index s * ipc + k.
struct CondensedDataset {
  std::string dataset;
  int ipc = 0;
  int num_classes = 0;  // label space size
  std::vector<int> class_ids;
  int channels = 0;
  int resolution = 0;
  Tensor<float> images;  // (|class_ids| * ipc) x C x H x W, normalized
  std::vector<int> hard_labels;
  Normalization normalization;
  Provenance provenance;

  int size() const { return static_cast<int>(hard_labels.size()); }
};

// Labels implied by the class-major layout.
std::vector<int> layout_labels(const std::vector<int>& class_ids, int ipc);

// Throws IntegrityError on layout/label/finite-value violations.
void validate_condensed(const CondensedDataset& cd);

// Directory layout:
//   manifest.json          classes, ipc, geometry, normalization, provenance,
//                          images.bin SHA-256
//   images.bin             float32 little-endian, N x C x H x W row-major
//   previews/<class>/<k>.png  8-bit de-normalized previews, never read back
void save_condensed(const CondensedDataset& cd, const std::filesystem::path& dir,
                    bool write_previews = true);
CondensedDataset load_condensed(const std::filesystem::path& dir);

}  // namespace condense
