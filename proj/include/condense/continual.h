#pragma once

#include <cstdint>
#include <vector>

#include "condense/evaluate.h"

namespace condense {

struct ContinualConfig {
  int steps = 5;
  int memory_per_class = 0;  // images kept per class from the condensed pool; 0 keeps all
  std::uint64_t seed = 0;    // class order

  bool operator==(const ContinualConfig&) const = default;
};

struct ContinualStep {
  int step = 0;
  std::vector<int> classes_seen;  // ascending
  int train_images = 0;
  double top1 = 0;
};

// Seeded shuffle of `class_ids` cut into `steps` equal groups. Throws
// ConfigError when the classes do not divide evenly.
std::vector<std::vector<int>> partition_classes(const std::vector<int>& class_ids, int steps,
                                                std::uint64_t seed);

// GDumb-style protocol: at step t a fresh student (same seed every step) is
// trained on the stored images of every class seen so far, in condensed-set
// order, with the softmax restricted to those classes, and scored on the
// validation samples of those classes only.
std::vector<ContinualStep> class_incremental_run(const CondensedDataset& cd,
                                                 const CropLabelArchive& archive,
                                                 const EvalConfig& eval, const LabeledDataset& val,
                                                 const ContinualConfig& cfg);

}  // namespace condense
