#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "condense/checkpoint.h"
#include "condense/data.h"
#include "condense/image_ops.h"
#include "condense/optim.h"

namespace condense {

// Augmentation names: "random_resized_crop", "mixup", "cutmix".
struct SqueezeConfig {
  OptimizerConfig optimizer;  // SGD 0.1, momentum 0.9, wd 5e-4
  int batch_size = 128;
  int epochs = 200;
  std::vector<std::string> augmentations;
  double mixup_alpha = 0.2;
  double cutmix_beta = 1.0;
  CropParams crop;
  std::uint64_t seed = 0;

  bool operator==(const SqueezeConfig&) const = default;
};

void validate_squeeze_config(const SqueezeConfig& cfg);  // throws ConfigError
std::string squeeze_config_json(const SqueezeConfig& cfg);

struct SqueezeOptions {
  // Called after every epoch with (epoch, mean train loss, train accuracy).
  std::function<void(int, double, double)> on_epoch;
};

// Standard supervised training (cross-entropy, label mixing for Mixup and
// CutMix), cosine learning rate per iteration. Throws DivergenceError on a
// non-finite loss.
Checkpoint squeeze_train(const LabeledDataset& train, const LabeledDataset& val,
                         const BackboneSpec& spec, const SqueezeConfig& cfg,
                         const SqueezeOptions& options = {});

double evaluate_checkpoint(const Checkpoint& checkpoint, const LabeledDataset& val);

}  // namespace condense
