#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "condense/checkpoint.h"
#include "condense/data.h"
#include "condense/image_ops.h"
#include "condense/model.h"

namespace condense {

struct RecoverConfig {
  double alpha_ce = 1.0;
  double alpha_bn = 1.0;
  double alpha_tv = 0.0;
  double alpha_l2 = 0.0;
  double tv_beta = 2.0;
  double lr = 0.1;
  double beta1 = 0.5;
  double beta2 = 0.9;
  double adam_eps = 1e-8;
  int batch_size = 100;
  int iterations = 1000;
  CropParams crop;
  double init_mean = 0.0;
  double init_std = 1.0;
  bool clamp = false;  // to the normalized image of raw [0, 1]
  int ipc = 10;
  std::uint64_t seed = 0;

  bool operator==(const RecoverConfig&) const = default;
};

// Small-resolution (32/64 px) and large-resolution (224 px) recipes.
RecoverConfig recover_defaults(int resolution);

void validate_recover_config(const RecoverConfig& cfg);  // throws ConfigError
std::string recover_config_json(const RecoverConfig& cfg);
std::string recover_config_hash(const RecoverConfig& cfg);

struct RecoveryLossBreakdown {
  double ce = 0, r_bn = 0, r_tv = 0, r_l2 = 0, total = 0;
};

// Learnable images with fixed targets plus per-pixel Adam moments.
template <typename T>
struct SyntheticBatch {
  Tensor<T> images;  // B x C x H x W, normalized space
  std::vector<int> targets;
  long iteration = 0;
  std::vector<T> adam_m, adam_v;
  RecoveryLossBreakdown last_finite;
};

// All ipc * |class_ids| images, class-major (index = slot * ipc + k), drawn
// i.i.d. from N(init_mean, init_std^2).
template <typename T>
SyntheticBatch<T> init_synthetic(int ipc, const std::vector<int>& class_ids, int channels,
                                 int resolution, const RecoverConfig& cfg, std::uint64_t seed);

// Sum over channels and positions of (h^2 + v^2)^(beta/2) where h, v are the
// right and down differences (0 at the last column / row). Accumulates the
// gradient into `grad` when non-null.
template <typename T>
T tv_regularizer(const T* image, int channels, int height, int width, double beta,
                 T* grad = nullptr);

// Euclidean norm; accumulates the gradient into `grad` when non-null.
template <typename T>
T l2_regularizer(const T* values, std::size_t n, T* grad = nullptr);

// Per-layer batch statistics (biased mean, biased variance).
template <typename T>
using BatchStats = std::vector<std::pair<std::vector<T>, std::vector<T>>>;

// Sum_l ||mean_l - RM_l||_2 + Sum_l ||var_l - RV_l||_2. When `grads` is
// non-null it receives d/dmean and d/dvar per layer. Throws StructuralError
// on layer-count or channel mismatch.
template <typename T>
T bn_matching_loss(const BatchStats<T>& batch, const std::vector<BNLayerStats>& ref,
                   BatchStats<T>* grads = nullptr);

// One crop placement per image.
struct CropDraw {
  CropRect rect;
  bool hflip = false;
};

// Composite objective for images cropped by `draws` and resized to the model
// resolution: alpha_ce * CE + alpha_bn * R_BN + alpha_tv * R_TV + alpha_l2 * R_L2.
// CE and the priors are averaged over the batch; the priors see the resized
// crops. The model must be frozen. Writes dL/dimages into `grad` (same shape
// as `images`, zero outside the crops) when non-null.
template <typename T>
RecoveryLossBreakdown recovery_loss(Model<T>& model, const Tensor<T>& images,
                                    const std::vector<int>& targets,
                                    const std::vector<CropDraw>& draws,
                                    const std::vector<BNLayerStats>& ref, const RecoverConfig& cfg,
                                    std::type_identity_t<Tensor<T>>* grad);

// Per-channel bounds applied after each step.
struct ClampRange {
  std::vector<float> lo, hi;
};
ClampRange clamp_range(const Normalization& norm);

// Samples one crop per image, evaluates the objective and takes one Adam
// step restricted to each image's crop: pixels and moments outside it are
// left untouched. Throws DivergenceError when the loss is not finite.
template <typename T>
RecoveryLossBreakdown recover_step(SyntheticBatch<T>& batch, Model<T>& model,
                                   const std::vector<BNLayerStats>& ref, const RecoverConfig& cfg,
                                   double lr, std::mt19937_64& rng,
                                   const std::optional<ClampRange>& clamp = std::nullopt,
                                   std::vector<CropDraw>* draws_out = nullptr);

struct RecoverOptions {
  // Called after every step with (batch index, iteration, breakdown).
  std::function<void(int, int, const RecoveryLossBreakdown&)> on_step;
  // Where to persist the images reached so far when a step fails.
  std::optional<std::filesystem::path> partial_dir;
};

// Packs images into batches round-robin over classes, optimizes each batch
// for cfg.iterations with cosine-decayed lr and returns the condensed set.
CondensedDataset recover(const Checkpoint& checkpoint, const RecoverConfig& cfg,
                         const std::vector<int>& class_ids, const Normalization& norm,
                         const RecoverOptions& options = {});

}  // namespace condense
