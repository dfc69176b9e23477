#pragma once

#include <random>
#include <vector>

#include "condense/checkpoint.h"
#include "condense/data.h"
#include "condense/relabel.h"

namespace condense::testing {

// Randomly initialized convnet4 teacher with perturbed BN statistics.
inline Checkpoint random_teacher(std::uint64_t seed, int classes, int width = 8) {
  BackboneSpec spec;
  spec.arch = Arch::kConvNet4;
  spec.width = width;
  spec.num_classes = classes;
  Model<float> m = build_backbone<float>(spec, seed);
  std::mt19937_64 rng(seed + 1);
  std::uniform_real_distribution<float> u(0.5f, 1.5f);
  for (auto* bn : m.bn_layers()) {
    for (auto& v : bn->running_mean()) v = 0.3f * (u(rng) - 1.0f);
    for (auto& v : bn->running_var()) v = u(rng);
  }
  return make_checkpoint(m, spec, {1, {}, 0.0, seed, "toy10"});
}

// Gaussian condensed set in class-major layout.
inline CondensedDataset random_condensed(std::uint64_t seed, int num_classes,
                                         std::vector<int> class_ids, int ipc, int res = 32) {
  CondensedDataset cd;
  cd.dataset = "toy10";
  cd.ipc = ipc;
  cd.num_classes = num_classes;
  cd.class_ids = std::move(class_ids);
  cd.channels = 3;
  cd.resolution = res;
  const int n = static_cast<int>(cd.class_ids.size()) * ipc;
  cd.images = Tensor<float>({n, 3, res, res});
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0, 1);
  for (auto& v : cd.images.storage()) v = d(rng);
  cd.hard_labels = layout_labels(cd.class_ids, ipc);
  cd.normalization = normalization_for("toy10");
  return cd;
}

// Archive with one-hot labels at each image's class, crops from the plan.
inline CropLabelArchive one_hot_archive(const CondensedDataset& cd, int epochs, std::uint64_t seed) {
  CropLabelArchive a;
  CropParams crop;
  a.meta = {"none", 1.0, epochs, crop, LabelPrecision::kFloat32, 0, seed, cd.size(),
            cd.num_classes, cd.resolution};
  const auto plan = generate_crop_plan(cd.size(), epochs, cd.resolution, cd.resolution, crop, seed);
  a.records.resize(cd.size());
  for (int i = 0; i < cd.size(); ++i) {
    for (int e = 0; e < epochs; ++e) {
      CropRecord r;
      r.epoch = e;
      r.rect = plan[i][e].rect;
      r.hflip = plan[i][e].hflip;
      r.soft_label.assign(cd.num_classes, 0.0f);
      r.soft_label[cd.hard_labels[i]] = 1.0f;
      a.records[i].push_back(r);
    }
  }
  return a;
}

}  // namespace condense::testing
