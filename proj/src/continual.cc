#include "condense/continual.h"

#include <spdlog/spdlog.h>

#include <algorithm>

#include "condense/errors.h"

namespace condense {

std::vector<std::vector<int>> partition_classes(const std::vector<int>& class_ids, int steps,
                                                std::uint64_t seed) {
  if (steps < 1) throw ConfigError("continual: steps must be >= 1");
  const int n = static_cast<int>(class_ids.size());
  if (n % steps != 0) {
    throw ConfigError("continual: " + std::to_string(n) + " classes cannot be split into " +
                      std::to_string(steps) + " equal steps");
  }
  std::mt19937_64 rng(seed);
  const auto perm = shuffled(n, rng);
  const int per = n / steps;
  std::vector<std::vector<int>> out(steps);
  for (int i = 0; i < n; ++i) out[i / per].push_back(class_ids[perm[i]]);
  return out;
}

std::vector<ContinualStep> class_incremental_run(const CondensedDataset& cd,
                                                 const CropLabelArchive& archive,
                                                 const EvalConfig& eval, const LabeledDataset& val,
                                                 const ContinualConfig& cfg) {
  if (cfg.memory_per_class < 0) throw ConfigError("continual: memory_per_class must be >= 0");
  const int memory = cfg.memory_per_class == 0 ? cd.ipc : std::min(cfg.memory_per_class, cd.ipc);
  const auto groups = partition_classes(cd.class_ids, cfg.steps, cfg.seed);

  std::vector<ContinualStep> curve;
  std::vector<int> seen;
  for (int t = 0; t < cfg.steps; ++t) {
    seen.insert(seen.end(), groups[t].begin(), groups[t].end());
    std::sort(seen.begin(), seen.end());
    StudentSubset subset;
    for (int slot = 0; slot < static_cast<int>(cd.class_ids.size()); ++slot) {
      if (!std::binary_search(seen.begin(), seen.end(), cd.class_ids[slot])) continue;
      for (int k = 0; k < memory; ++k) subset.images.push_back(slot * cd.ipc + k);
    }
    std::sort(subset.images.begin(), subset.images.end());
    // Seeing the whole label space is the unrestricted problem.
    if (static_cast<int>(seen.size()) < cd.num_classes) subset.classes = seen;
    const StudentResult r = train_student(cd, archive, eval, val, subset);
    curve.push_back({t, seen, static_cast<int>(subset.images.size()), r.final_top1});
    spdlog::info("continual step {}/{}: {} classes, top-1 {:.4f}", t + 1, cfg.steps, seen.size(),
                 r.final_top1);
  }
  return curve;
}

}  // namespace condense
