#include "condense/evaluate.h"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <numeric>

#include "condense/errors.h"

namespace condense {

std::string target_mode_name(TargetMode m) {
  switch (m) {
    case TargetMode::kSoft: return "soft";
    case TargetMode::kArgmax: return "argmax";
    case TargetMode::kClassLabel: return "class";
  }
  return "?";
}

TargetMode parse_target_mode(const std::string& name) {
  if (name == "soft") return TargetMode::kSoft;
  if (name == "argmax") return TargetMode::kArgmax;
  if (name == "class") return TargetMode::kClassLabel;
  throw ConfigError("unknown target mode '" + name + "' (expected soft, argmax or class)");
}

void validate_eval_config(const EvalConfig& cfg) {
  if (cfg.epochs < 1) throw ConfigError("eval: epochs must be >= 1");
  if (cfg.batch_size < 2) throw ConfigError("eval: batch_size must be >= 2");
  if (!(cfg.optimizer.lr > 0)) throw ConfigError("eval: lr must be > 0");
  if (cfg.cutmix_p < 0 || cfg.cutmix_p > 1) throw ConfigError("eval: cutmix_p must lie in [0, 1]");
  if (!(cfg.cutmix_beta > 0)) throw ConfigError("eval: cutmix_beta must be > 0");
  if (cfg.eval_every < 0) throw ConfigError("eval: eval_every must be >= 0");
}

std::string eval_config_json(const EvalConfig& cfg) {
  const nlohmann::json j = {
      {"student", arch_name(cfg.student.arch)},
      {"student_width", cfg.student.width},
      {"student_depth", cfg.student.depth},
      {"epochs", cfg.epochs},
      {"optimizer", optimizer_name(cfg.optimizer.kind)},
      {"lr", cfg.optimizer.lr},
      {"momentum", cfg.optimizer.momentum},
      {"betas", {cfg.optimizer.beta1, cfg.optimizer.beta2}},
      {"weight_decay", cfg.optimizer.weight_decay},
      {"batch_size", cfg.batch_size},
      {"cutmix", cfg.cutmix},
      {"cutmix_p", cfg.cutmix_p},
      {"cutmix_beta", cfg.cutmix_beta},
      {"targets", target_mode_name(cfg.targets)},
      {"eval_every", cfg.eval_every},
      {"seed", cfg.seed},
  };
  return j.dump();
}

namespace {

// Batch boundaries over n items; a trailing single item joins the previous
// batch so every batch has at least two samples for batch normalization.
std::vector<std::pair<int, int>> batch_bounds(int n, int batch) {
  std::vector<std::pair<int, int>> out;
  for (int b = 0; b < n; b += batch) out.emplace_back(b, std::min(n, b + batch));
  if (out.size() > 1 && out.back().second - out.back().first == 1) {
    out.pop_back();
    out.back().second = n;
  }
  return out;
}

}  // namespace

StudentResult train_student(const CondensedDataset& cd, const CropLabelArchive& archive,
                            const EvalConfig& cfg, const LabeledDataset& val,
                            const StudentSubset& subset) {
  validate_eval_config(cfg);
  validate_condensed(cd);
  const ArchiveMeta& meta = archive.meta;
  if (cfg.epochs > meta.epochs) {
    throw ConfigError("eval: " + std::to_string(cfg.epochs) + " epochs requested, archive holds " +
                      std::to_string(meta.epochs));
  }
  if (meta.num_images != cd.size() || meta.num_classes != cd.num_classes ||
      meta.resolution != cd.resolution) {
    throw ConfigError("eval: archive (" + std::to_string(meta.num_images) + " images, " +
                      std::to_string(meta.num_classes) + " classes) does not describe the condensed set (" +
                      std::to_string(cd.size()) + " images, " + std::to_string(cd.num_classes) +
                      " classes)");
  }
  if (val.size() > 0 && val.resolution != cd.resolution) {
    throw ConfigError("eval: validation resolution does not match the condensed set");
  }

  BackboneSpec spec = cfg.student;
  spec.input_resolution = cd.resolution;
  spec.num_classes = cd.num_classes;
  spec.channels = cd.channels;
  Model<float> model = build_backbone<float>(spec, cfg.seed);
  Optimizer<float> opt(cfg.optimizer, model.params());
  std::mt19937_64 rng(cfg.seed ^ 0xe7a1u);

  std::vector<int> images = subset.images;
  if (images.empty()) {
    images.resize(cd.size());
    std::iota(images.begin(), images.end(), 0);
  }
  const int k = cd.num_classes;
  std::vector<bool> active;
  if (!subset.classes.empty()) {
    active.assign(k, false);
    for (int c : subset.classes) active.at(c) = true;
  }
  auto on = [&](int c) { return active.empty() || active[c]; };

  const int n = static_cast<int>(images.size());
  if (n < 1) throw ConfigError("eval: no training images selected");
  const int res = cd.resolution, ch = cd.channels;
  const std::size_t stride = static_cast<std::size_t>(ch) * res * res;
  const auto bounds = batch_bounds(n, cfg.batch_size);
  const long total_steps = static_cast<long>(bounds.size()) * cfg.epochs;
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  StudentResult result;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto perm = shuffled(n, rng);
    double loss_sum = 0;
    for (const auto& [begin, end] : bounds) {
      const int b = end - begin;
      Tensor<float> x({b, ch, res, res});
      Tensor<float> targets({b, k});
      for (int i = 0; i < b; ++i) {
        const int img = images[perm[begin + i]];
        const CropRecord& rec = archive.records[img][epoch];
        resized_crop(cd.images.data() + img * stride, ch, res, res, rec.rect, rec.hflip, res, res,
                     x.data() + i * stride);
        float* t = targets.data() + static_cast<std::size_t>(i) * k;
        if (cfg.targets == TargetMode::kClassLabel) {
          t[cd.hard_labels[img]] = 1;
          continue;
        }
        if (cfg.targets == TargetMode::kArgmax) {
          int best = -1;
          for (int c = 0; c < k; ++c) {
            if (on(c) && (best < 0 || rec.soft_label[c] > rec.soft_label[best])) best = c;
          }
          t[best] = 1;
          continue;
        }
        double mass = 0;
        for (int c = 0; c < k; ++c) mass += on(c) ? rec.soft_label[c] : 0.0f;
        for (int c = 0; c < k; ++c) {
          t[c] = on(c) ? (active.empty() ? rec.soft_label[c]
                                         : static_cast<float>(rec.soft_label[c] / mass))
                       : 0.0f;
        }
      }
      if (cfg.cutmix && unit(rng) < cfg.cutmix_p) {
        const auto partner = shuffled(b, rng);
        const CropRect box = cutmix_box(res, res, sample_beta(cfg.cutmix_beta, rng), rng);
        const double lam = 1.0 - static_cast<double>(box.area()) / (res * res);
        const Tensor<float> xs = x, ts = targets;
        for (int i = 0; i < b; ++i) {
          for (int c = 0; c < ch; ++c) {
            for (int y = box.top; y < box.top + box.height; ++y) {
              for (int xx = box.left; xx < box.left + box.width; ++xx) {
                const std::size_t off = (static_cast<std::size_t>(c) * res + y) * res + xx;
                x[i * stride + off] = xs[partner[i] * stride + off];
              }
            }
          }
          for (int c = 0; c < k; ++c) {
            targets[i * k + c] =
                static_cast<float>(lam * ts[i * k + c] + (1 - lam) * ts[partner[i] * k + c]);
          }
        }
      }
      opt.zero_grad();
      const Tensor<float> logits = model.forward(x, nn::Mode::kTrain);
      Tensor<float> grad;
      const float loss = soft_cross_entropy(logits, targets, &grad, active);
      if (!std::isfinite(loss)) {
        throw DivergenceError("student training diverged at epoch " + std::to_string(epoch));
      }
      model.backward(grad);
      opt.step(cosine_lr(cfg.optimizer.lr, step, total_steps));
      ++step;
      result.step_losses.push_back(loss);
      loss_sum += static_cast<double>(loss) * b;
    }
    EpochRecord rec{epoch, loss_sum / n, -1};
    const bool last = epoch + 1 == cfg.epochs;
    const bool due = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
    if (val.size() > 0 && (last || due)) rec.val_top1 = top1(model, val, subset.classes);
    spdlog::debug("student epoch {} loss {:.4f} val {:.4f}", epoch, rec.train_loss, rec.val_top1);
    result.history.push_back(rec);
  }
  result.final_top1 = std::max(0.0, result.history.back().val_top1);

  CheckpointMeta cm;
  cm.epochs_trained = cfg.epochs;
  if (cfg.cutmix) cm.augmentations_used = {"cutmix"};
  cm.val_top1 = result.final_top1;
  cm.seed = cfg.seed;
  cm.dataset = cd.dataset;
  result.student = make_checkpoint(model, spec, cm);
  return result;
}

}  // namespace condense
