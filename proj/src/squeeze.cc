#include "condense/squeeze.h"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>

#include "condense/errors.h"
#include "condense/losses.h"
#include "condense/train_util.h"

namespace condense {

namespace {

const std::vector<std::string> kAugmentations = {"random_resized_crop", "mixup", "cutmix"};

bool has(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

}  // namespace

void validate_squeeze_config(const SqueezeConfig& cfg) {
  if (cfg.epochs < 1) throw ConfigError("squeeze: epochs must be >= 1");
  if (cfg.batch_size < 2) throw ConfigError("squeeze: batch_size must be >= 2");
  if (!(cfg.optimizer.lr > 0)) throw ConfigError("squeeze: lr must be > 0");
  for (const auto& a : cfg.augmentations) {
    if (!has(kAugmentations, a)) throw ConfigError("squeeze: unknown augmentation '" + a + "'");
  }
  if (has(cfg.augmentations, "mixup") && has(cfg.augmentations, "cutmix")) {
    throw ConfigError("squeeze: mixup and cutmix are mutually exclusive");
  }
  validate_crop_params(cfg.crop);
}

std::string squeeze_config_json(const SqueezeConfig& cfg) {
  const nlohmann::json j = {
      {"optimizer", optimizer_name(cfg.optimizer.kind)},
      {"lr", cfg.optimizer.lr},
      {"momentum", cfg.optimizer.momentum},
      {"betas", {cfg.optimizer.beta1, cfg.optimizer.beta2}},
      {"weight_decay", cfg.optimizer.weight_decay},
      {"batch_size", cfg.batch_size},
      {"epochs", cfg.epochs},
      {"augmentations", cfg.augmentations},
      {"mixup_alpha", cfg.mixup_alpha},
      {"cutmix_beta", cfg.cutmix_beta},
      {"crop_scale", {cfg.crop.scale_lo, cfg.crop.scale_hi}},
      {"crop_ratio", {cfg.crop.ratio_lo, cfg.crop.ratio_hi}},
      {"seed", cfg.seed},
  };
  return j.dump();
}

Checkpoint squeeze_train(const LabeledDataset& train, const LabeledDataset& val,
                         const BackboneSpec& spec, const SqueezeConfig& cfg,
                         const SqueezeOptions& options) {
  validate_squeeze_config(cfg);
  validate_spec(spec);
  if (train.resolution != spec.input_resolution || train.channels != spec.channels) {
    throw ConfigError("squeeze: dataset geometry " + std::to_string(train.channels) + "x" +
                      std::to_string(train.resolution) + " does not match backbone " +
                      std::to_string(spec.channels) + "x" + std::to_string(spec.input_resolution));
  }
  if (train.num_classes != spec.num_classes) {
    throw ConfigError("squeeze: dataset has " + std::to_string(train.num_classes) +
                      " classes, backbone " + std::to_string(spec.num_classes));
  }
  Model<float> model = build_backbone<float>(spec, cfg.seed);
  Optimizer<float> opt(cfg.optimizer, model.params());
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);

  const bool rrc = has(cfg.augmentations, "random_resized_crop");
  const bool mixup = has(cfg.augmentations, "mixup");
  const bool cutmix = has(cfg.augmentations, "cutmix");
  const int n = train.size(), k = spec.num_classes, res = spec.input_resolution;
  const int c = spec.channels;
  const std::size_t stride = static_cast<std::size_t>(c) * res * res;
  const int per_epoch = n / cfg.batch_size + (n % cfg.batch_size >= 2 ? 1 : 0);
  const long total_steps = static_cast<long>(per_epoch) * cfg.epochs;
  long step = 0;
  double last_finite = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto perm = shuffled(n, rng);
    double loss_sum = 0;
    long correct = 0, seen = 0;
    for (int begin = 0; begin + 2 <= n; begin += cfg.batch_size) {
      const int end = std::min(n, begin + cfg.batch_size);
      const std::vector<int> idx(perm.begin() + begin, perm.begin() + end);
      const int b = end - begin;
      Tensor<float> x = gather_rows(train.images, idx);
      if (rrc) {
        Tensor<float> cropped(x.shape());
        for (int i = 0; i < b; ++i) {
          const CropRect r = sample_resized_crop(res, res, cfg.crop, rng);
          resized_crop(x.data() + i * stride, c, res, res, r, (rng() & 1u) != 0, res, res,
                       cropped.data() + i * stride);
        }
        x = std::move(cropped);
      }
      Tensor<float> targets({b, k});
      for (int i = 0; i < b; ++i) targets[static_cast<std::size_t>(i) * k + train.labels[idx[i]]] = 1;
      if (mixup || cutmix) {
        const auto partner = shuffled(b, rng);
        double lam = sample_beta(mixup ? cfg.mixup_alpha : cfg.cutmix_beta, rng);
        const Tensor<float> xs = x;
        if (mixup) {
          for (int i = 0; i < b; ++i) {
            for (std::size_t p = 0; p < stride; ++p) {
              x[i * stride + p] = static_cast<float>(lam * xs[i * stride + p] +
                                                     (1 - lam) * xs[partner[i] * stride + p]);
            }
          }
        } else {
          const CropRect box = cutmix_box(res, res, lam, rng);
          for (int i = 0; i < b; ++i) {
            for (int ch = 0; ch < c; ++ch) {
              for (int y = box.top; y < box.top + box.height; ++y) {
                for (int xx = box.left; xx < box.left + box.width; ++xx) {
                  const std::size_t off = (static_cast<std::size_t>(ch) * res + y) * res + xx;
                  x[i * stride + off] = xs[partner[i] * stride + off];
                }
              }
            }
          }
          lam = 1.0 - static_cast<double>(box.area()) / (res * res);
        }
        const Tensor<float> t0 = targets;
        for (int i = 0; i < b; ++i) {
          for (int j = 0; j < k; ++j) {
            targets[i * k + j] = static_cast<float>(lam * t0[i * k + j] + (1 - lam) * t0[partner[i] * k + j]);
          }
        }
      }
      opt.zero_grad();
      const Tensor<float> logits = model.forward(x, nn::Mode::kTrain);
      Tensor<float> grad;
      const float loss = soft_cross_entropy(logits, targets, &grad);
      if (!std::isfinite(loss)) {
        throw DivergenceError("squeeze diverged at epoch " + std::to_string(epoch) + " step " +
                              std::to_string(step) + "; last finite loss " +
                              std::to_string(last_finite));
      }
      last_finite = loss;
      model.backward(grad);
      opt.step(cosine_lr(cfg.optimizer.lr, step, total_steps));
      ++step;
      loss_sum += static_cast<double>(loss) * b;
      const auto pred = argmax_rows(logits);
      for (int i = 0; i < b; ++i) correct += pred[i] == train.labels[idx[i]];
      seen += b;
    }
    const double mean_loss = loss_sum / std::max<long>(seen, 1);
    const double acc = static_cast<double>(correct) / std::max<long>(seen, 1);
    spdlog::debug("squeeze epoch {} loss {:.4f} train acc {:.4f}", epoch, mean_loss, acc);
    if (options.on_epoch) options.on_epoch(epoch, mean_loss, acc);
  }

  CheckpointMeta meta;
  meta.epochs_trained = cfg.epochs;
  meta.augmentations_used = cfg.augmentations;
  meta.seed = cfg.seed;
  meta.dataset = train.name;
  meta.val_top1 = val.size() > 0 ? top1(model, val) : 0.0;
  return make_checkpoint(model, spec, meta);
}

double evaluate_checkpoint(const Checkpoint& checkpoint, const LabeledDataset& val) {
  if (val.resolution != checkpoint.spec.input_resolution) {
    throw ConfigError("evaluate: dataset resolution does not match checkpoint");
  }
  Model<float> model = instantiate<float>(checkpoint);
  return top1(model, val);
}

}  // namespace condense
