#include "condense/recover.h"

#include <spdlog/spdlog.h>

#include <cmath>
#include <nlohmann/json.hpp>
#include <sstream>

#include "condense/errors.h"
#include "condense/io_util.h"
#include "condense/losses.h"
#include "condense/optim.h"

namespace condense {

RecoverConfig recover_defaults(int resolution) {
  RecoverConfig cfg;
  if (resolution >= 224) {
    cfg.alpha_bn = 0.01;
    cfg.lr = 0.25;
    cfg.iterations = 2000;
  }
  return cfg;
}

void validate_recover_config(const RecoverConfig& cfg) {
  auto fail = [](const std::string& m) { throw ConfigError("recover: " + m); };
  if (cfg.iterations < 1) fail("iterations must be >= 1");
  if (cfg.ipc < 1) fail("ipc must be >= 1");
  if (cfg.batch_size < 1) fail("batch_size must be >= 1");
  if (cfg.alpha_ce < 0 || cfg.alpha_bn < 0 || cfg.alpha_tv < 0 || cfg.alpha_l2 < 0) {
    fail("loss weights must be >= 0");
  }
  if (!(cfg.lr > 0)) fail("lr must be > 0");
  if (cfg.beta1 < 0 || cfg.beta1 >= 1 || cfg.beta2 < 0 || cfg.beta2 >= 1) {
    fail("betas must lie in [0, 1)");
  }
  if (!(cfg.tv_beta > 0)) fail("tv_beta must be > 0");
  if (cfg.init_std < 0) fail("init_std must be >= 0");
  validate_crop_params(cfg.crop);
}

std::string recover_config_json(const RecoverConfig& cfg) {
  const nlohmann::json j = {
      {"alpha_ce", cfg.alpha_ce},
      {"alpha_bn", cfg.alpha_bn},
      {"alpha_tv", cfg.alpha_tv},
      {"alpha_l2", cfg.alpha_l2},
      {"tv_beta", cfg.tv_beta},
      {"lr", cfg.lr},
      {"beta1", cfg.beta1},
      {"beta2", cfg.beta2},
      {"adam_eps", cfg.adam_eps},
      {"batch_size", cfg.batch_size},
      {"iterations", cfg.iterations},
      {"crop_scale", {cfg.crop.scale_lo, cfg.crop.scale_hi}},
      {"crop_ratio", {cfg.crop.ratio_lo, cfg.crop.ratio_hi}},
      {"init_mean", cfg.init_mean},
      {"init_std", cfg.init_std},
      {"clamp", cfg.clamp},
      {"ipc", cfg.ipc},
      {"seed", cfg.seed},
  };
  return j.dump();
}

std::string recover_config_hash(const RecoverConfig& cfg) {
  return sha256_hex(recover_config_json(cfg));
}

template <typename T>
SyntheticBatch<T> init_synthetic(int ipc, const std::vector<int>& class_ids, int channels,
                                 int resolution, const RecoverConfig& cfg, std::uint64_t seed) {
  if (ipc < 1) throw ConfigError("ipc must be >= 1");
  if (cfg.init_std < 0) throw ConfigError("init_std must be >= 0");
  SyntheticBatch<T> batch;
  const int n = ipc * static_cast<int>(class_ids.size());
  batch.images = Tensor<T>({n, channels, resolution, resolution}, static_cast<T>(cfg.init_mean));
  batch.targets = layout_labels(class_ids, ipc);
  if (cfg.init_std > 0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(cfg.init_mean, cfg.init_std);
    for (auto& v : batch.images.storage()) v = static_cast<T>(dist(rng));
  }
  return batch;
}

template <typename T>
T tv_regularizer(const T* image, int channels, int height, int width, double beta, T* grad) {
  const T half_beta = static_cast<T>(beta / 2.0);
  T total = 0;
  for (int c = 0; c < channels; ++c) {
    const T* p = image + static_cast<std::size_t>(c) * height * width;
    T* g = grad ? grad + static_cast<std::size_t>(c) * height * width : nullptr;
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const int idx = y * width + x;
        const T h = x + 1 < width ? p[idx + 1] - p[idx] : T(0);
        const T v = y + 1 < height ? p[idx + width] - p[idx] : T(0);
        const T s = h * h + v * v;
        if (s == T(0)) continue;
        total += half_beta == T(1) ? s : std::pow(s, half_beta);
        if (!g) continue;
        const T ds = half_beta == T(1) ? T(1) : half_beta * std::pow(s, half_beta - T(1));
        if (x + 1 < width) {
          g[idx + 1] += ds * T(2) * h;
          g[idx] -= ds * T(2) * h;
        }
        if (y + 1 < height) {
          g[idx + width] += ds * T(2) * v;
          g[idx] -= ds * T(2) * v;
        }
      }
    }
  }
  return total;
}

template <typename T>
T l2_regularizer(const T* values, std::size_t n, T* grad) {
  T ss = 0;
  for (std::size_t i = 0; i < n; ++i) ss += values[i] * values[i];
  const T norm = std::sqrt(ss);
  if (grad && norm > T(0)) {
    for (std::size_t i = 0; i < n; ++i) grad[i] += values[i] / norm;
  }
  return norm;
}

namespace {

// ||a - b||_2 and its gradient with respect to a.
template <typename T>
T distance(const std::vector<T>& a, const std::vector<float>& b, std::vector<T>* grad) {
  T ss = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T d = a[i] - static_cast<T>(b[i]);
    ss += d * d;
  }
  const T norm = std::sqrt(ss);
  if (grad) {
    grad->assign(a.size(), T(0));
    if (norm > T(0)) {
      for (std::size_t i = 0; i < a.size(); ++i) (*grad)[i] = (a[i] - static_cast<T>(b[i])) / norm;
    }
  }
  return norm;
}

}  // namespace

template <typename T>
T bn_matching_loss(const BatchStats<T>& batch, const std::vector<BNLayerStats>& ref,
                   BatchStats<T>* grads) {
  if (batch.size() != ref.size()) {
    throw StructuralError("bn_matching_loss: " + std::to_string(batch.size()) +
                          " captured layers vs " + std::to_string(ref.size()) + " reference layers");
  }
  if (grads) grads->assign(batch.size(), {});
  T total = 0;
  for (std::size_t l = 0; l < batch.size(); ++l) {
    const auto& [mean, var] = batch[l];
    if (mean.size() != ref[l].running_mean.size() || var.size() != ref[l].running_var.size()) {
      throw StructuralError("bn_matching_loss: channel mismatch at layer " + std::to_string(l));
    }
    total += distance(mean, ref[l].running_mean, grads ? &(*grads)[l].first : nullptr);
    total += distance(var, ref[l].running_var, grads ? &(*grads)[l].second : nullptr);
  }
  return total;
}

template <typename T>
RecoveryLossBreakdown recovery_loss(Model<T>& model, const Tensor<T>& images,
                                    const std::vector<int>& targets,
                                    const std::vector<CropDraw>& draws,
                                    const std::vector<BNLayerStats>& ref, const RecoverConfig& cfg,
                                    std::type_identity_t<Tensor<T>>* grad) {
  const int b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const int r = model.resolution();
  if (static_cast<int>(draws.size()) != b || static_cast<int>(targets.size()) != b) {
    throw std::invalid_argument("recovery_loss: one crop and one target per image required");
  }
  const std::size_t src_stride = static_cast<std::size_t>(c) * h * w;
  const std::size_t dst_stride = static_cast<std::size_t>(c) * r * r;
  Tensor<T> input({b, c, r, r});
  for (int i = 0; i < b; ++i) {
    resized_crop(images.data() + i * src_stride, c, h, w, draws[i].rect, draws[i].hflip, r, r,
                 input.data() + i * dst_stride);
  }

  model.set_bn_capture(true);
  const Tensor<T> logits = model.forward(input, nn::Mode::kEval);
  const auto bns = model.bn_layers();
  BatchStats<T> stats;
  for (auto* bn : bns) stats.emplace_back(bn->batch_mean(), bn->batch_var());

  RecoveryLossBreakdown out;
  BatchStats<T> stat_grads;
  Tensor<T> grad_logits;
  out.r_bn = bn_matching_loss(stats, ref, grad ? &stat_grads : nullptr);
  out.ce = cross_entropy(logits, targets, grad ? &grad_logits : nullptr);

  Tensor<T> prior_grad;
  if (grad) prior_grad = Tensor<T>(input.shape());
  const T inv_b = T(1) / static_cast<T>(b);
  if (cfg.alpha_tv > 0) {
    std::vector<T> g(dst_stride);
    for (int i = 0; i < b; ++i) {
      std::fill(g.begin(), g.end(), T(0));
      out.r_tv += tv_regularizer(input.data() + i * dst_stride, c, r, r, cfg.tv_beta,
                                 grad ? g.data() : nullptr);
      if (!grad) continue;
      const T s = static_cast<T>(cfg.alpha_tv) * inv_b;
      for (std::size_t k = 0; k < dst_stride; ++k) prior_grad[i * dst_stride + k] += s * g[k];
    }
    out.r_tv /= b;
  }
  if (cfg.alpha_l2 > 0) {
    std::vector<T> g(dst_stride);
    for (int i = 0; i < b; ++i) {
      std::fill(g.begin(), g.end(), T(0));
      out.r_l2 += l2_regularizer(input.data() + i * dst_stride, dst_stride,
                                 grad ? g.data() : nullptr);
      if (!grad) continue;
      const T s = static_cast<T>(cfg.alpha_l2) * inv_b;
      for (std::size_t k = 0; k < dst_stride; ++k) prior_grad[i * dst_stride + k] += s * g[k];
    }
    out.r_l2 /= b;
  }
  out.total = cfg.alpha_ce * out.ce + cfg.alpha_bn * out.r_bn + cfg.alpha_tv * out.r_tv +
              cfg.alpha_l2 * out.r_l2;

  if (grad) {
    const T a_ce = static_cast<T>(cfg.alpha_ce), a_bn = static_cast<T>(cfg.alpha_bn);
    for (auto& v : grad_logits.storage()) v *= a_ce;
    if (cfg.alpha_bn > 0) {
      for (std::size_t l = 0; l < bns.size(); ++l) {
        auto gm = std::move(stat_grads[l].first);
        auto gv = std::move(stat_grads[l].second);
        for (auto& v : gm) v *= a_bn;
        for (auto& v : gv) v *= a_bn;
        bns[l]->set_stat_grad(std::move(gm), std::move(gv));
      }
    }
    Tensor<T> grad_input = model.backward(grad_logits);
    grad_input += prior_grad;
    *grad = Tensor<T>(images.shape());
    for (int i = 0; i < b; ++i) {
      resized_crop_backward(grad_input.data() + i * dst_stride, c, h, w, draws[i].rect,
                            draws[i].hflip, r, r, grad->data() + i * src_stride);
    }
  }
  model.set_bn_capture(false);
  return out;
}

ClampRange clamp_range(const Normalization& norm) {
  ClampRange out;
  for (std::size_t c = 0; c < norm.mean.size(); ++c) {
    out.lo.push_back(norm.normalize(static_cast<int>(c), 0.0f));
    out.hi.push_back(norm.normalize(static_cast<int>(c), 1.0f));
  }
  return out;
}

namespace {

std::string describe(const RecoveryLossBreakdown& b) {
  std::ostringstream os;
  os << "ce=" << b.ce << " r_bn=" << b.r_bn << " r_tv=" << b.r_tv << " r_l2=" << b.r_l2
     << " total=" << b.total;
  return os.str();
}

bool finite(const RecoveryLossBreakdown& b) {
  return std::isfinite(b.ce) && std::isfinite(b.r_bn) && std::isfinite(b.r_tv) &&
         std::isfinite(b.r_l2) && std::isfinite(b.total);
}

}  // namespace

template <typename T>
RecoveryLossBreakdown recover_step(SyntheticBatch<T>& batch, Model<T>& model,
                                   const std::vector<BNLayerStats>& ref, const RecoverConfig& cfg,
                                   double lr, std::mt19937_64& rng,
                                   const std::optional<ClampRange>& clamp,
                                   std::vector<CropDraw>* draws_out) {
  const int b = batch.images.dim(0), c = batch.images.dim(1);
  const int h = batch.images.dim(2), w = batch.images.dim(3);
  std::vector<CropDraw> draws(b);
  for (auto& d : draws) {
    d.rect = sample_resized_crop(h, w, cfg.crop, rng);
    d.hflip = (rng() & 1u) != 0;
  }

  Tensor<T> grad;
  const RecoveryLossBreakdown loss =
      recovery_loss(model, batch.images, batch.targets, draws, ref, cfg, &grad);
  if (!finite(loss) || !all_finite(std::span<const T>(grad.values()))) {
    throw DivergenceError("recovery diverged at iteration " + std::to_string(batch.iteration) +
                          " (" + describe(loss) + "); last finite step: " +
                          describe(batch.last_finite));
  }
  batch.last_finite = loss;

  if (batch.adam_m.empty()) {
    batch.adam_m.assign(batch.images.size(), T(0));
    batch.adam_v.assign(batch.images.size(), T(0));
  }
  ++batch.iteration;
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T c1 = T(1) - std::pow(b1, static_cast<T>(batch.iteration));
  const T c2 = T(1) - std::pow(b2, static_cast<T>(batch.iteration));
  const T lr_t = static_cast<T>(lr), eps = static_cast<T>(cfg.adam_eps);
  for (int i = 0; i < b; ++i) {
    const CropRect& rect = draws[i].rect;
    for (int ch = 0; ch < c; ++ch) {
      for (int y = rect.top; y < rect.top + rect.height; ++y) {
        const std::size_t row = ((static_cast<std::size_t>(i) * c + ch) * h + y) * w;
        for (int x = rect.left; x < rect.left + rect.width; ++x) {
          const std::size_t k = row + x;
          const T g = grad[k];
          T& m = batch.adam_m[k];
          T& v = batch.adam_v[k];
          m = b1 * m + (T(1) - b1) * g;
          v = b2 * v + (T(1) - b2) * g * g;
          T& px = batch.images[k];
          px -= lr_t * (m / c1) / (std::sqrt(v / c2) + eps);
          if (clamp) {
            px = std::clamp(px, static_cast<T>(clamp->lo[ch]), static_cast<T>(clamp->hi[ch]));
          }
        }
      }
    }
  }
  if (draws_out) *draws_out = std::move(draws);
  return loss;
}

CondensedDataset recover(const Checkpoint& checkpoint, const RecoverConfig& cfg,
                         const std::vector<int>& class_ids, const Normalization& norm,
                         const RecoverOptions& options) {
  validate_recover_config(cfg);
  const BackboneSpec& spec = checkpoint.spec;
  if (class_ids.empty()) throw ConfigError("recover: no classes requested");
  for (int c : class_ids) {
    if (c < 0 || c >= spec.num_classes) {
      throw ConfigError("recover: class " + std::to_string(c) + " outside the checkpoint's " +
                        std::to_string(spec.num_classes) + " classes");
    }
  }
  if (static_cast<int>(norm.mean.size()) != spec.channels) {
    throw ConfigError("recover: normalization has " + std::to_string(norm.mean.size()) +
                      " channels, checkpoint expects " + std::to_string(spec.channels));
  }
  const auto ref = extract_bn_stats(checkpoint);
  Model<float> model = instantiate<float>(checkpoint);
  model.set_frozen(true);

  const int res = spec.input_resolution, ch = spec.channels;
  const int n_cls = static_cast<int>(class_ids.size());
  const int n = cfg.ipc * n_cls;
  SyntheticBatch<float> all = init_synthetic<float>(cfg.ipc, class_ids, ch, res, cfg, cfg.seed);
  const std::size_t stride = static_cast<std::size_t>(ch) * res * res;
  std::optional<ClampRange> clamp;
  if (cfg.clamp) clamp = clamp_range(norm);

  CondensedDataset cd;
  cd.dataset = checkpoint.meta.dataset;
  cd.ipc = cfg.ipc;
  cd.num_classes = spec.num_classes;
  cd.class_ids = class_ids;
  cd.channels = ch;
  cd.resolution = res;
  cd.hard_labels = all.targets;
  cd.normalization = norm;
  cd.provenance = {checkpoint_id(checkpoint), recover_config_hash(cfg), cfg.iterations, true};

  // Round-robin packing: position j holds copy j / n_cls of class slot j % n_cls.
  std::vector<int> order(n);
  for (int j = 0; j < n; ++j) order[j] = (j % n_cls) * cfg.ipc + j / n_cls;

  const int num_batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  for (int bi = 0; bi < num_batches; ++bi) {
    const int begin = bi * cfg.batch_size, end = std::min(n, begin + cfg.batch_size);
    SyntheticBatch<float> batch;
    batch.images = Tensor<float>({end - begin, ch, res, res});
    for (int j = begin; j < end; ++j) {
      std::copy_n(all.images.data() + order[j] * stride, stride,
                  batch.images.data() + (j - begin) * stride);
      batch.targets.push_back(all.targets[order[j]]);
    }
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                      static_cast<std::uint32_t>(bi), 0x5eedu};
    std::mt19937_64 rng(seq);
    auto write_back = [&] {
      for (int j = begin; j < end; ++j) {
        std::copy_n(batch.images.data() + (j - begin) * stride, stride,
                    all.images.data() + order[j] * stride);
      }
    };
    for (int it = 0; it < cfg.iterations; ++it) {
      RecoveryLossBreakdown loss;
      try {
        loss = recover_step(batch, model, ref, cfg, cosine_lr(cfg.lr, it, cfg.iterations), rng,
                            clamp);
      } catch (const DivergenceError&) {
        if (options.partial_dir) {
          write_back();
          cd.images = all.images;
          cd.provenance.complete = false;
          cd.provenance.iterations = it;
          try {
            save_condensed(cd, *options.partial_dir, false);
          } catch (const IntegrityError& e) {
            spdlog::warn("partial recovery result not saved: {}", e.what());
          }
        }
        throw;
      }
      if (options.on_step) options.on_step(bi, it, loss);
    }
    write_back();
  }
  cd.images = std::move(all.images);
  return cd;
}

template SyntheticBatch<float> init_synthetic(int, const std::vector<int>&, int, int,
                                              const RecoverConfig&, std::uint64_t);
template SyntheticBatch<double> init_synthetic(int, const std::vector<int>&, int, int,
                                               const RecoverConfig&, std::uint64_t);
template float tv_regularizer(const float*, int, int, int, double, float*);
template double tv_regularizer(const double*, int, int, int, double, double*);
template float l2_regularizer(const float*, std::size_t, float*);
template double l2_regularizer(const double*, std::size_t, double*);
template float bn_matching_loss(const BatchStats<float>&, const std::vector<BNLayerStats>&,
                                BatchStats<float>*);
template double bn_matching_loss(const BatchStats<double>&, const std::vector<BNLayerStats>&,
                                 BatchStats<double>*);
template RecoveryLossBreakdown recovery_loss(Model<float>&, const Tensor<float>&,
                                             const std::vector<int>&, const std::vector<CropDraw>&,
                                             const std::vector<BNLayerStats>&,
                                             const RecoverConfig&, Tensor<float>*);
template RecoveryLossBreakdown recovery_loss(Model<double>&, const Tensor<double>&,
                                             const std::vector<int>&, const std::vector<CropDraw>&,
                                             const std::vector<BNLayerStats>&,
                                             const RecoverConfig&, Tensor<double>*);
template RecoveryLossBreakdown recover_step(SyntheticBatch<float>&, Model<float>&,
                                            const std::vector<BNLayerStats>&, const RecoverConfig&,
                                            double, std::mt19937_64&,
                                            const std::optional<ClampRange>&,
                                            std::vector<CropDraw>*);
template RecoveryLossBreakdown recover_step(SyntheticBatch<double>&, Model<double>&,
                                            const std::vector<BNLayerStats>&, const RecoverConfig&,
                                            double, std::mt19937_64&,
                                            const std::optional<ClampRange>&,
                                            std::vector<CropDraw>*);

}  // namespace condense
