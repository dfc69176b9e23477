#include "condense/optim.h"

#include <cmath>
#include <numbers>

#include "condense/errors.h"

namespace condense {

std::string optimizer_name(OptimizerKind kind) {
  return kind == OptimizerKind::kSgd ? "sgd" : "adamw";
}

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "sgd") return OptimizerKind::kSgd;
  if (name == "adamw") return OptimizerKind::kAdamW;
  throw ConfigError("unknown optimizer '" + name + "' (expected sgd or adamw)");
}

double cosine_lr(double base, long step, long total) {
  if (total <= 0) return base;
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total));
}

template <typename T>
Optimizer<T>::Optimizer(const OptimizerConfig& config, std::vector<nn::Param<T>> params)
    : config_(config), params_(std::move(params)) {
  for (const auto& p : params_) {
    first_.emplace_back(p.value->size(), T(0));
    if (config_.kind == OptimizerKind::kAdamW) second_.emplace_back(p.value->size(), T(0));
  }
}

template <typename T>
void Optimizer<T>::zero_grad() {
  for (auto& p : params_) p.grad->zero();
}

template <typename T>
void Optimizer<T>::step(double lr) {
  ++steps_;
  const T lr_t = static_cast<T>(lr);
  const T wd = static_cast<T>(config_.weight_decay);
  if (config_.kind == OptimizerKind::kSgd) {
    const T mom = static_cast<T>(config_.momentum);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      auto& buf = first_[k];
      const T decay = p.decay ? wd : T(0);
      for (std::size_t i = 0; i < p.value->size(); ++i) {
        const T g = (*p.grad)[i] + decay * (*p.value)[i];
        buf[i] = steps_ == 1 ? g : mom * buf[i] + g;
        (*p.value)[i] -= lr_t * buf[i];
      }
    }
    return;
  }
  const T b1 = static_cast<T>(config_.beta1), b2 = static_cast<T>(config_.beta2);
  const T eps = static_cast<T>(config_.eps);
  const T c1 = T(1) - std::pow(b1, static_cast<T>(steps_));
  const T c2 = T(1) - std::pow(b2, static_cast<T>(steps_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    auto& m = first_[k];
    auto& v = second_[k];
    const T decay = p.decay ? wd : T(0);
    for (std::size_t i = 0; i < p.value->size(); ++i) {
      const T g = (*p.grad)[i];
      (*p.value)[i] *= T(1) - lr_t * decay;
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g * g;
      (*p.value)[i] -= lr_t * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
}

template class Optimizer<float>;
template class Optimizer<double>;

}  // namespace condense
