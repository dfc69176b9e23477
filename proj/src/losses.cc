#include "condense/losses.h"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace condense {

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& logits, const std::vector<bool>& active) {
  const int n = logits.dim(0), k = logits.dim(1);
  if (!active.empty() && static_cast<int>(active.size()) != k) {
    throw std::invalid_argument("class mask size does not match logits");
  }
  auto on = [&](int c) { return active.empty() || active[c]; };
  Tensor<T> out(logits.shape());
  for (int i = 0; i < n; ++i) {
    const T* row = logits.data() + static_cast<std::size_t>(i) * k;
    T* dst = out.data() + static_cast<std::size_t>(i) * k;
    T mx = -std::numeric_limits<T>::infinity();
    for (int c = 0; c < k; ++c) {
      if (on(c)) mx = std::max(mx, row[c]);
    }
    T sum = 0;
    for (int c = 0; c < k; ++c) {
      if (on(c)) sum += std::exp(row[c] - mx);
    }
    const T lse = mx + std::log(sum);
    for (int c = 0; c < k; ++c) {
      dst[c] = on(c) ? row[c] - lse : -std::numeric_limits<T>::infinity();
    }
  }
  return out;
}

template <typename T>
T cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels, Tensor<T>* grad,
                const std::vector<bool>& active) {
  const int n = logits.dim(0), k = logits.dim(1);
  const Tensor<T> lp = log_softmax(logits, active);
  if (grad) *grad = Tensor<T>(logits.shape());
  T loss = 0;
  for (int i = 0; i < n; ++i) {
    loss -= lp[static_cast<std::size_t>(i) * k + labels[i]];
    if (!grad) continue;
    for (int c = 0; c < k; ++c) {
      const std::size_t idx = static_cast<std::size_t>(i) * k + c;
      const T p = std::isinf(lp[idx]) ? T(0) : std::exp(lp[idx]);
      (*grad)[idx] = (p - (c == labels[i] ? T(1) : T(0))) / n;
    }
  }
  return loss / n;
}

template <typename T>
T soft_cross_entropy(const Tensor<T>& logits, const Tensor<T>& targets, Tensor<T>* grad,
                     const std::vector<bool>& active) {
  const int n = logits.dim(0), k = logits.dim(1);
  if (targets.shape() != logits.shape()) throw std::invalid_argument("soft target shape mismatch");
  const Tensor<T> lp = log_softmax(logits, active);
  if (grad) *grad = Tensor<T>(logits.shape());
  T loss = 0;
  for (int i = 0; i < n; ++i) {
    T mass = 0;
    for (int c = 0; c < k; ++c) {
      const std::size_t idx = static_cast<std::size_t>(i) * k + c;
      if (targets[idx] != T(0)) loss -= targets[idx] * lp[idx];
      mass += targets[idx];
    }
    if (!grad) continue;
    for (int c = 0; c < k; ++c) {
      const std::size_t idx = static_cast<std::size_t>(i) * k + c;
      const T p = std::isinf(lp[idx]) ? T(0) : std::exp(lp[idx]);
      (*grad)[idx] = (mass * p - targets[idx]) / n;
    }
  }
  return loss / n;
}

double kd_loss(std::span<const double> student_log_probs, std::span<const double> soft_label) {
  if (student_log_probs.size() != soft_label.size()) {
    throw std::invalid_argument("kd_loss: length mismatch");
  }
  double loss = 0;
  for (std::size_t c = 0; c < soft_label.size(); ++c) {
    if (soft_label[c] != 0.0) loss -= soft_label[c] * student_log_probs[c];
  }
  return loss;
}

std::vector<double> softmax_temperature(std::span<const float> logits, double tau) {
  if (!(tau > 0)) throw std::invalid_argument("temperature must be positive");
  double mx = -std::numeric_limits<double>::infinity();
  for (float v : logits) mx = std::max(mx, static_cast<double>(v) / tau);
  std::vector<double> out(logits.size());
  double sum = 0;
  for (std::size_t c = 0; c < logits.size(); ++c) {
    out[c] = std::exp(static_cast<double>(logits[c]) / tau - mx);
    sum += out[c];
  }
  for (double& v : out) v /= sum;
  return out;
}

template Tensor<float> log_softmax(const Tensor<float>&, const std::vector<bool>&);
template Tensor<double> log_softmax(const Tensor<double>&, const std::vector<bool>&);
template float cross_entropy(const Tensor<float>&, const std::vector<int>&, Tensor<float>*,
                             const std::vector<bool>&);
template double cross_entropy(const Tensor<double>&, const std::vector<int>&, Tensor<double>*,
                              const std::vector<bool>&);
template float soft_cross_entropy(const Tensor<float>&, const Tensor<float>&, Tensor<float>*,
                                  const std::vector<bool>&);
template double soft_cross_entropy(const Tensor<double>&, const Tensor<double>&, Tensor<double>*,
                                   const std::vector<bool>&);

}  // namespace condense
