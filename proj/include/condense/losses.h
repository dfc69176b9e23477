#pragma once

#include <span>
#include <vector>

#include "condense/tensor.h"

namespace condense {

// Row-wise log-softmax of N x K logits. With a non-empty `active` mask,
// inactive classes are excluded (their log-probability is -inf).
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& logits, const std::vector<bool>& active = {});

// Mean hard-label cross-entropy; writes dL/dlogits when `grad` is non-null.
template <typename T>
T cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels, Tensor<T>* grad,
                const std::vector<bool>& active = {});

// Mean over rows of -<targets_i, log softmax(logits_i)>; targets N x K.
template <typename T>
T soft_cross_entropy(const Tensor<T>& logits, const Tensor<T>& targets, Tensor<T>* grad,
                     const std::vector<bool>& active = {});

// -<soft_label, student_log_probs> for one sample.
double kd_loss(std::span<const double> student_log_probs, std::span<const double> soft_label);

// softmax(logits / tau), evaluated in double.
std::vector<double> softmax_temperature(std::span<const float> logits, double tau);

}  // namespace condense
