#pragma once

#include <random>
#include <vector>

#include "condense/data.h"
#include "condense/model.h"

namespace condense {

// Rows `indices` of an N x ... tensor.
Tensor<float> gather_rows(const Tensor<float>& src, const std::vector<int>& indices);

// Fraction of `val` samples whose argmax prediction equals the label, in
// kEval mode. With `classes` non-empty only those classes are scored and
// predictions are restricted to them.
double top1(Model<float>& model, const LabeledDataset& val, const std::vector<int>& classes = {});

// Argmax over the active classes of each row.
std::vector<int> argmax_rows(const Tensor<float>& logits, const std::vector<bool>& active = {});

// Fisher-Yates permutation of [0, n).
std::vector<int> shuffled(int n, std::mt19937_64& rng);

}  // namespace condense
