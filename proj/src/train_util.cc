#include "condense/train_util.h"

#include <algorithm>
#include <numeric>

namespace condense {

Tensor<float> gather_rows(const Tensor<float>& src, const std::vector<int>& indices) {
  const std::size_t stride = src.size() / static_cast<std::size_t>(src.dim(0));
  Shape shape = src.shape();
  shape[0] = static_cast<int>(indices.size());
  Tensor<float> out(shape);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(src.data() + indices[i] * stride, stride, out.data() + i * stride);
  }
  return out;
}

std::vector<int> argmax_rows(const Tensor<float>& logits, const std::vector<bool>& active) {
  const int n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(n, -1);
  for (int i = 0; i < n; ++i) {
    const float* row = logits.data() + static_cast<std::size_t>(i) * k;
    for (int c = 0; c < k; ++c) {
      if (!active.empty() && !active[c]) continue;
      if (out[i] < 0 || row[c] > row[out[i]]) out[i] = c;
    }
  }
  return out;
}

double top1(Model<float>& model, const LabeledDataset& val, const std::vector<int>& classes) {
  std::vector<int> idx;
  std::vector<bool> active;
  if (classes.empty()) {
    idx.resize(val.size());
    std::iota(idx.begin(), idx.end(), 0);
  } else {
    idx = val.indices_of(classes);
    active.assign(model.num_classes(), false);
    for (int c : classes) active.at(c) = true;
  }
  if (idx.empty()) return 0.0;
  constexpr int kChunk = 250;
  long correct = 0;
  for (std::size_t b = 0; b < idx.size(); b += kChunk) {
    const std::vector<int> chunk(idx.begin() + b, idx.begin() + std::min(idx.size(), b + kChunk));
    const auto pred = argmax_rows(model.forward(gather_rows(val.images, chunk), nn::Mode::kEval),
                                  active);
    for (std::size_t i = 0; i < chunk.size(); ++i) correct += pred[i] == val.labels[chunk[i]];
  }
  return static_cast<double>(correct) / static_cast<double>(idx.size());
}

std::vector<int> shuffled(int n, std::mt19937_64& rng) {
  std::vector<int> out(n);
  std::iota(out.begin(), out.end(), 0);
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(rng() % static_cast<std::uint64_t>(i + 1));
    std::swap(out[i], out[j]);
  }
  return out;
}

}  // namespace condense
