#include <Eigen/Core>
#include <cmath>
#include <stdexcept>

#include "condense/nn/layers.h"

namespace condense::nn {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using StridedMap = Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CStridedMap = Eigen::Map<const MatR<T>, 0, Eigen::OuterStride<>>;

}  // namespace

template <typename T>
PatchEmbed<T>::PatchEmbed(int in_channels, int embed_dim, int patch, int resolution,
                          std::mt19937_64& rng)
    : dim_(embed_dim),
      num_patches_((resolution / patch) * (resolution / patch)),
      proj_(in_channels, embed_dim, patch, patch, 0, true, rng),
      cls_({embed_dim}),
      cls_grad_({embed_dim}),
      pos_({num_patches_ + 1, embed_dim}),
      pos_grad_({num_patches_ + 1, embed_dim}) {
  std::normal_distribution<double> normal(0.0, 0.02);
  for (auto& v : cls_.values()) v = static_cast<T>(normal(rng));
  for (auto& v : pos_.values()) v = static_cast<T>(normal(rng));
}

template <typename T>
Tensor<T> PatchEmbed<T>::forward(const Tensor<T>& x, Mode mode) {
  Tensor<T> conv = proj_.forward(x, mode);
  conv_shape_ = conv.shape();
  const int n = conv.dim(0);
  const int patches = conv.dim(2) * conv.dim(3);
  if (patches != num_patches_) throw std::invalid_argument("patch embed resolution mismatch");
  const int tokens = patches + 1;
  Tensor<T> out({n, tokens, dim_});
  for (int i = 0; i < n; ++i) {
    T* o = out.data() + static_cast<std::size_t>(i) * tokens * dim_;
    for (int d = 0; d < dim_; ++d) o[d] = cls_[d] + pos_[d];
    const T* c = conv.data() + static_cast<std::size_t>(i) * dim_ * patches;
    for (int d = 0; d < dim_; ++d) {
      for (int p = 0; p < patches; ++p) {
        o[(1 + p) * dim_ + d] = c[d * patches + p] + pos_[(1 + p) * dim_ + d];
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> PatchEmbed<T>::backward(const Tensor<T>& grad_out) {
  const int n = grad_out.dim(0), tokens = grad_out.dim(1);
  const int patches = tokens - 1;
  Tensor<T> gconv(conv_shape_);
  for (int i = 0; i < n; ++i) {
    const T* g = grad_out.data() + static_cast<std::size_t>(i) * tokens * dim_;
    if (this->param_grads_) {
      for (int d = 0; d < dim_; ++d) cls_grad_[d] += g[d];
      for (std::size_t k = 0; k < pos_.size(); ++k) pos_grad_[k] += g[k];
    }
    T* c = gconv.data() + static_cast<std::size_t>(i) * dim_ * patches;
    for (int d = 0; d < dim_; ++d) {
      for (int p = 0; p < patches; ++p) c[d * patches + p] = g[(1 + p) * dim_ + d];
    }
  }
  return proj_.backward(gconv);
}

template <typename T>
void PatchEmbed<T>::collect_params(const std::string& prefix, std::vector<Param<T>>& out) {
  out.push_back({prefix + "cls_token", &cls_, &cls_grad_, false});
  out.push_back({prefix + "pos_embed", &pos_, &pos_grad_, false});
  Composite<T>::collect_params(prefix, out);
}

template <typename T>
std::vector<std::pair<std::string, Layer<T>*>> PatchEmbed<T>::children() {
  return {{"proj", &proj_}};
}

template <typename T>
SelfAttention<T>::SelfAttention(int dim, int heads, std::mt19937_64& rng)
    : dim_(dim), heads_(heads), qkv_(dim, 3 * dim, true, rng), proj_(dim, dim, true, rng) {
  if (dim % heads != 0) throw std::invalid_argument("attention dim must divide by heads");
}

template <typename T>
Tensor<T> SelfAttention<T>::forward(const Tensor<T>& x, Mode mode) {
  in_shape_ = x.shape();
  const int n = x.dim(0), t = x.dim(1);
  const int dh = dim_ / heads_;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  Tensor<T> qkv = qkv_.forward(x, mode);
  qkv_out_ = std::move(qkv.storage());
  probs_.assign(static_cast<std::size_t>(n) * heads_ * t * t, T(0));
  Tensor<T> attn({n, t, dim_});
  for (int i = 0; i < n; ++i) {
    const T* base = qkv_out_.data() + static_cast<std::size_t>(i) * t * 3 * dim_;
    for (int h = 0; h < heads_; ++h) {
      CStridedMap<T> q(base + h * dh, t, dh, Eigen::OuterStride<>(3 * dim_));
      CStridedMap<T> k(base + dim_ + h * dh, t, dh, Eigen::OuterStride<>(3 * dim_));
      CStridedMap<T> v(base + 2 * dim_ + h * dh, t, dh, Eigen::OuterStride<>(3 * dim_));
      Eigen::Map<MatR<T>> p(probs_.data() + (static_cast<std::size_t>(i) * heads_ + h) * t * t, t,
                            t);
      p.noalias() = (q * k.transpose()) * scale;
      for (int r = 0; r < t; ++r) {
        const T mx = p.row(r).maxCoeff();
        T z = 0;
        for (int c = 0; c < t; ++c) z += p(r, c) = std::exp(p(r, c) - mx);
        for (int c = 0; c < t; ++c) p(r, c) /= z;
      }
      StridedMap<T> o(attn.data() + static_cast<std::size_t>(i) * t * dim_ + h * dh, t, dh,
                      Eigen::OuterStride<>(dim_));
      o.noalias() = p * v;
    }
  }
  return proj_.forward(attn, mode);
}

template <typename T>
Tensor<T> SelfAttention<T>::backward(const Tensor<T>& grad_out) {
  const int n = in_shape_[0], t = in_shape_[1];
  const int dh = dim_ / heads_;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  Tensor<T> gattn = proj_.backward(grad_out);
  Tensor<T> gqkv({n, t, 3 * dim_});
  MatR<T> dp(t, t), ds(t, t);
  for (int i = 0; i < n; ++i) {
    const T* base = qkv_out_.data() + static_cast<std::size_t>(i) * t * 3 * dim_;
    T* gbase = gqkv.data() + static_cast<std::size_t>(i) * t * 3 * dim_;
    for (int h = 0; h < heads_; ++h) {
      const Eigen::OuterStride<> s3(3 * dim_);
      CStridedMap<T> q(base + h * dh, t, dh, s3);
      CStridedMap<T> k(base + dim_ + h * dh, t, dh, s3);
      CStridedMap<T> v(base + 2 * dim_ + h * dh, t, dh, s3);
      StridedMap<T> gq(gbase + h * dh, t, dh, s3);
      StridedMap<T> gk(gbase + dim_ + h * dh, t, dh, s3);
      StridedMap<T> gv(gbase + 2 * dim_ + h * dh, t, dh, s3);
      Eigen::Map<const MatR<T>> p(
          probs_.data() + (static_cast<std::size_t>(i) * heads_ + h) * t * t, t, t);
      CStridedMap<T> go(gattn.data() + static_cast<std::size_t>(i) * t * dim_ + h * dh, t, dh,
                        Eigen::OuterStride<>(dim_));
      gv.noalias() = p.transpose() * go;
      dp.noalias() = go * v.transpose();
      for (int r = 0; r < t; ++r) {
        T dot = 0;
        for (int c = 0; c < t; ++c) dot += dp(r, c) * p(r, c);
        ds.row(r) = p.row(r).array() * (dp.row(r).array() - dot);
      }
      gq.noalias() = (ds * k) * scale;
      gk.noalias() = (ds.transpose() * q) * scale;
    }
  }
  return qkv_.backward(gqkv);
}

template <typename T>
std::vector<std::pair<std::string, Layer<T>*>> SelfAttention<T>::children() {
  return {{"qkv", &qkv_}, {"proj", &proj_}};
}

template <typename T>
TransformerBlock<T>::TransformerBlock(LayerPtr<T> norm1, LayerPtr<T> attn, LayerPtr<T> norm2,
                                      LayerPtr<T> ffn)
    : norm1_(std::move(norm1)), attn_(std::move(attn)), norm2_(std::move(norm2)), ffn_(std::move(ffn)) {}

template <typename T>
Tensor<T> TransformerBlock<T>::forward(const Tensor<T>& x, Mode mode) {
  Tensor<T> z = attn_->forward(norm1_->forward(x, mode), mode);
  z += x;
  Tensor<T> out = ffn_->forward(norm2_->forward(z, mode), mode);
  out += z;
  return out;
}

template <typename T>
Tensor<T> TransformerBlock<T>::backward(const Tensor<T>& grad_out) {
  Tensor<T> gz = norm2_->backward(ffn_->backward(grad_out));
  gz += grad_out;
  Tensor<T> gx = norm1_->backward(attn_->backward(gz));
  gx += gz;
  return gx;
}

template <typename T>
std::vector<std::pair<std::string, Layer<T>*>> TransformerBlock<T>::children() {
  return {{"norm1", norm1_.get()}, {"attn", attn_.get()}, {"norm2", norm2_.get()},
          {"ffn", ffn_.get()}};
}

template <typename T>
Tensor<T> ClassToken<T>::forward(const Tensor<T>& x, Mode) {
  in_shape_ = x.shape();
  const int n = x.dim(0), t = x.dim(1), d = x.dim(2);
  Tensor<T> out({n, d});
  for (int i = 0; i < n; ++i) {
    std::copy_n(x.data() + static_cast<std::size_t>(i) * t * d, d, out.data() + i * d);
  }
  return out;
}

template <typename T>
Tensor<T> ClassToken<T>::backward(const Tensor<T>& grad_out) {
  Tensor<T> g(in_shape_);
  const int n = in_shape_[0], t = in_shape_[1], d = in_shape_[2];
  for (int i = 0; i < n; ++i) {
    std::copy_n(grad_out.data() + i * d, d, g.data() + static_cast<std::size_t>(i) * t * d);
  }
  return g;
}

template class PatchEmbed<float>;
template class PatchEmbed<double>;
template class SelfAttention<float>;
template class SelfAttention<double>;
template class TransformerBlock<float>;
template class TransformerBlock<double>;
template class ClassToken<float>;
template class ClassToken<double>;

}  // namespace condense::nn
