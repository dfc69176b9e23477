#include <Eigen/Core>
#include <cmath>
#include <stdexcept>

#include "condense/nn/layers.h"

namespace condense::nn {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

// Column buffer layout: row (c, ky, kx), column (oy, ox).
template <typename T>
void im2col(const T* img, int channels, int height, int width, int kernel, int stride, int pad,
            int out_h, int out_w, T* col) {
  const int cols = out_h * out_w;
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        T* row = col + ((c * kernel + ky) * kernel + kx) * static_cast<std::size_t>(cols);
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= height) {
            std::fill(row + oy * out_w, row + (oy + 1) * out_w, T(0));
            continue;
          }
          const T* src = img + (static_cast<std::size_t>(c) * height + iy) * width;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride - pad + kx;
            row[oy * out_w + ox] = (ix >= 0 && ix < width) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, int channels, int height, int width, int kernel, int stride, int pad,
            int out_h, int out_w, T* img) {
  const int cols = out_h * out_w;
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        const T* row = col + ((c * kernel + ky) * kernel + kx) * static_cast<std::size_t>(cols);
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= height) continue;
          T* dst = img + (static_cast<std::size_t>(c) * height + iy) * width;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < width) dst[ix] += row[oy * out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Conv2d<T>::Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding,
                  bool bias, std::mt19937_64& rng)
    : in_channels_(in_channels),
      out_channels_(out_channels),
      kernel_(kernel),
      stride_(stride),
      padding_(padding),
      has_bias_(bias),
      weight_({out_channels, in_channels, kernel, kernel}),
      weight_grad_({out_channels, in_channels, kernel, kernel}) {
  // Kaiming normal, fan_out, ReLU gain.
  const double fan_out = static_cast<double>(out_channels) * kernel * kernel;
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_out));
  for (auto& w : weight_.values()) w = static_cast<T>(normal(rng));
  if (has_bias_) {
    bias_ = Tensor<T>({out_channels});
    bias_grad_ = Tensor<T>({out_channels});
  }
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x, Mode) {
  if (x.rank() != 4 || x.dim(1) != in_channels_) {
    throw std::invalid_argument("conv2d expects N x " + std::to_string(in_channels_) +
                                " x H x W, got " + shape_str(x.shape()));
  }
  in_shape_ = x.shape();
  const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
  out_h_ = (h + 2 * padding_ - kernel_) / stride_ + 1;
  out_w_ = (w + 2 * padding_ - kernel_) / stride_ + 1;
  const int k = in_channels_ * kernel_ * kernel_;
  const int p = out_h_ * out_w_;
  cols_.resize(static_cast<std::size_t>(n) * k * p);

  Tensor<T> out({n, out_channels_, out_h_, out_w_});
  CMapR<T> wmat(weight_.data(), out_channels_, k);
  const std::size_t in_stride = static_cast<std::size_t>(in_channels_) * h * w;
  for (int i = 0; i < n; ++i) {
    T* col = cols_.data() + static_cast<std::size_t>(i) * k * p;
    im2col(x.data() + i * in_stride, in_channels_, h, w, kernel_, stride_, padding_, out_h_,
           out_w_, col);
    MapR<T> o(out.data() + static_cast<std::size_t>(i) * out_channels_ * p, out_channels_, p);
    o.noalias() = wmat * CMapR<T>(col, k, p);
    if (has_bias_) {
      for (int c = 0; c < out_channels_; ++c) o.row(c).array() += bias_[c];
    }
  }
  return out;
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& grad_out) {
  const int n = in_shape_[0], h = in_shape_[2], w = in_shape_[3];
  const int k = in_channels_ * kernel_ * kernel_;
  const int p = out_h_ * out_w_;
  Tensor<T> grad_in(in_shape_);
  CMapR<T> wmat(weight_.data(), out_channels_, k);
  MapR<T> wgrad(weight_grad_.data(), out_channels_, k);
  MatR<T> dcol(k, p);
  const std::size_t in_stride = static_cast<std::size_t>(in_channels_) * h * w;
  for (int i = 0; i < n; ++i) {
    CMapR<T> g(grad_out.data() + static_cast<std::size_t>(i) * out_channels_ * p, out_channels_,
               p);
    CMapR<T> col(cols_.data() + static_cast<std::size_t>(i) * k * p, k, p);
    if (this->param_grads_) {
      wgrad.noalias() += g * col.transpose();
      if (has_bias_) {
        for (int c = 0; c < out_channels_; ++c) {
          T acc = 0;
          for (int j = 0; j < p; ++j) acc += g(c, j);
          bias_grad_[c] += acc;
        }
      }
    }
    dcol.noalias() = wmat.transpose() * g;
    col2im(dcol.data(), in_channels_, h, w, kernel_, stride_, padding_, out_h_, out_w_,
           grad_in.data() + i * in_stride);
  }
  return grad_in;
}

template <typename T>
void Conv2d<T>::collect_params(const std::string& prefix, std::vector<Param<T>>& out) {
  out.push_back({prefix + "weight", &weight_, &weight_grad_, true});
  if (has_bias_) out.push_back({prefix + "bias", &bias_, &bias_grad_, false});
}

template <typename T>
Linear<T>::Linear(int in_features, int out_features, bool bias, std::mt19937_64& rng)
    : in_(in_features),
      out_(out_features),
      has_bias_(bias),
      weight_({out_features, in_features}),
      weight_grad_({out_features, in_features}) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
  std::uniform_real_distribution<double> uniform(-bound, bound);
  for (auto& w : weight_.values()) w = static_cast<T>(uniform(rng));
  if (has_bias_) {
    bias_ = Tensor<T>({out_features});
    bias_grad_ = Tensor<T>({out_features});
    for (auto& b : bias_.values()) b = static_cast<T>(uniform(rng));
  }
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x, Mode) {
  if (x.dim(-1) != in_) {
    throw std::invalid_argument("linear expects last dim " + std::to_string(in_) + ", got " +
                                shape_str(x.shape()));
  }
  input_ = x;
  const int rows = static_cast<int>(x.size() / in_);
  Shape s = x.shape();
  s.back() = out_;
  Tensor<T> out(s);
  MapR<T> o(out.data(), rows, out_);
  o.noalias() = CMapR<T>(x.data(), rows, in_) * CMapR<T>(weight_.data(), out_, in_).transpose();
  if (has_bias_) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(bias_.data(), out_);
    o.rowwise() += b;
  }
  return out;
}

template <typename T>
Tensor<T> Linear<T>::backward(const Tensor<T>& grad_out) {
  const int rows = static_cast<int>(grad_out.size() / out_);
  CMapR<T> g(grad_out.data(), rows, out_);
  if (this->param_grads_) {
    MapR<T>(weight_grad_.data(), out_, in_).noalias() +=
        g.transpose() * CMapR<T>(input_.data(), rows, in_);
    if (has_bias_) {
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> bg(bias_grad_.data(), out_);
      for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < out_; ++c) bg[c] += g(r, c);
      }
    }
  }
  Tensor<T> grad_in(input_.shape());
  MapR<T>(grad_in.data(), rows, in_).noalias() = g * CMapR<T>(weight_.data(), out_, in_);
  return grad_in;
}

template <typename T>
void Linear<T>::collect_params(const std::string& prefix, std::vector<Param<T>>& out) {
  out.push_back({prefix + "weight", &weight_, &weight_grad_, true});
  if (has_bias_) out.push_back({prefix + "bias", &bias_, &bias_grad_, false});
}

template class Conv2d<float>;
template class Conv2d<double>;
template class Linear<float>;
template class Linear<double>;

}  // namespace condense::nn
