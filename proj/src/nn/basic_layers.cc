#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "condense/nn/layers.h"

namespace condense {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

}  // namespace condense

namespace condense::nn {

template <typename T>
void Composite<T>::collect_params(const std::string& prefix, std::vector<Param<T>>& out) {
  for (auto& [name, child] : children()) child->collect_params(prefix + name + ".", out);
}

template <typename T>
void Composite<T>::collect_bn(std::vector<BatchNorm<T>*>& out) {
  for (auto& [name, child] : children()) child->collect_bn(out);
}

template <typename T>
void Composite<T>::set_param_grads(bool enabled) {
  Layer<T>::set_param_grads(enabled);
  for (auto& [name, child] : children()) child->set_param_grads(enabled);
}

template <typename T>
Tensor<T> ReLU<T>::forward(const Tensor<T>& x, Mode) {
  output_ = x;
  for (auto& v : output_.values()) v = v > T(0) ? v : T(0);
  return output_;
}

template <typename T>
Tensor<T> ReLU<T>::backward(const Tensor<T>& grad_out) {
  Tensor<T> g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(output_[i] > T(0))) g[i] = T(0);
  }
  return g;
}

template <typename T>
Tensor<T> GELU<T>::forward(const Tensor<T>& x, Mode) {
  input_ = x;
  Tensor<T> out = x;
  for (auto& v : out.values()) v = T(0.5) * v * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
  return out;
}

template <typename T>
Tensor<T> GELU<T>::backward(const Tensor<T>& grad_out) {
  Tensor<T> g = grad_out;
  const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const T x = input_[i];
    const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
    const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
    g[i] *= cdf + x * pdf;
  }
  return g;
}

template <typename T>
MaxPool2d<T>::MaxPool2d(int kernel, int stride, int padding)
    : kernel_(kernel), stride_(stride), padding_(padding) {}

template <typename T>
Tensor<T> MaxPool2d<T>::forward(const Tensor<T>& x, Mode) {
  in_shape_ = x.shape();
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = (h + 2 * padding_ - kernel_) / stride_ + 1;
  const int ow = (w + 2 * padding_ - kernel_) / stride_ + 1;
  Tensor<T> out({n, c, oh, ow});
  argmax_.assign(out.size(), 0);
  std::size_t o = 0;
  for (int ni = 0; ni < n; ++ni) {
    for (int ci = 0; ci < c; ++ci) {
      const std::size_t plane = (static_cast<std::size_t>(ni) * c + ci) * h * w;
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox, ++o) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t best_idx = plane;
          for (int ky = 0; ky < kernel_; ++ky) {
            const int iy = oy * stride_ - padding_ + ky;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kernel_; ++kx) {
              const int ix = ox * stride_ - padding_ + kx;
              if (ix < 0 || ix >= w) continue;
              const std::size_t idx = plane + static_cast<std::size_t>(iy) * w + ix;
              if (x[idx] > best) {
                best = x[idx];
                best_idx = idx;
              }
            }
          }
          out[o] = best;
          argmax_[o] = best_idx;
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> MaxPool2d<T>::backward(const Tensor<T>& grad_out) {
  Tensor<T> g(in_shape_);
  for (std::size_t o = 0; o < grad_out.size(); ++o) g[argmax_[o]] += grad_out[o];
  return g;
}

template <typename T>
AvgPool2d<T>::AvgPool2d(int kernel, int stride) : kernel_(kernel), stride_(stride) {}

template <typename T>
Tensor<T> AvgPool2d<T>::forward(const Tensor<T>& x, Mode) {
  in_shape_ = x.shape();
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = (h - kernel_) / stride_ + 1;
  const int ow = (w - kernel_) / stride_ + 1;
  Tensor<T> out({n, c, oh, ow});
  const T scale = T(1) / static_cast<T>(kernel_ * kernel_);
  std::size_t o = 0;
  for (int p = 0; p < n * c; ++p) {
    const T* src = x.data() + static_cast<std::size_t>(p) * h * w;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox, ++o) {
        T s = 0;
        for (int ky = 0; ky < kernel_; ++ky) {
          for (int kx = 0; kx < kernel_; ++kx) s += src[(oy * stride_ + ky) * w + ox * stride_ + kx];
        }
        out[o] = s * scale;
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> AvgPool2d<T>::backward(const Tensor<T>& grad_out) {
  Tensor<T> g(in_shape_);
  const int c = in_shape_[1], h = in_shape_[2], w = in_shape_[3];
  const int oh = grad_out.dim(2), ow = grad_out.dim(3);
  const T scale = T(1) / static_cast<T>(kernel_ * kernel_);
  std::size_t o = 0;
  for (int p = 0; p < in_shape_[0] * c; ++p) {
    T* dst = g.data() + static_cast<std::size_t>(p) * h * w;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox, ++o) {
        const T v = grad_out[o] * scale;
        for (int ky = 0; ky < kernel_; ++ky) {
          for (int kx = 0; kx < kernel_; ++kx) dst[(oy * stride_ + ky) * w + ox * stride_ + kx] += v;
        }
      }
    }
  }
  return g;
}

template <typename T>
Tensor<T> GlobalAvgPool<T>::forward(const Tensor<T>& x, Mode) {
  in_shape_ = x.shape();
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor<T> out({n, c});
  for (std::size_t p = 0; p < out.size(); ++p) {
    T s = 0;
    for (std::size_t i = 0; i < hw; ++i) s += x[p * hw + i];
    out[p] = s / static_cast<T>(hw);
  }
  return out;
}

template <typename T>
Tensor<T> GlobalAvgPool<T>::backward(const Tensor<T>& grad_out) {
  Tensor<T> g(in_shape_);
  const std::size_t hw = static_cast<std::size_t>(in_shape_[2]) * in_shape_[3];
  for (std::size_t p = 0; p < grad_out.size(); ++p) {
    const T v = grad_out[p] / static_cast<T>(hw);
    for (std::size_t i = 0; i < hw; ++i) g[p * hw + i] = v;
  }
  return g;
}

template <typename T>
Tensor<T> Flatten<T>::forward(const Tensor<T>& x, Mode) {
  in_shape_ = x.shape();
  return x.reshaped({x.dim(0), static_cast<int>(x.size() / x.dim(0))});
}

template <typename T>
Tensor<T> Flatten<T>::backward(const Tensor<T>& grad_out) {
  return grad_out.reshaped(in_shape_);
}

template <typename T>
Sequential<T>& Sequential<T>::add(std::string name, LayerPtr<T> layer) {
  layers_.emplace_back(std::move(name), std::move(layer));
  return *this;
}

template <typename T>
Tensor<T> Sequential<T>::forward(const Tensor<T>& x, Mode mode) {
  if (layers_.empty()) return x;
  Tensor<T> h = layers_.front().second->forward(x, mode);
  for (std::size_t i = 1; i < layers_.size(); ++i) h = layers_[i].second->forward(h, mode);
  return h;
}

template <typename T>
Tensor<T> Sequential<T>::backward(const Tensor<T>& grad_out) {
  if (layers_.empty()) return grad_out;
  Tensor<T> g = layers_.back().second->backward(grad_out);
  for (std::size_t i = layers_.size() - 1; i-- > 0;) g = layers_[i].second->backward(g);
  return g;
}

template <typename T>
std::vector<std::pair<std::string, Layer<T>*>> Sequential<T>::children() {
  std::vector<std::pair<std::string, Layer<T>*>> out;
  for (auto& [name, layer] : layers_) out.emplace_back(name, layer.get());
  return out;
}

template <typename T>
Residual<T>::Residual(LayerPtr<T> main, LayerPtr<T> shortcut, std::string kind)
    : main_(std::move(main)), shortcut_(std::move(shortcut)), kind_(std::move(kind)) {}

template <typename T>
Tensor<T> Residual<T>::forward(const Tensor<T>& x, Mode mode) {
  Tensor<T> out = main_->forward(x, mode);
  if (shortcut_) {
    out += shortcut_->forward(x, mode);
  } else {
    out += x;
  }
  for (auto& v : out.values()) v = v > T(0) ? v : T(0);
  output_ = out;
  return out;
}

template <typename T>
Tensor<T> Residual<T>::backward(const Tensor<T>& grad_out) {
  Tensor<T> g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(output_[i] > T(0))) g[i] = T(0);
  }
  Tensor<T> gx = main_->backward(g);
  if (shortcut_) {
    gx += shortcut_->backward(g);
  } else {
    gx += g;
  }
  return gx;
}

template <typename T>
std::vector<std::pair<std::string, Layer<T>*>> Residual<T>::children() {
  std::vector<std::pair<std::string, Layer<T>*>> out{{"main", main_.get()}};
  if (shortcut_) out.emplace_back("shortcut", shortcut_.get());
  return out;
}

template class Composite<float>;
template class Composite<double>;
template class ReLU<float>;
template class ReLU<double>;
template class GELU<float>;
template class GELU<double>;
template class MaxPool2d<float>;
template class MaxPool2d<double>;
template class AvgPool2d<float>;
template class AvgPool2d<double>;
template class GlobalAvgPool<float>;
template class GlobalAvgPool<double>;
template class Flatten<float>;
template class Flatten<double>;
template class Sequential<float>;
template class Sequential<double>;
template class Residual<float>;
template class Residual<double>;

}  // namespace condense::nn
