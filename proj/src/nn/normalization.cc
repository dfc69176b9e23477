#include <cmath>
#include <stdexcept>

#include "condense/nn/layers.h"

namespace condense::nn {

template <typename T>
BatchNorm<T>::BatchNorm(int channels, ChannelAxis axis, T eps, T momentum)
    : channels_(channels),
      axis_(axis),
      eps_(eps),
      momentum_(momentum),
      gamma_({channels}, T(1)),
      gamma_grad_({channels}),
      beta_({channels}),
      beta_grad_({channels}),
      running_mean_(channels, T(0)),
      running_var_(channels, T(1)) {}

template <typename T>
void BatchNorm<T>::layout(const Shape& s, std::size_t& outer, std::size_t& inner) const {
  if (axis_ == ChannelAxis::kFirst) {
    if (s.size() < 2 || s[1] != channels_) {
      throw std::invalid_argument("batchnorm expects channel dim 1 = " +
                                  std::to_string(channels_) + ", got " + shape_str(s));
    }
    outer = static_cast<std::size_t>(s[0]);
    inner = shape_numel(s) / (outer * channels_);
  } else {
    if (s.empty() || s.back() != channels_) {
      throw std::invalid_argument("batchnorm expects last dim = " + std::to_string(channels_) +
                                  ", got " + shape_str(s));
    }
    outer = shape_numel(s) / channels_;
    inner = 1;
  }
}

template <typename T>
Tensor<T> BatchNorm<T>::forward(const Tensor<T>& x, Mode mode) {
  std::size_t outer = 0, inner = 0;
  layout(x.shape(), outer, inner);
  const std::size_t count = outer * inner;
  const int c_count = channels_;
  last_mode_ = mode;
  if (capture_) input_ = x;
  stat_grad_mean_.clear();
  stat_grad_var_.clear();

  const bool need_batch = mode == Mode::kTrain || capture_;
  if (need_batch) {
    if (mode == Mode::kTrain && count < 2) {
      throw std::invalid_argument("batchnorm training needs more than one value per channel");
    }
    batch_mean_.assign(c_count, T(0));
    batch_var_.assign(c_count, T(0));
    for (std::size_t o = 0; o < outer; ++o) {
      for (int c = 0; c < c_count; ++c) {
        const T* p = x.data() + (o * c_count + c) * inner;
        T s = 0;
        for (std::size_t i = 0; i < inner; ++i) s += p[i];
        batch_mean_[c] += s;
      }
    }
    for (auto& m : batch_mean_) m /= static_cast<T>(count);
    for (std::size_t o = 0; o < outer; ++o) {
      for (int c = 0; c < c_count; ++c) {
        const T* p = x.data() + (o * c_count + c) * inner;
        const T m = batch_mean_[c];
        T s = 0;
        for (std::size_t i = 0; i < inner; ++i) s += (p[i] - m) * (p[i] - m);
        batch_var_[c] += s;
      }
    }
    for (auto& v : batch_var_) v /= static_cast<T>(count);
  }

  const std::vector<T>& mean = mode == Mode::kTrain ? batch_mean_ : running_mean_;
  const std::vector<T>& var = mode == Mode::kTrain ? batch_var_ : running_var_;
  inv_std_.resize(c_count);
  for (int c = 0; c < c_count; ++c) inv_std_[c] = T(1) / std::sqrt(var[c] + eps_);

  Tensor<T> out(x.shape());
  xhat_.resize(x.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (int c = 0; c < c_count; ++c) {
      const std::size_t base = (o * c_count + c) * inner;
      const T m = mean[c], is = inv_std_[c], g = gamma_[c], b = beta_[c];
      for (std::size_t i = 0; i < inner; ++i) {
        const T xh = (x[base + i] - m) * is;
        xhat_[base + i] = xh;
        out[base + i] = g * xh + b;
      }
    }
  }

  if (mode == Mode::kTrain) {
    const T unbias = static_cast<T>(count) / static_cast<T>(count - 1);
    for (int c = 0; c < c_count; ++c) {
      running_mean_[c] = (T(1) - momentum_) * running_mean_[c] + momentum_ * batch_mean_[c];
      running_var_[c] = (T(1) - momentum_) * running_var_[c] + momentum_ * batch_var_[c] * unbias;
    }
  }
  return out;
}

template <typename T>
void BatchNorm<T>::set_stat_grad(std::vector<T> grad_mean, std::vector<T> grad_var) {
  if (static_cast<int>(grad_mean.size()) != channels_ ||
      static_cast<int>(grad_var.size()) != channels_) {
    throw std::invalid_argument("stat gradient width does not match batchnorm channels");
  }
  stat_grad_mean_ = std::move(grad_mean);
  stat_grad_var_ = std::move(grad_var);
}

template <typename T>
Tensor<T> BatchNorm<T>::backward(const Tensor<T>& grad_out) {
  std::size_t outer = 0, inner = 0;
  layout(grad_out.shape(), outer, inner);
  const std::size_t count = outer * inner;
  const int c_count = channels_;
  Tensor<T> grad_in(grad_out.shape());

  std::vector<T> sum_g(c_count, T(0)), sum_gx(c_count, T(0));
  for (std::size_t o = 0; o < outer; ++o) {
    for (int c = 0; c < c_count; ++c) {
      const std::size_t base = (o * c_count + c) * inner;
      T sg = 0, sgx = 0;
      for (std::size_t i = 0; i < inner; ++i) {
        sg += grad_out[base + i];
        sgx += grad_out[base + i] * xhat_[base + i];
      }
      sum_g[c] += sg;
      sum_gx[c] += sgx;
    }
  }
  if (this->param_grads_) {
    for (int c = 0; c < c_count; ++c) {
      gamma_grad_[c] += sum_gx[c];
      beta_grad_[c] += sum_g[c];
    }
  }

  const T n = static_cast<T>(count);
  for (std::size_t o = 0; o < outer; ++o) {
    for (int c = 0; c < c_count; ++c) {
      const std::size_t base = (o * c_count + c) * inner;
      const T scale = gamma_[c] * inv_std_[c];
      if (last_mode_ == Mode::kTrain) {
        const T mg = sum_g[c] / n, mgx = sum_gx[c] / n;
        for (std::size_t i = 0; i < inner; ++i) {
          grad_in[base + i] = scale * (grad_out[base + i] - mg - xhat_[base + i] * mgx);
        }
      } else {
        for (std::size_t i = 0; i < inner; ++i) grad_in[base + i] = scale * grad_out[base + i];
      }
    }
  }

  if (!stat_grad_mean_.empty()) {
    if (input_.shape() != grad_out.shape()) {
      throw std::logic_error("batchnorm stat gradient requires capture during forward");
    }
    // d mean / dx = 1/n;  d var / dx = 2 (x - mean) / n  (biased variance)
    for (std::size_t o = 0; o < outer; ++o) {
      for (int c = 0; c < c_count; ++c) {
        const std::size_t base = (o * c_count + c) * inner;
        const T gm = stat_grad_mean_[c] / n;
        const T gv = T(2) * stat_grad_var_[c] / n;
        const T m = batch_mean_[c];
        for (std::size_t i = 0; i < inner; ++i) {
          grad_in[base + i] += gm + gv * (input_[base + i] - m);
        }
      }
    }
    stat_grad_mean_.clear();
    stat_grad_var_.clear();
  }
  return grad_in;
}

template <typename T>
void BatchNorm<T>::collect_params(const std::string& prefix, std::vector<Param<T>>& out) {
  out.push_back({prefix + "weight", &gamma_, &gamma_grad_, false});
  out.push_back({prefix + "bias", &beta_, &beta_grad_, false});
}

template <typename T>
LayerNorm<T>::LayerNorm(int dim, T eps)
    : dim_(dim),
      eps_(eps),
      gamma_({dim}, T(1)),
      gamma_grad_({dim}),
      beta_({dim}),
      beta_grad_({dim}) {}

template <typename T>
Tensor<T> LayerNorm<T>::forward(const Tensor<T>& x, Mode) {
  if (x.dim(-1) != dim_) throw std::invalid_argument("layernorm width mismatch");
  const std::size_t rows = x.size() / dim_;
  Tensor<T> out(x.shape());
  xhat_.resize(x.size());
  inv_std_.resize(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* p = x.data() + r * dim_;
    T mean = 0;
    for (int i = 0; i < dim_; ++i) mean += p[i];
    mean /= dim_;
    T var = 0;
    for (int i = 0; i < dim_; ++i) var += (p[i] - mean) * (p[i] - mean);
    var /= dim_;
    const T is = T(1) / std::sqrt(var + eps_);
    inv_std_[r] = is;
    for (int i = 0; i < dim_; ++i) {
      const T xh = (p[i] - mean) * is;
      xhat_[r * dim_ + i] = xh;
      out[r * dim_ + i] = gamma_[i] * xh + beta_[i];
    }
  }
  return out;
}

template <typename T>
Tensor<T> LayerNorm<T>::backward(const Tensor<T>& grad_out) {
  const std::size_t rows = grad_out.size() / dim_;
  Tensor<T> grad_in(grad_out.shape());
  std::vector<T> dxhat(dim_);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* g = grad_out.data() + r * dim_;
    const T* xh = xhat_.data() + r * dim_;
    T s1 = 0, s2 = 0;
    for (int i = 0; i < dim_; ++i) {
      if (this->param_grads_) {
        gamma_grad_[i] += g[i] * xh[i];
        beta_grad_[i] += g[i];
      }
      dxhat[i] = g[i] * gamma_[i];
      s1 += dxhat[i];
      s2 += dxhat[i] * xh[i];
    }
    s1 /= dim_;
    s2 /= dim_;
    for (int i = 0; i < dim_; ++i) {
      grad_in[r * dim_ + i] = inv_std_[r] * (dxhat[i] - s1 - xh[i] * s2);
    }
  }
  return grad_in;
}

template <typename T>
void LayerNorm<T>::collect_params(const std::string& prefix, std::vector<Param<T>>& out) {
  out.push_back({prefix + "weight", &gamma_, &gamma_grad_, false});
  out.push_back({prefix + "bias", &beta_, &beta_grad_, false});
}

template class BatchNorm<float>;
template class BatchNorm<double>;
template class LayerNorm<float>;
template class LayerNorm<double>;

}  // namespace condense::nn
