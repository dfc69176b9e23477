#pragma once

#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "condense/tensor.h"

// Minimal layer-wise network library. Every layer caches what it needs in
// forward() and returns the input gradient from backward(), accumulating its
// own parameter gradients unless parameter gradients are switched off.
// Instantiated for float (training) and double (gradient checks).
namespace condense::nn {

enum class Mode { kTrain, kEval };

template <typename T>
struct Param {
  std::string name;
  Tensor<T>* value;
  Tensor<T>* grad;
  bool decay;  // weight decay applies (conv/linear weights only)
};

template <typename T>
class BatchNorm;

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor<T> forward(const Tensor<T>& x, Mode mode) = 0;
  virtual Tensor<T> backward(const Tensor<T>& grad_out) = 0;
  virtual std::string kind() const = 0;

  // Depth-first, construction order. The checkpoint format relies on it.
  virtual void collect_params(const std::string& prefix, std::vector<Param<T>>& out) {
    (void)prefix;
    (void)out;
  }
  virtual void collect_bn(std::vector<BatchNorm<T>*>& out) { (void)out; }
  virtual void set_param_grads(bool enabled) { param_grads_ = enabled; }

 protected:
  bool param_grads_ = true;
};

template <typename T>
using LayerPtr = std::unique_ptr<Layer<T>>;

// Base for layers that own children; recursion over params and BN layers.
template <typename T>
class Composite : public Layer<T> {
 public:
  void collect_params(const std::string& prefix, std::vector<Param<T>>& out) override;
  void collect_bn(std::vector<BatchNorm<T>*>& out) override;
  void set_param_grads(bool enabled) override;

 protected:
  virtual std::vector<std::pair<std::string, Layer<T>*>> children() = 0;
};

template <typename T>
class Conv2d : public Layer<T> {
 public:
  Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding, bool bias,
         std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::string kind() const override { return "conv2d"; }
  void collect_params(const std::string& prefix, std::vector<Param<T>>& out) override;

  Tensor<T>& weight() { return weight_; }
  int out_channels() const { return out_channels_; }

 private:
  int in_channels_, out_channels_, kernel_, stride_, padding_;
  bool has_bias_;
  Tensor<T> weight_, weight_grad_, bias_, bias_grad_;
  Shape in_shape_;
  std::vector<T> cols_;  // im2col buffers for the whole batch
  int out_h_ = 0, out_w_ = 0;
};

// Fully connected layer acting on the last dimension.
template <typename T>
class Linear : public Layer<T> {
 public:
  Linear(int in_features, int out_features, bool bias, std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::string kind() const override { return "linear"; }
  void collect_params(const std::string& prefix, std::vector<Param<T>>& out) override;

  int in_features() const { return in_; }
  int out_features() const { return out_; }
  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  int in_, out_;
  bool has_bias_;
  Tensor<T> weight_, weight_grad_, bias_, bias_grad_;
  Tensor<T> input_;
};

enum class ChannelAxis {
  kFirst,  // N x C x ... (convolutional feature maps, N x C vectors)
  kLast,   // ... x C (token features)
};

// Batch normalization with tracked running statistics.
//
// In kTrain mode the layer normalizes with biased batch statistics and
// updates running_mean/running_var (unbiased variance, momentum 0.1). In
// kEval mode it normalizes with the running statistics and never mutates
// them. With capture enabled, kEval also records the biased batch
// mean/variance of its input; a gradient with respect to those captured
// statistics can be injected with set_stat_grad() and is folded into the
// next backward().
template <typename T>
class BatchNorm : public Layer<T> {
 public:
  BatchNorm(int channels, ChannelAxis axis, T eps = T(1e-5), T momentum = T(0.1));
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::string kind() const override { return "batchnorm"; }
  void collect_params(const std::string& prefix, std::vector<Param<T>>& out) override;
  void collect_bn(std::vector<BatchNorm<T>*>& out) override { out.push_back(this); }

  int channels() const { return channels_; }
  ChannelAxis axis() const { return axis_; }
  std::vector<T>& running_mean() { return running_mean_; }
  std::vector<T>& running_var() { return running_var_; }
  const std::vector<T>& running_mean() const { return running_mean_; }
  const std::vector<T>& running_var() const { return running_var_; }

  void set_capture(bool enabled) { capture_ = enabled; }
  const std::vector<T>& batch_mean() const { return batch_mean_; }
  const std::vector<T>& batch_var() const { return batch_var_; }
  void set_stat_grad(std::vector<T> grad_mean, std::vector<T> grad_var);

 private:
  // Element (o, c, i) lives at (o * C + c) * inner + i.
  void layout(const Shape& s, std::size_t& outer, std::size_t& inner) const;

  int channels_;
  ChannelAxis axis_;
  T eps_, momentum_;
  Tensor<T> gamma_, gamma_grad_, beta_, beta_grad_;
  std::vector<T> running_mean_, running_var_;
  bool capture_ = false;
  std::vector<T> batch_mean_, batch_var_;
  std::vector<T> stat_grad_mean_, stat_grad_var_;

  Mode last_mode_ = Mode::kEval;
  Tensor<T> input_;
  std::vector<T> xhat_, inv_std_;
};

// Layer normalization over the last dimension.
template <typename T>
class LayerNorm : public Layer<T> {
 public:
  explicit LayerNorm(int dim, T eps = T(1e-6));
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::string kind() const override { return "layernorm"; }
  void collect_params(const std::string& prefix, std::vector<Param<T>>& out) override;

 private:
  int dim_;
  T eps_;
  Tensor<T> gamma_, gamma_grad_, beta_, beta_grad_;
  std::vector<T> xhat_, inv_std_;
};

template <typename T>
class ReLU : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::string kind() const override { return "relu"; }

 private:
  Tensor<T> output_;
};

// Exact (erf) GELU.
template <typename T>
class GELU : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::string kind() const override { return "gelu"; }

 private:
  Tensor<T> input_;
};

template <typename T>
class MaxPool2d : public Layer<T> {
 public:
  MaxPool2d(int kernel, int stride, int padding);
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::string kind() const override { return "maxpool2d"; }

 private:
  int kernel_, stride_, padding_;
  Shape in_shape_;
  std::vector<std::size_t> argmax_;
};

template <typename T>
class AvgPool2d : public Layer<T> {
 public:
  AvgPool2d(int kernel, int stride);
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::string kind() const override { return "avgpool2d"; }

 private:
  int kernel_, stride_;
  Shape in_shape_;
};

// N x C x H x W -> N x C.
template <typename T>
class GlobalAvgPool : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::string kind() const override { return "global_avgpool"; }

 private:
  Shape in_shape_;
};

// N x ... -> N x prod(...).
template <typename T>
class Flatten : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::string kind() const override { return "flatten"; }

 private:
  Shape in_shape_;
};

template <typename T>
class Sequential : public Composite<T> {
 public:
  Sequential() = default;
  Sequential& add(std::string name, LayerPtr<T> layer);
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::string kind() const override { return "sequential"; }
  std::size_t size() const { return layers_.size(); }

 protected:
  std::vector<std::pair<std::string, Layer<T>*>> children() override;

 private:
  std::vector<std::pair<std::string, LayerPtr<T>>> layers_;
};

// out = relu(main(x) + shortcut(x)); shortcut is identity when absent.
template <typename T>
class Residual : public Composite<T> {
 public:
  Residual(LayerPtr<T> main, LayerPtr<T> shortcut, std::string kind);
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::string kind() const override { return kind_; }

 protected:
  std::vector<std::pair<std::string, Layer<T>*>> children() override;

 private:
  LayerPtr<T> main_, shortcut_;
  std::string kind_;
  Tensor<T> output_;
};

// Conv patchify + class token + learned positional embedding.
// N x C x H x W -> N x (1 + (H/p)(W/p)) x D.
template <typename T>
class PatchEmbed : public Composite<T> {
 public:
  PatchEmbed(int in_channels, int embed_dim, int patch, int resolution, std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::string kind() const override { return "patch_embed"; }
  void collect_params(const std::string& prefix, std::vector<Param<T>>& out) override;
  int tokens() const { return num_patches_ + 1; }

 protected:
  std::vector<std::pair<std::string, Layer<T>*>> children() override;

 private:
  int dim_, num_patches_;
  Conv2d<T> proj_;
  Tensor<T> cls_, cls_grad_, pos_, pos_grad_;
  Shape conv_shape_;
};

// Multi-head self-attention on N x T x D.
template <typename T>
class SelfAttention : public Composite<T> {
 public:
  SelfAttention(int dim, int heads, std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::string kind() const override { return "self_attention"; }

 protected:
  std::vector<std::pair<std::string, Layer<T>*>> children() override;

 private:
  int dim_, heads_;
  Linear<T> qkv_, proj_;
  Shape in_shape_;
  std::vector<T> qkv_out_;  // N x T x 3D
  std::vector<T> probs_;    // N x H x T x T
};

// Pre-norm transformer block:
//   z' = attn(norm1(z)) + z;  out = ffn(norm2(z')) + z'
template <typename T>
class TransformerBlock : public Composite<T> {
 public:
  TransformerBlock(LayerPtr<T> norm1, LayerPtr<T> attn, LayerPtr<T> norm2, LayerPtr<T> ffn);
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::string kind() const override { return "transformer_block"; }

 protected:
  std::vector<std::pair<std::string, Layer<T>*>> children() override;

 private:
  LayerPtr<T> norm1_, attn_, norm2_, ffn_;
};

// N x T x D -> N x D, selecting token 0.
template <typename T>
class ClassToken : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::string kind() const override { return "class_token"; }

 private:
  Shape in_shape_;
};

}  // namespace condense::nn
