#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "condense/nn/layers.h"
#include "condense/tensor.h"

namespace condense {

enum class Arch { kConvNet4, kResNet18Adapted, kResNet50Adapted, kBnVitTiny };

std::string arch_name(Arch arch);
Arch parse_arch(const std::string& name);  // throws ConfigError

struct BackboneSpec {
  Arch arch = Arch::kConvNet4;
  int input_resolution = 32;
  int num_classes = 10;
  bool small_input_mode = true;  // 3x3 stem, no stem pooling (ResNets only)
  int channels = 3;
  int width = 0;  // 0: architecture default (convnet4 128, resnet 64, vit 192)
  int depth = 0;  // 0: architecture default; only bnvit_tiny honours it

  bool operator==(const BackboneSpec&) const = default;
};

// Throws ConfigError for unsupported combinations:
//   - input_resolution not in {32, 64, 224}, num_classes < 2, channels < 1
//   - ResNets: small_input_mode must be on below 224
void validate_spec(const BackboneSpec& spec);

struct BNLayerStats {
  int layer_index = 0;
  std::vector<float> running_mean;
  std::vector<float> running_var;

  bool operator==(const BNLayerStats&) const = default;
};

// A backbone (`body`, images -> penultimate features) followed by a linear
// classifier head.
template <typename T>
class Model {
 public:
  Model(nn::LayerPtr<T> body, std::unique_ptr<nn::Linear<T>> head, int channels, int resolution);

  Tensor<T> forward(const Tensor<T>& images, nn::Mode mode);
  Tensor<T> features(const Tensor<T>& images, nn::Mode mode);
  // Gradient of the logits from the last forward() -> gradient of its input.
  Tensor<T> backward(const Tensor<T>& grad_logits);

  // Canonical order: body depth-first, then head.
  std::vector<nn::Param<T>> params();
  // Canonical BN order: depth-first construction order.
  std::vector<nn::BatchNorm<T>*> bn_layers();

  void zero_grad();
  // A frozen model still back-propagates to its input but accumulates no
  // parameter gradients.
  void set_frozen(bool frozen);
  void set_bn_capture(bool enabled);

  int num_classes() const { return head_->out_features(); }
  int feature_dim() const { return head_->in_features(); }
  int channels() const { return channels_; }
  int resolution() const { return resolution_; }

 private:
  nn::LayerPtr<T> body_;
  std::unique_ptr<nn::Linear<T>> head_;
  int channels_, resolution_;
};

template <typename T>
Model<T> build_backbone(const BackboneSpec& spec, std::uint64_t seed);

// Number of BN layers the spec's network contains, computed by walking the
// architecture description without building it.
int expected_bn_count(const BackboneSpec& spec);

template <typename T>
std::vector<BNLayerStats> extract_bn_stats(Model<T>& model);

// --- Vision transformer descriptions -------------------------------------

enum class NormKind { kLayerNorm, kBatchNorm };

struct TransformerBlockDesc {
  NormKind attn_norm = NormKind::kLayerNorm;
  NormKind ffn_norm = NormKind::kLayerNorm;
  int ffn_linears = 2;        // linear layers in the feed-forward network
  int ffn_hidden = 768;
  bool ffn_inner_bn = false;  // BN between the first linear and GELU
};

struct VitDescription {
  int channels = 3;
  int resolution = 32;
  int patch = 4;
  int embed_dim = 192;
  int heads = 3;
  int num_classes = 10;
  NormKind final_norm = NormKind::kLayerNorm;
  std::vector<TransformerBlockDesc> blocks;
};

// Plain ViT-Tiny (LayerNorm) for the given input geometry.
VitDescription vit_tiny_description(int resolution, int num_classes, int channels = 3,
                                    int depth = 12, int embed_dim = 192);

// Replaces every LayerNorm with BN over token features and inserts one BN
// between the two FFN linears. Throws StructuralError for a block whose FFN
// is not exactly two linear layers.
VitDescription convert_ln_to_bn(const VitDescription& desc);

// Token-sequence encoder (N x T x D -> N x T x D) made of the blocks only.
template <typename T>
nn::LayerPtr<T> build_transformer_encoder(const VitDescription& desc, std::uint64_t seed);

template <typename T>
Model<T> build_vit(const VitDescription& desc, std::uint64_t seed);

}  // namespace condense
