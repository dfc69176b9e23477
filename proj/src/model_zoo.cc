#include <algorithm>
#include <stdexcept>

#include "condense/errors.h"
#include "condense/model.h"

namespace condense {

std::string arch_name(Arch arch) {
  switch (arch) {
    case Arch::kConvNet4:
      return "convnet4";
    case Arch::kResNet18Adapted:
      return "resnet18_adapted";
    case Arch::kResNet50Adapted:
      return "resnet50_adapted";
    case Arch::kBnVitTiny:
      return "bnvit_tiny";
  }
  throw std::logic_error("unknown arch");
}

Arch parse_arch(const std::string& name) {
  for (Arch a : {Arch::kConvNet4, Arch::kResNet18Adapted, Arch::kResNet50Adapted,
                 Arch::kBnVitTiny}) {
    if (arch_name(a) == name) return a;
  }
  throw ConfigError("unknown architecture '" + name +
                    "' (expected convnet4, resnet18_adapted, resnet50_adapted, bnvit_tiny)");
}

void validate_spec(const BackboneSpec& spec) {
  const int r = spec.input_resolution;
  if (r != 32 && r != 64 && r != 224) {
    throw ConfigError("input_resolution must be 32, 64 or 224, got " + std::to_string(r));
  }
  if (spec.num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (spec.channels < 1) throw ConfigError("channels must be >= 1");
  if (spec.width < 0 || spec.depth < 0) throw ConfigError("width/depth must be >= 0");
  const bool resnet =
      spec.arch == Arch::kResNet18Adapted || spec.arch == Arch::kResNet50Adapted;
  if (resnet && !spec.small_input_mode && r < 224) {
    throw ConfigError(arch_name(spec.arch) + " at resolution " + std::to_string(r) +
                      " requires small_input_mode (3x3 stem, no stem pooling)");
  }
}

template <typename T>
Model<T>::Model(nn::LayerPtr<T> body, std::unique_ptr<nn::Linear<T>> head, int channels,
                int resolution)
    : body_(std::move(body)), head_(std::move(head)), channels_(channels), resolution_(resolution) {}

template <typename T>
Tensor<T> Model<T>::forward(const Tensor<T>& images, nn::Mode mode) {
  return head_->forward(body_->forward(images, mode), mode);
}

template <typename T>
Tensor<T> Model<T>::features(const Tensor<T>& images, nn::Mode mode) {
  return body_->forward(images, mode);
}

template <typename T>
Tensor<T> Model<T>::backward(const Tensor<T>& grad_logits) {
  return body_->backward(head_->backward(grad_logits));
}

template <typename T>
std::vector<nn::Param<T>> Model<T>::params() {
  std::vector<nn::Param<T>> out;
  body_->collect_params("body.", out);
  head_->collect_params("head.", out);
  return out;
}

template <typename T>
std::vector<nn::BatchNorm<T>*> Model<T>::bn_layers() {
  std::vector<nn::BatchNorm<T>*> out;
  body_->collect_bn(out);
  return out;
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto& p : params()) p.grad->zero();
}

template <typename T>
void Model<T>::set_frozen(bool frozen) {
  body_->set_param_grads(!frozen);
  head_->set_param_grads(!frozen);
}

template <typename T>
void Model<T>::set_bn_capture(bool enabled) {
  for (auto* bn : bn_layers()) bn->set_capture(enabled);
}

namespace {

template <typename T>
std::unique_ptr<nn::BatchNorm<T>> bn2d(int c) {
  return std::make_unique<nn::BatchNorm<T>>(c, nn::ChannelAxis::kFirst);
}

template <typename T>
nn::LayerPtr<T> conv_bn(int in, int out, int k, int stride, int pad, std::mt19937_64& rng) {
  auto s = std::make_unique<nn::Sequential<T>>();
  s->add("conv", std::make_unique<nn::Conv2d<T>>(in, out, k, stride, pad, false, rng));
  s->add("bn", bn2d<T>(out));
  return s;
}

template <typename T>
nn::LayerPtr<T> basic_block(int in, int out, int stride, std::mt19937_64& rng) {
  auto main = std::make_unique<nn::Sequential<T>>();
  main->add("conv1", std::make_unique<nn::Conv2d<T>>(in, out, 3, stride, 1, false, rng));
  main->add("bn1", bn2d<T>(out));
  main->add("relu", std::make_unique<nn::ReLU<T>>());
  main->add("conv2", std::make_unique<nn::Conv2d<T>>(out, out, 3, 1, 1, false, rng));
  main->add("bn2", bn2d<T>(out));
  nn::LayerPtr<T> shortcut;
  if (stride != 1 || in != out) shortcut = conv_bn<T>(in, out, 1, stride, 0, rng);
  return std::make_unique<nn::Residual<T>>(std::move(main), std::move(shortcut), "basic_block");
}

template <typename T>
nn::LayerPtr<T> bottleneck(int in, int planes, int stride, std::mt19937_64& rng) {
  const int out = planes * 4;
  auto main = std::make_unique<nn::Sequential<T>>();
  main->add("conv1", std::make_unique<nn::Conv2d<T>>(in, planes, 1, 1, 0, false, rng));
  main->add("bn1", bn2d<T>(planes));
  main->add("relu1", std::make_unique<nn::ReLU<T>>());
  main->add("conv2", std::make_unique<nn::Conv2d<T>>(planes, planes, 3, stride, 1, false, rng));
  main->add("bn2", bn2d<T>(planes));
  main->add("relu2", std::make_unique<nn::ReLU<T>>());
  main->add("conv3", std::make_unique<nn::Conv2d<T>>(planes, out, 1, 1, 0, false, rng));
  main->add("bn3", bn2d<T>(out));
  nn::LayerPtr<T> shortcut;
  if (stride != 1 || in != out) shortcut = conv_bn<T>(in, out, 1, stride, 0, rng);
  return std::make_unique<nn::Residual<T>>(std::move(main), std::move(shortcut), "bottleneck");
}

template <typename T>
Model<T> build_resnet(const BackboneSpec& spec, bool bottleneck_blocks, std::mt19937_64& rng) {
  const int base = spec.width > 0 ? spec.width : 64;
  const std::vector<int> counts =
      bottleneck_blocks ? std::vector<int>{3, 4, 6, 3} : std::vector<int>{2, 2, 2, 2};
  auto body = std::make_unique<nn::Sequential<T>>();
  if (spec.small_input_mode) {
    body->add("stem_conv", std::make_unique<nn::Conv2d<T>>(spec.channels, base, 3, 1, 1, false, rng));
    body->add("stem_bn", bn2d<T>(base));
    body->add("stem_relu", std::make_unique<nn::ReLU<T>>());
  } else {
    body->add("stem_conv", std::make_unique<nn::Conv2d<T>>(spec.channels, base, 7, 2, 3, false, rng));
    body->add("stem_bn", bn2d<T>(base));
    body->add("stem_relu", std::make_unique<nn::ReLU<T>>());
    body->add("stem_pool", std::make_unique<nn::MaxPool2d<T>>(3, 2, 1));
  }
  int in = base;
  for (int stage = 0; stage < 4; ++stage) {
    const int planes = base << stage;
    for (int b = 0; b < counts[stage]; ++b) {
      const int stride = (b == 0 && stage > 0) ? 2 : 1;
      const std::string name = "layer" + std::to_string(stage + 1) + "." + std::to_string(b);
      if (bottleneck_blocks) {
        body->add(name, bottleneck<T>(in, planes, stride, rng));
        in = planes * 4;
      } else {
        body->add(name, basic_block<T>(in, planes, stride, rng));
        in = planes;
      }
    }
  }
  body->add("pool", std::make_unique<nn::GlobalAvgPool<T>>());
  auto head = std::make_unique<nn::Linear<T>>(in, spec.num_classes, true, rng);
  return Model<T>(std::move(body), std::move(head), spec.channels, spec.input_resolution);
}

// Four conv(3x3)-BN-ReLU-avgpool(2) blocks and a linear head.
template <typename T>
Model<T> build_convnet4(const BackboneSpec& spec, std::mt19937_64& rng) {
  const int width = spec.width > 0 ? spec.width : 128;
  auto body = std::make_unique<nn::Sequential<T>>();
  int in = spec.channels;
  int res = spec.input_resolution;
  for (int b = 0; b < 4; ++b) {
    auto block = std::make_unique<nn::Sequential<T>>();
    block->add("conv", std::make_unique<nn::Conv2d<T>>(in, width, 3, 1, 1, true, rng));
    block->add("bn", bn2d<T>(width));
    block->add("relu", std::make_unique<nn::ReLU<T>>());
    block->add("pool", std::make_unique<nn::AvgPool2d<T>>(2, 2));
    body->add("block" + std::to_string(b + 1), std::move(block));
    in = width;
    res /= 2;
  }
  body->add("flatten", std::make_unique<nn::Flatten<T>>());
  auto head = std::make_unique<nn::Linear<T>>(width * res * res, spec.num_classes, true, rng);
  return Model<T>(std::move(body), std::move(head), spec.channels, spec.input_resolution);
}

int vit_patch(int resolution) { return resolution == 224 ? 16 : resolution / 8; }

template <typename T>
nn::LayerPtr<T> make_norm(NormKind kind, int dim) {
  if (kind == NormKind::kBatchNorm) {
    return std::make_unique<nn::BatchNorm<T>>(dim, nn::ChannelAxis::kLast);
  }
  return std::make_unique<nn::LayerNorm<T>>(dim);
}

template <typename T>
void append_blocks(nn::Sequential<T>& seq, const VitDescription& desc, std::mt19937_64& rng) {
  for (std::size_t i = 0; i < desc.blocks.size(); ++i) {
    const auto& b = desc.blocks[i];
    if (b.ffn_linears != 2) {
      throw StructuralError("transformer block " + std::to_string(i) + " has " +
                            std::to_string(b.ffn_linears) + " FFN linear layers; expected 2");
    }
    auto ffn = std::make_unique<nn::Sequential<T>>();
    ffn->add("fc1", std::make_unique<nn::Linear<T>>(desc.embed_dim, b.ffn_hidden, true, rng));
    if (b.ffn_inner_bn) {
      ffn->add("bn", std::make_unique<nn::BatchNorm<T>>(b.ffn_hidden, nn::ChannelAxis::kLast));
    }
    ffn->add("gelu", std::make_unique<nn::GELU<T>>());
    ffn->add("fc2", std::make_unique<nn::Linear<T>>(b.ffn_hidden, desc.embed_dim, true, rng));
    seq.add("blocks." + std::to_string(i),
            std::make_unique<nn::TransformerBlock<T>>(
                make_norm<T>(b.attn_norm, desc.embed_dim),
                std::make_unique<nn::SelfAttention<T>>(desc.embed_dim, desc.heads, rng),
                make_norm<T>(b.ffn_norm, desc.embed_dim), std::move(ffn)));
  }
}

}  // namespace

VitDescription vit_tiny_description(int resolution, int num_classes, int channels, int depth,
                                    int embed_dim) {
  VitDescription d;
  d.channels = channels;
  d.resolution = resolution;
  d.patch = vit_patch(resolution);
  d.embed_dim = embed_dim;
  d.heads = 3;
  d.num_classes = num_classes;
  d.final_norm = NormKind::kLayerNorm;
  TransformerBlockDesc block;
  block.ffn_hidden = 4 * embed_dim;
  d.blocks.assign(depth, block);
  return d;
}

VitDescription convert_ln_to_bn(const VitDescription& desc) {
  VitDescription out = desc;
  for (std::size_t i = 0; i < out.blocks.size(); ++i) {
    auto& b = out.blocks[i];
    if (b.ffn_linears != 2) {
      throw StructuralError("cannot convert block " + std::to_string(i) +
                            ": FFN must consist of exactly two linear layers, found " +
                            std::to_string(b.ffn_linears));
    }
    b.attn_norm = NormKind::kBatchNorm;
    b.ffn_norm = NormKind::kBatchNorm;
    b.ffn_inner_bn = true;
  }
  out.final_norm = NormKind::kBatchNorm;
  return out;
}

template <typename T>
nn::LayerPtr<T> build_transformer_encoder(const VitDescription& desc, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto seq = std::make_unique<nn::Sequential<T>>();
  append_blocks(*seq, desc, rng);
  return seq;
}

template <typename T>
Model<T> build_vit(const VitDescription& desc, std::uint64_t seed) {
  if (desc.resolution % desc.patch != 0) throw ConfigError("resolution must divide by patch size");
  std::mt19937_64 rng(seed);
  auto body = std::make_unique<nn::Sequential<T>>();
  body->add("patch_embed", std::make_unique<nn::PatchEmbed<T>>(desc.channels, desc.embed_dim,
                                                               desc.patch, desc.resolution, rng));
  append_blocks(*body, desc, rng);
  body->add("norm", make_norm<T>(desc.final_norm, desc.embed_dim));
  body->add("cls", std::make_unique<nn::ClassToken<T>>());
  auto head = std::make_unique<nn::Linear<T>>(desc.embed_dim, desc.num_classes, true, rng);
  return Model<T>(std::move(body), std::move(head), desc.channels, desc.resolution);
}

template <typename T>
Model<T> build_backbone(const BackboneSpec& spec, std::uint64_t seed) {
  validate_spec(spec);
  std::mt19937_64 rng(seed);
  switch (spec.arch) {
    case Arch::kConvNet4:
      return build_convnet4<T>(spec, rng);
    case Arch::kResNet18Adapted:
      return build_resnet<T>(spec, false, rng);
    case Arch::kResNet50Adapted:
      return build_resnet<T>(spec, true, rng);
    case Arch::kBnVitTiny: {
      const VitDescription desc = convert_ln_to_bn(vit_tiny_description(
          spec.input_resolution, spec.num_classes, spec.channels, spec.depth > 0 ? spec.depth : 12,
          spec.width > 0 ? spec.width : 192));
      return build_vit<T>(desc, seed);
    }
  }
  throw std::logic_error("unknown arch");
}

int expected_bn_count(const BackboneSpec& spec) {
  switch (spec.arch) {
    case Arch::kConvNet4:
      return 4;
    case Arch::kResNet18Adapted:
      // stem + 8 blocks x 2 + 3 projection shortcuts
      return 1 + 8 * 2 + 3;
    case Arch::kResNet50Adapted:
      // stem + 16 bottlenecks x 3 + 4 projection shortcuts
      return 1 + 16 * 3 + 4;
    case Arch::kBnVitTiny:
      return 3 * (spec.depth > 0 ? spec.depth : 12) + 1;
  }
  return 0;
}

template <typename T>
std::vector<BNLayerStats> extract_bn_stats(Model<T>& model) {
  std::vector<BNLayerStats> out;
  int index = 0;
  for (auto* bn : model.bn_layers()) {
    BNLayerStats s;
    s.layer_index = index++;
    s.running_mean.assign(bn->running_mean().begin(), bn->running_mean().end());
    s.running_var.assign(bn->running_var().begin(), bn->running_var().end());
    out.push_back(std::move(s));
  }
  if (out.empty()) throw StructuralError("model has no batch-normalization layers");
  return out;
}

template class Model<float>;
template class Model<double>;
template Model<float> build_backbone<float>(const BackboneSpec&, std::uint64_t);
template Model<double> build_backbone<double>(const BackboneSpec&, std::uint64_t);
template nn::LayerPtr<float> build_transformer_encoder<float>(const VitDescription&, std::uint64_t);
template nn::LayerPtr<double> build_transformer_encoder<double>(const VitDescription&, std::uint64_t);
template Model<float> build_vit<float>(const VitDescription&, std::uint64_t);
template Model<double> build_vit<double>(const VitDescription&, std::uint64_t);
template std::vector<BNLayerStats> extract_bn_stats<float>(Model<float>&);
template std::vector<BNLayerStats> extract_bn_stats<double>(Model<double>&);

}  // namespace condense
