#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "condense/nn/layers.h"

namespace condense::nn {
namespace {

Tensor<double> random_tensor(const Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor<double> t(shape);
  for (auto& v : t.storage()) v = n(rng);
  return t;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

bool close(double analytic, double numeric) {
  return std::abs(analytic - numeric) <= 1e-6 + 1e-4 * std::max(std::abs(analytic), std::abs(numeric));
}

// Checks input and parameter gradients of L(x) = <layer(x), g> against
// central differences.
void check_layer(Layer<double>& layer, const Shape& in_shape, Mode mode, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor<double> x = random_tensor(in_shape, rng);
  std::vector<Param<double>> params;
  layer.collect_params("", params);
  for (auto& p : params) std::fill(p.grad->storage().begin(), p.grad->storage().end(), 0.0);

  const Tensor<double> y = layer.forward(x, mode);
  const Tensor<double> g = random_tensor(y.shape(), rng);
  const Tensor<double> gx = layer.backward(g);
  ASSERT_EQ(gx.shape(), x.shape());

  auto loss = [&](const Tensor<double>& input) { return dot(layer.forward(input, mode), g); };
  const double h = 1e-6;
  std::uniform_int_distribution<std::size_t> pick_x(0, x.size() - 1);
  for (int probe = 0; probe < 25; ++probe) {
    const std::size_t i = pick_x(rng);
    Tensor<double> xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    const double numeric = (loss(xp) - loss(xm)) / (2 * h);
    EXPECT_TRUE(close(gx[i], numeric)) << layer.kind() << " input " << i << ": " << gx[i]
                                       << " vs " << numeric;
  }
  for (auto& p : params) {
    std::uniform_int_distribution<std::size_t> pick(0, p.value->size() - 1);
    for (int probe = 0; probe < 6; ++probe) {
      const std::size_t i = pick(rng);
      const double orig = (*p.value)[i];
      (*p.value)[i] = orig + h;
      const double lp = loss(x);
      (*p.value)[i] = orig - h;
      const double lm = loss(x);
      (*p.value)[i] = orig;
      const double numeric = (lp - lm) / (2 * h);
      EXPECT_TRUE(close((*p.grad)[i], numeric))
          << layer.kind() << " param " << p.name << "[" << i << "]: " << (*p.grad)[i] << " vs "
          << numeric;
    }
  }
}

TEST(LayerGradients, Conv2dStridedPaddedWithBias) {
  std::mt19937_64 rng(1);
  Conv2d<double> conv(3, 4, 3, 2, 1, true, rng);
  check_layer(conv, {2, 3, 7, 6}, Mode::kTrain, 11);
}

TEST(LayerGradients, Conv2dPointwise) {
  std::mt19937_64 rng(2);
  Conv2d<double> conv(4, 2, 1, 1, 0, false, rng);
  check_layer(conv, {3, 4, 5, 5}, Mode::kTrain, 12);
}

TEST(LayerGradients, LinearOnTokens) {
  std::mt19937_64 rng(3);
  Linear<double> lin(5, 3, true, rng);
  check_layer(lin, {2, 4, 5}, Mode::kTrain, 13);
}

TEST(LayerGradients, BatchNormTrainChannelFirst) {
  BatchNorm<double> bn(3, ChannelAxis::kFirst);
  check_layer(bn, {4, 3, 3, 2}, Mode::kTrain, 14);
}

TEST(LayerGradients, BatchNormTrainChannelLast) {
  BatchNorm<double> bn(4, ChannelAxis::kLast);
  check_layer(bn, {2, 5, 4}, Mode::kTrain, 15);
}

TEST(LayerGradients, BatchNormEval) {
  BatchNorm<double> bn(3, ChannelAxis::kFirst);
  bn.running_mean() = {0.1, -0.2, 0.3};
  bn.running_var() = {0.5, 1.5, 2.0};
  check_layer(bn, {2, 3, 2, 2}, Mode::kEval, 16);
}

TEST(LayerGradients, LayerNorm) {
  LayerNorm<double> ln(6);
  check_layer(ln, {2, 3, 6}, Mode::kTrain, 17);
}

TEST(LayerGradients, Activations) {
  ReLU<double> relu;
  check_layer(relu, {2, 3, 4, 4}, Mode::kTrain, 18);
  GELU<double> gelu;
  check_layer(gelu, {2, 7}, Mode::kTrain, 19);
}

TEST(LayerGradients, Pooling) {
  MaxPool2d<double> mp(3, 2, 1);
  check_layer(mp, {2, 2, 6, 5}, Mode::kTrain, 20);
  AvgPool2d<double> ap(2, 2);
  check_layer(ap, {2, 2, 6, 4}, Mode::kTrain, 21);
  GlobalAvgPool<double> gap;
  check_layer(gap, {3, 2, 3, 3}, Mode::kTrain, 22);
  Flatten<double> flat;
  check_layer(flat, {2, 2, 3, 3}, Mode::kTrain, 23);
}

TEST(LayerGradients, ResidualWithProjection) {
  std::mt19937_64 rng(4);
  auto main = std::make_unique<Sequential<double>>();
  main->add("conv", std::make_unique<Conv2d<double>>(2, 3, 3, 1, 1, false, rng));
  main->add("bn", std::make_unique<BatchNorm<double>>(3, ChannelAxis::kFirst));
  auto shortcut = std::make_unique<Conv2d<double>>(2, 3, 1, 1, 0, false, rng);
  Residual<double> block(std::move(main), std::move(shortcut), "basic_block");
  check_layer(block, {3, 2, 4, 4}, Mode::kTrain, 24);
}

TEST(LayerGradients, PatchEmbedAndAttention) {
  std::mt19937_64 rng(5);
  PatchEmbed<double> embed(2, 6, 2, 4, rng);
  check_layer(embed, {2, 2, 4, 4}, Mode::kTrain, 25);
  SelfAttention<double> attn(6, 2, rng);
  check_layer(attn, {2, 5, 6}, Mode::kTrain, 26);
  ClassToken<double> cls;
  check_layer(cls, {2, 5, 6}, Mode::kTrain, 27);
}

TEST(LayerGradients, TransformerBlockWithBatchNorm) {
  std::mt19937_64 rng(6);
  auto ffn = std::make_unique<Sequential<double>>();
  ffn->add("fc1", std::make_unique<Linear<double>>(6, 8, true, rng));
  ffn->add("bn", std::make_unique<BatchNorm<double>>(8, ChannelAxis::kLast));
  ffn->add("act", std::make_unique<GELU<double>>());
  ffn->add("fc2", std::make_unique<Linear<double>>(8, 6, true, rng));
  TransformerBlock<double> block(std::make_unique<BatchNorm<double>>(6, ChannelAxis::kLast),
                                 std::make_unique<SelfAttention<double>>(6, 3, rng),
                                 std::make_unique<BatchNorm<double>>(6, ChannelAxis::kLast),
                                 std::move(ffn));
  check_layer(block, {2, 4, 6}, Mode::kTrain, 28);
}

TEST(BatchNorm, TrainUpdatesRunningStatsEvalDoesNot) {
  BatchNorm<double> bn(1, ChannelAxis::kFirst);
  Tensor<double> x({4, 1, 1, 1}, std::vector<double>{1, 2, 3, 4});
  bn.forward(x, Mode::kTrain);
  // mean 2.5, unbiased var 5/3, momentum 0.1 from (0, 1)
  EXPECT_NEAR(bn.running_mean()[0], 0.25, 1e-12);
  EXPECT_NEAR(bn.running_var()[0], 0.9 + 0.1 * 5.0 / 3.0, 1e-12);
  const auto mean = bn.running_mean();
  const auto var = bn.running_var();
  bn.forward(x, Mode::kEval);
  EXPECT_EQ(bn.running_mean(), mean);
  EXPECT_EQ(bn.running_var(), var);
}

TEST(BatchNorm, CaptureRecordsBiasedStatsAndStatGradient) {
  BatchNorm<double> bn(2, ChannelAxis::kFirst);
  bn.running_mean() = {0.3, -0.1};
  bn.running_var() = {0.8, 1.2};
  bn.set_capture(true);
  std::mt19937_64 rng(7);
  Tensor<double> x = random_tensor({3, 2, 2, 2}, rng);
  Tensor<double> y = bn.forward(x, Mode::kEval);
  for (int c = 0; c < 2; ++c) {
    double m = 0, v = 0;
    for (int n = 0; n < 3; ++n)
      for (int i = 0; i < 4; ++i) m += x[(n * 2 + c) * 4 + i];
    m /= 12;
    for (int n = 0; n < 3; ++n)
      for (int i = 0; i < 4; ++i) v += std::pow(x[(n * 2 + c) * 4 + i] - m, 2);
    v /= 12;
    EXPECT_NEAR(bn.batch_mean()[c], m, 1e-12);
    EXPECT_NEAR(bn.batch_var()[c], v, 1e-12);
  }
  // L = <y, g> + <mean, a> + <var, b>
  const Tensor<double> g = random_tensor(y.shape(), rng);
  const std::vector<double> a = {0.7, -1.1}, b = {0.4, 2.0};
  auto loss = [&](const Tensor<double>& in) {
    const Tensor<double> out = bn.forward(in, Mode::kEval);
    double l = dot(out, g);
    for (int c = 0; c < 2; ++c) l += a[c] * bn.batch_mean()[c] + b[c] * bn.batch_var()[c];
    return l;
  };
  bn.forward(x, Mode::kEval);
  bn.set_stat_grad(a, b);
  const Tensor<double> gx = bn.backward(g);
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor<double> xp = x, xm = x;
    xp[i] += 1e-6;
    xm[i] -= 1e-6;
    EXPECT_TRUE(close(gx[i], (loss(xp) - loss(xm)) / 2e-6)) << i;
  }
}

}  // namespace
}  // namespace condense::nn
