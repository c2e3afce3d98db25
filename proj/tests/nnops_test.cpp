#include <gtest/gtest.h>

#include <cmath>

#include "involution/nnops.hpp"
#include "involution/prng.hpp"
#include "involution/reference.hpp"

using namespace involution;

namespace {

constexpr double kOracleTol = 1e-12;

Tensor ramp(Shape shape) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<double>(i);
  return t;
}

Tensor delta_kernel(std::size_t B, std::size_t G, std::size_t K, std::size_t H, std::size_t W) {
  Tensor k = Tensor::zeros({B, G, K * K, H, W});
  const std::size_t centre = (K / 2) * K + K / 2;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t g = 0; g < G; ++g)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) k.at({b, g, centre, i, j}) = 1.0;
  return k;
}

}  // namespace

TEST(Unfold, CentreColumnOfThreeByThree) {
  const Tensor cols = ops::unfold(ramp({1, 1, 3, 3}), same_window(3));
  ASSERT_EQ(cols.shape(), (Shape{1, 9, 9}));
  for (std::size_t r = 0; r < 9; ++r) EXPECT_EQ(cols.at({0, r, 4}), static_cast<double>(r));
}

TEST(Unfold, KernelOneIsReshape) {
  Prng rng(1);
  const Tensor x = random_normal({2, 3, 4, 5}, rng);
  EXPECT_EQ(ops::unfold(x, same_window(1)), reshape(x, {2, 3, 20}));
}

TEST(Unfold, EveryElementAppearsOncePerCoveringPatch) {
  // Unfold a tensor of ones at several geometries; summing the columns back
  // onto the input gives, per pixel, the number of patches that cover it.
  for (const Window w : {same_window(3), same_window(5), same_window(3, 2), same_window(3, 1, 2)}) {
    const std::size_t H = 7, W = 6;
    const Tensor cover = ops::fold(ops::unfold(Tensor::ones({1, 1, H, W}), w), {1, 1, H, W}, w);
    const std::size_t Ho = window_out(H, w), Wo = window_out(W, w);
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        std::size_t expected = 0;
        for (std::size_t oi = 0; oi < Ho; ++oi)
          for (std::size_t oj = 0; oj < Wo; ++oj)
            for (std::size_t u = 0; u < w.kernel; ++u)
              for (std::size_t v = 0; v < w.kernel; ++v) {
                const auto pi = static_cast<long>(oi * w.stride + u * w.dilation) - static_cast<long>(w.padding);
                const auto pj = static_cast<long>(oj * w.stride + v * w.dilation) - static_cast<long>(w.padding);
                expected += pi == static_cast<long>(i) && pj == static_cast<long>(j);
              }
        EXPECT_EQ(cover.at({0, 0, i, j}), static_cast<double>(expected));
      }
  }
}

TEST(Unfold, EvenKernelRejected) { EXPECT_THROW(same_window(4), ShapeError); }

TEST(AvgPool, HandMean) {
  EXPECT_EQ(ops::avg_pool2d(Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4}), 2), Tensor::from({1, 1, 1, 1}, {2.5}));
}

TEST(AvgPool, StrideOneIsIdentity) {
  Prng rng(2);
  const Tensor x = random_normal({1, 2, 4, 4}, rng);
  EXPECT_EQ(ops::avg_pool2d(x, 1), x);
}

TEST(AvgPool, ConstantStaysConstant) {
  const Tensor y = ops::avg_pool2d(Tensor::full({1, 2, 4, 4}, 3.25), 2);
  for (double v : y.data()) EXPECT_EQ(v, 3.25);
}

TEST(AvgPool, IndivisibleRejected) { EXPECT_THROW(ops::avg_pool2d(Tensor::zeros({1, 1, 5, 4}), 2), ShapeError); }

TEST(MaxPool, PicksWindowMaximum) {
  const ops::MaxPoolResult r = ops::max_pool2d(ramp({1, 1, 4, 4}), 3, 2, 1);
  EXPECT_EQ(r.out, Tensor::from({1, 1, 2, 2}, {5, 7, 13, 15}));
}

TEST(Conv2d, OneByOneIdentityFilters) {
  Tensor f = Tensor::zeros({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) f.at({c, c, 0, 0}) = 1.0;
  Prng rng(3);
  const Tensor x = random_normal({2, 3, 4, 4}, rng);
  EXPECT_EQ(ops::conv2d(x, f, nullptr, same_window(1), 1), x);
}

TEST(Conv2d, CentreDeltaIsIdentity) {
  Tensor f = Tensor::zeros({1, 1, 3, 3});
  f.at({0, 0, 1, 1}) = 1.0;
  Prng rng(4);
  const Tensor x = random_normal({1, 1, 5, 5}, rng);
  EXPECT_EQ(ops::conv2d(x, f, nullptr, same_window(3), 1), x);
}

TEST(Conv2d, MatchesNestedLoops) {
  Prng rng(5);
  const Tensor x = random_normal({1, 3, 5, 5}, rng);
  const Tensor f = random_normal({2, 3, 3, 3}, rng);
  const Tensor bias = random_normal({2}, rng);
  EXPECT_LE(max_abs_diff(ops::conv2d(x, f, &bias, same_window(3), 1),
                         reference::conv2d(x, f, &bias, same_window(3), 1)),
            kOracleTol);
}

TEST(Conv2d, GroupDivisibilityChecked) {
  EXPECT_THROW(ops::conv2d(Tensor::zeros({1, 3, 4, 4}), Tensor::zeros({2, 1, 3, 3}), nullptr, same_window(3), 2),
               ShapeError);
}

TEST(Depthwise, CentreDeltaIsIdentity) {
  Tensor f = Tensor::zeros({4, 1, 3, 3});
  for (std::size_t c = 0; c < 4; ++c) f.at({c, 0, 1, 1}) = 1.0;
  Prng rng(6);
  const Tensor x = random_normal({2, 4, 5, 5}, rng);
  EXPECT_EQ(ops::conv2d(x, f, nullptr, same_window(3), 4), x);
}

TEST(Depthwise, ChannelsAreIndependent) {
  Prng rng(7);
  Tensor f = random_normal({2, 1, 3, 3}, rng);
  for (std::size_t u = 0; u < 3; ++u)
    for (std::size_t v = 0; v < 3; ++v) f.at({0, 0, u, v}) = 0.0;
  const Tensor x = random_normal({1, 2, 5, 5}, rng);
  const Tensor y = ops::conv2d(x, f, nullptr, same_window(3), 2);
  Tensor x1 = Tensor::zeros({1, 1, 5, 5});
  Tensor f1 = Tensor::zeros({1, 1, 3, 3});
  for (std::size_t i = 0; i < 25; ++i) x1[i] = x[25 + i];
  for (std::size_t i = 0; i < 9; ++i) f1[i] = f[9 + i];
  const Tensor y1 = ops::conv2d(x1, f1, nullptr, same_window(3), 1);
  for (std::size_t i = 0; i < 25; ++i) {
    EXPECT_EQ(y[i], 0.0);
    EXPECT_EQ(y[25 + i], y1[i]);
  }
}

TEST(Depthwise, MatchesNestedLoops) {
  Prng rng(8);
  ConvConfig cfg;
  cfg.in_channels = cfg.out_channels = cfg.groups = 5;
  const ConvSpec spec = make_conv("dw", cfg, rng);
  const Tensor x = random_normal({2, 5, 6, 6}, rng);
  EXPECT_LE(max_abs_diff(ops::depthwise_conv2d(x, spec),
                         reference::depthwise_conv2d(x, spec.filters.value, spec.config.window())),
            kOracleTol);
}

namespace {

InvolutionSpec small_involution(Prng& rng, std::size_t C = 16, std::size_t K = 3, std::size_t G = 2,
                                std::size_t r = 2, std::size_t stride = 1) {
  InvolutionConfig cfg;
  cfg.channels = C;
  cfg.kernel = K;
  cfg.groups = G;
  cfg.reduction = r;
  cfg.stride = stride;
  return make_involution("inv", cfg, rng);
}

}  // namespace

TEST(KernelGenerate, ZeroSpanGivesZeroKernels) {
  Prng rng(9);
  InvolutionSpec spec = small_involution(rng);
  spec.span.value = Tensor::zeros(spec.span.value.shape());
  spec.span_bias.value = Tensor::zeros(spec.span_bias.value.shape());
  const Tensor k = ops::kernel_generate(random_normal({2, 16, 5, 5}, rng), spec);
  for (double v : k.data()) EXPECT_EQ(v, 0.0);
}

TEST(KernelGenerate, KKGValuesPerPosition) {
  Prng rng(10);
  const InvolutionSpec spec = small_involution(rng);  // C=16, K=3, G=2
  const Tensor k = ops::kernel_generate(random_normal({1, 16, 4, 4}, rng), spec);
  EXPECT_EQ(k.shape(), (Shape{1, 2, 9, 4, 4}));
  EXPECT_EQ(k.dim(1) * k.dim(2), 18u);
}

TEST(KernelGenerate, DependsOnlyOnItsOwnPixel) {
  Prng rng(11);
  InvolutionSpec spec = small_involution(rng, 8, 3, 2, 2);
  spec.bn->mode = BnMode::kEval;  // batch statistics would couple positions
  const Tensor x = random_normal({1, 8, 5, 5}, rng);
  Tensor x2 = x;
  for (std::size_t c = 0; c < 8; ++c) x2.at({0, c, 2, 3}) += 1.0;
  const Tensor a = ops::kernel_generate(x, spec), b = ops::kernel_generate(x2, spec);
  for (std::size_t g = 0; g < 2; ++g)
    for (std::size_t t = 0; t < 9; ++t)
      for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j) {
          const bool same = a.at({0, g, t, i, j}) == b.at({0, g, t, i, j});
          EXPECT_EQ(same, !(i == 2 && j == 3));
        }
}

TEST(InvolutionMac, DeltaKernelIsIdentity) {
  Prng rng(12);
  const Tensor x = random_normal({2, 6, 5, 4}, rng);
  EXPECT_EQ(ops::involution_mac(x, delta_kernel(2, 3, 3, 5, 4), same_window(3)), x);
}

TEST(InvolutionMac, ConstantKernelIsBoxFilter) {
  Prng rng(13);
  const Tensor x = random_normal({1, 4, 5, 5}, rng);
  const Tensor k = Tensor::full({1, 2, 9, 5, 5}, 1.0 / 9.0);
  Tensor box = Tensor::zeros({4, 1, 3, 3});
  for (double& v : box.data()) v = 1.0 / 9.0;
  EXPECT_LE(max_abs_diff(ops::involution_mac(x, k, same_window(3)), ops::conv2d(x, box, nullptr, same_window(3), 4)),
            kOracleTol);
}

TEST(InvolutionMac, MatchesNestedLoops) {
  Prng rng(14);
  const Tensor x = random_normal({1, 4, 5, 5}, rng);
  const Tensor k = random_normal({1, 2, 9, 5, 5}, rng);
  EXPECT_LE(max_abs_diff(ops::involution_mac(x, k, same_window(3)), reference::involution_mac(x, k, same_window(3))),
            kOracleTol);
}

TEST(Involution, StrideTwoShapes) {
  Prng rng(15);
  const InvolutionSpec spec = small_involution(rng, 16, 3, 2, 2, 2);
  const Tensor x = random_normal({1, 16, 8, 8}, rng);
  EXPECT_EQ(ops::kernel_generate(x, spec).shape(), (Shape{1, 2, 9, 4, 4}));
  EXPECT_EQ(ops::involution(x, spec).shape(), (Shape{1, 16, 4, 4}));
}

TEST(Involution, IsGenerateThenMac) {
  Prng rng(16);
  const InvolutionSpec spec = small_involution(rng, 16, 5, 4, 4, 2);
  const Tensor x = random_normal({2, 16, 8, 8}, rng);
  EXPECT_EQ(ops::involution(x, spec),
            ops::involution_mac(x, ops::kernel_generate(x, spec), spec.config.window()));
}

TEST(Involution, MatchesNestedLoops) {
  Prng rng(17);
  for (BnMode mode : {BnMode::kTrain, BnMode::kEval}) {
    InvolutionSpec spec = small_involution(rng, 8, 3, 2, 2);
    spec.bn->mode = mode;
    const Tensor x = random_normal({2, 8, 6, 6}, rng);
    EXPECT_LE(max_abs_diff(ops::involution(x, spec), reference::involution(x, spec)), kOracleTol);
  }
}

namespace {

AttentionSpec small_attention(Prng& rng, std::size_t C, std::size_t K, std::size_t heads,
                              AttentionMode mode = AttentionMode::kContent) {
  AttentionConfig cfg;
  cfg.channels = C;
  cfg.window = K;
  cfg.heads = heads;
  cfg.mode = mode;
  return make_attention("att", cfg, rng);
}

Tensor identity(std::size_t n) {
  Tensor t = Tensor::zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at({i, i}) = 1.0;
  return t;
}

}  // namespace

TEST(Attention, IdentityValuesWithCentreAffinityReturnInput) {
  Prng rng(18);
  AttentionSpec spec = small_attention(rng, 4, 3, 2);
  spec.value.value = identity(4);
  const Tensor x = random_normal({1, 4, 5, 5}, rng);
  EXPECT_EQ(ops::involution_mac(ops::attention_values(x, spec), delta_kernel(1, 2, 3, 5, 5), same_window(3)), x);
}

TEST(Attention, WindowOneSingleHeadIsQKTimesV) {
  Prng rng(19);
  const AttentionSpec spec = small_attention(rng, 3, 1, 1);
  const Tensor x = random_normal({1, 3, 2, 2}, rng);
  const Tensor y = ops::local_self_attention(x, spec);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double q[3] = {}, k[3] = {}, v[3] = {};
      for (std::size_t o = 0; o < 3; ++o)
        for (std::size_t c = 0; c < 3; ++c) {
          q[o] += spec.query.value.at({o, c}) * x.at({0, c, i, j});
          k[o] += spec.key.value.at({o, c}) * x.at({0, c, i, j});
          v[o] += spec.value.value.at({o, c}) * x.at({0, c, i, j});
        }
      const double qk = q[0] * k[0] + q[1] * k[1] + q[2] * k[2];
      for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(y.at({0, c, i, j}), qk * v[c], 1e-12);
    }
}

TEST(Attention, EqualsInvolutionMacOfAffinity) {
  Prng rng(20);
  const AttentionSpec spec = small_attention(rng, 8, 3, 2);
  const Tensor x = random_normal({2, 8, 5, 5}, rng);
  EXPECT_EQ(ops::local_self_attention(x, spec),
            ops::involution_mac(ops::attention_values(x, spec), ops::attention_affinity(x, spec), same_window(3)));
}

TEST(Attention, ContentAndPositionMatchNestedLoops) {
  Prng rng(21);
  for (AttentionMode mode : {AttentionMode::kContent, AttentionMode::kPosition}) {
    const AttentionSpec spec = small_attention(rng, 4, 3, 2, mode);
    const Tensor x = random_normal({1, 4, 5, 5}, rng);
    EXPECT_LE(max_abs_diff(ops::local_self_attention(x, spec), reference::local_self_attention(x, spec)), kOracleTol);
  }
}

TEST(Relu, HandValues) {
  EXPECT_EQ(ops::relu(Tensor::from({3}, {-1, 0, 2})), Tensor::from({3}, {0, 0, 2}));
}

TEST(BatchNorm, TrainModeStandardizes) {
  Prng rng(22);
  BatchNormState bn("bn", 3);
  const Tensor x = random_normal({4, 3, 3, 3}, rng, 2.0);
  const Tensor y = ops::batch_norm(x, bn);
  const std::size_t n = 4 * 9;
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0.0, var = 0.0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 9; ++i) mean += y[(b * 3 + c) * 9 + i];
    mean /= n;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 9; ++i) var += std::pow(y[(b * 3 + c) * 9 + i] - mean, 2);
    var /= n;
    EXPECT_NEAR(mean, 0.0, 1e-10);
    // eps = 1e-5 keeps the variance just under one.
    EXPECT_NEAR(var, 1.0, 1e-4);
  }
}

TEST(BatchNorm, EvalBeforeAnyUpdateUsesInitialStatistics) {
  Prng rng(23);
  BatchNormState bn("bn", 2);
  bn.mode = BnMode::kEval;
  const Tensor x = random_normal({1, 2, 2, 2}, rng);
  const Tensor y = ops::batch_norm(x, bn);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], x[i] / std::sqrt(1.0 + 1e-5), 1e-15);
}

TEST(BatchNorm, TrainModeMovesRunningEstimates) {
  Prng rng(24);
  BatchNormState bn("bn", 2);
  (void)ops::batch_norm(random_normal({4, 2, 3, 3}, rng), bn);
  EXPECT_NE(bn.running_mean, Tensor::zeros({2}));
  for (double v : bn.running_var.data()) EXPECT_GE(v, 0.0);
}

TEST(Softmax, RowsSumToOne) {
  Prng rng(25);
  const Tensor y = ops::softmax(random_normal({5, 7}, rng, 3.0), 1);
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 7; ++c) s += y.at({r, c});
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Registry, EveryOpHasAGradientRule) {
  for (const std::string& name : nn::registry().names()) {
    EXPECT_FALSE(nn::registry().at(name).input_names.empty()) << name;
  }
  for (const char* op : {"unfold", "conv2d", "depthwise_conv2d", "involution_mac", "kernel_generate", "involution",
                         "local_self_attention", "batch_norm", "relu", "softmax", "cross_entropy"}) {
    EXPECT_TRUE(nn::registry().contains(op)) << op;
  }
}
