#include <gtest/gtest.h>

#include <sstream>

#include "involution/prng.hpp"
#include "involution/rednet.hpp"

using namespace involution;

namespace {

std::size_t instantiated_params(const ArchSpec& arch) {
  Network net(arch, 1);
  std::size_t n = 0;
  for (Parameter* p : net.parameters()) n += p->numel();
  return n;
}

}  // namespace

TEST(BuildRedNet, StageBlockCounts) {
  const std::vector<std::pair<std::size_t, std::vector<std::size_t>>> table{
      {26, {1, 2, 4, 1}}, {38, {2, 3, 5, 2}}, {50, {3, 4, 6, 3}}, {101, {3, 4, 23, 3}}, {152, {3, 8, 36, 3}}};
  for (const auto& [depth, counts] : table) {
    RedNetOptions o;
    o.depth = depth;
    const ArchSpec arch = build_rednet(o);
    ASSERT_EQ(arch.stages.size(), 4u);
    std::size_t blocks = 0;
    for (std::size_t s = 0; s < 4; ++s) {
      EXPECT_EQ(arch.stages[s].blocks, counts[s]) << depth;
      EXPECT_EQ(arch.stages[s].mid_channels, 64u << s);
      blocks += counts[s];
    }
    EXPECT_EQ(arch.blocks().size(), blocks);
    EXPECT_EQ(3 * blocks + 2, depth);
  }
}

TEST(BuildRedNet, UnsupportedDepthThrows) {
  RedNetOptions o;
  o.depth = 33;
  EXPECT_THROW(build_rednet(o), std::invalid_argument);
}

TEST(BuildRedNet, BlockNamesAndStrides) {
  const std::vector<BlockSpec> blocks = build_rednet({}).blocks();
  EXPECT_EQ(blocks.front().name, "conv1_1");
  EXPECT_EQ(blocks[10].name, "conv3_4");
  EXPECT_EQ(blocks.back().name, "conv4_3");
  EXPECT_EQ(blocks[0].stride, 1u);
  EXPECT_EQ(blocks[3].stride, 2u);
  EXPECT_TRUE(blocks[0].projection);
  EXPECT_FALSE(blocks[1].projection);
}

TEST(CountParams, SingleInvolutionLayerClosedForm) {
  InvolutionConfig cfg;
  cfg.channels = 256;
  cfg.kernel = 7;
  cfg.groups = 16;
  cfg.reduction = 4;
  EXPECT_EQ(involution_params(cfg), 67472u);
  Prng rng(1);
  const InvolutionSpec spec = make_involution("inv", cfg, rng);
  std::size_t enumerated = spec.reduce->numel() + spec.span.numel() + spec.span_bias.numel();
  if (spec.bn) enumerated += spec.bn->gamma.numel() + spec.bn->beta.numel();
  EXPECT_EQ(enumerated, 67472u);
}

TEST(CountParams, MatchesInstantiatedNetworks) {
  MiddleOpConfig conv;
  conv.op = MiddleOp::kConv3x3;
  MiddleOpConfig attention;
  attention.op = MiddleOp::kAttention;
  attention.group_channels = 8;
  for (const ArchSpec& arch : {build_rednet_toy(), build_rednet_toy(conv), build_rednet_toy(attention),
                               build_rednet_toy({}, 4, StemVariant::kConv7)}) {
    EXPECT_EQ(count_params(arch).total_params, instantiated_params(arch)) << arch.name;
  }
  EXPECT_EQ(count_params(build_rednet({})).total_params, instantiated_params(build_rednet({})));
}

TEST(CostReport, TotalsAreRowSums) {
  const CostReport r = cost_report(build_rednet({}));
  std::uint64_t params = 0, macs = 0;
  for (const CostRow& row : r.rows) {
    params += row.params;
    macs += row.macs;
  }
  EXPECT_EQ(params, r.total_params);
  EXPECT_EQ(macs, r.total_macs);
}

TEST(CostReport, ResolutionMustDivideByThirtyTwo) {
  EXPECT_THROW(count_macs(build_rednet({}), 200), std::invalid_argument);
}

TEST(CostReport, StrictCountsNoMoreThanFramework) {
  const ArchSpec arch = build_rednet({});
  EXPECT_LT(count_macs(arch, 224, MacConvention::kStrict).total_macs, count_macs(arch, 224).total_macs);
}

TEST(CostReport, MacsScaleWithArea) {
  const ArchSpec arch = build_resnet(50);
  const double r = static_cast<double>(count_macs(arch, 448, MacConvention::kStrict).total_macs) /
                   static_cast<double>(count_macs(arch, 224, MacConvention::kStrict).total_macs);
  // Only the classifier does not scale.
  EXPECT_NEAR(r, 4.0, 0.01);
}

TEST(Network, ToyLogitsShape) {
  Network net(build_rednet_toy(), 3);
  Prng rng(4);
  Tape tape;
  const Var logits = net.forward(tape, tape.constant(random_normal({2, 3, 32, 32}, rng)));
  EXPECT_EQ(logits.shape(), (Shape{2, 4}));
}

TEST(Network, ZeroClassifierGivesZeroLogits) {
  Network net(build_rednet_toy(), 5);
  net.classifier_weight().value = Tensor::zeros(net.classifier_weight().value.shape());
  net.classifier_bias().value = Tensor::zeros(net.classifier_bias().value.shape());
  Prng rng(6);
  const Tensor logits = net.infer(random_normal({2, 3, 32, 32}, rng));
  for (double v : logits.data()) EXPECT_EQ(v, 0.0);
}

TEST(Network, ForwardIsDeterministic) {
  Prng rng(7);
  const Tensor x = random_normal({2, 3, 32, 32}, rng);
  Network a(build_rednet_toy(), 8), b(build_rednet_toy(), 8);
  a.set_mode(BnMode::kEval);
  b.set_mode(BnMode::kEval);
  Tape ta, tb;
  EXPECT_EQ(a.forward(ta, ta.constant(x)).value(), b.forward(tb, tb.constant(x)).value());
  EXPECT_EQ(a.infer(x), a.infer(x));
}

TEST(Network, InferMatchesTapedEvalForward) {
  Network net(build_rednet_toy(), 9);
  net.set_mode(BnMode::kEval);
  Prng rng(10);
  const Tensor x = random_normal({1, 3, 32, 32}, rng);
  Tape tape;
  EXPECT_EQ(net.forward(tape, tape.constant(x)).value(), net.infer(x));
}

TEST(Network, RejectsBadInput) {
  Network net(build_rednet_toy(), 11);
  EXPECT_THROW(net.infer(Tensor::zeros({1, 3, 40, 40})), ShapeError);
  EXPECT_THROW(net.infer(Tensor::zeros({1, 1, 32, 32})), ShapeError);
}

TEST(Network, SaveLoadRoundTrip) {
  Network a(build_rednet_toy(), 12), b(build_rednet_toy(), 13);
  std::stringstream ss;
  a.save(ss);
  b.load(ss);
  Prng rng(14);
  const Tensor x = random_normal({1, 3, 32, 32}, rng);
  a.set_mode(BnMode::kEval);
  b.set_mode(BnMode::kEval);
  EXPECT_EQ(a.infer(x), b.infer(x));
}

TEST(ExtractKernels, Conv3_4ShapeOfRedNet50) {
  Network net(build_rednet({}), 15);
  Prng rng(16);
  const Tensor k = net.extract_kernels(random_normal({1, 3, 224, 224}, rng), "conv3_4");
  EXPECT_EQ(k.shape(), (Shape{1, 16, 49, 14, 14}));
}

TEST(ExtractKernels, ToyShapesAndErrors) {
  Network net(build_rednet_toy(), 17);
  Prng rng(18);
  const Tensor x = random_normal({1, 3, 32, 32}, rng);
  EXPECT_EQ(net.extract_kernels(x, "conv4_1").shape(), (Shape{1, 8, 49, 1, 1}));
  EXPECT_THROW(net.extract_kernels(x, "conv9_1"), LayerError);
  Network conv(build_rednet_toy([] {
                 MiddleOpConfig m;
                 m.op = MiddleOp::kConv3x3;
                 return m;
               }()),
               19);
  EXPECT_THROW(conv.extract_kernels(x, "conv2_1"), LayerError);
}

TEST(ExtractKernels, IdenticalItemsGiveIdenticalKernels) {
  Network net(build_rednet_toy(), 20);
  net.set_mode(BnMode::kEval);
  Prng rng(21);
  const Tensor one = random_normal({1, 3, 32, 32}, rng);
  Tensor two = Tensor::zeros({2, 3, 32, 32});
  for (std::size_t i = 0; i < one.numel(); ++i) two[i] = two[one.numel() + i] = one[i];
  const Tensor k = net.extract_kernels(two, "conv3_1");
  const std::size_t half = k.numel() / 2;
  for (std::size_t i = 0; i < half; ++i) ASSERT_EQ(k[i], k[half + i]);
}
