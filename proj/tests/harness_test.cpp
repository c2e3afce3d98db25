#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "involution/harness/bench.hpp"
#include "involution/harness/heatmap.hpp"
#include "involution/harness/profile.hpp"
#include "involution/harness/train.hpp"
#include "involution/prng.hpp"

using namespace involution;
using namespace involution::harness;

TEST(Bench, MacRatioMatchesLayerCounts) {
  BenchConfig inv;
  BenchConfig conv;
  conv.op = BenchOp::kConv3x3;
  InvolutionConfig ic;
  ic.channels = 64;
  ic.kernel = 7;
  ic.groups = 4;
  ic.reduction = 4;
  ConvConfig cc;
  cc.in_channels = cc.out_channels = 64;
  cc.kernel = 3;
  EXPECT_EQ(bench_macs(inv), involution_macs(ic, 56));
  EXPECT_EQ(bench_macs(conv), conv_macs(cc, 56));
  EXPECT_DOUBLE_EQ(static_cast<double>(bench_macs(inv)) / static_cast<double>(bench_macs(conv)),
                   static_cast<double>(involution_macs(ic, 56)) / static_cast<double>(conv_macs(cc, 56)));
}

TEST(Bench, GroupsPerOp) {
  BenchConfig c;
  EXPECT_EQ(c.groups(), 4u);
  c.group_channels = 0;
  EXPECT_EQ(c.groups(), 1u);
  c.op = BenchOp::kDepthwise3x3;
  EXPECT_EQ(c.groups(), 64u);
  EXPECT_EQ(c.window(), 3u);
}

TEST(Bench, SizeGuardRejectsHugeConfigs) {
  BenchConfig c;
  c.batch = 64;
  c.channels = 512;
  c.size = 224;
  EXPECT_GT(bench_workspace_bytes(c), kBenchWorkspaceLimit);
  EXPECT_THROW(run_bench(c, 1), BenchSizeError);
}

TEST(Bench, TooFewRepsRejected) {
  BenchConfig c;
  c.reps = 5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Bench, SmallRunIsVerifiedAndTimed) {
  for (BenchOp op : {BenchOp::kInvolution, BenchOp::kConv3x3, BenchOp::kDepthwise3x3, BenchOp::kAttention}) {
    BenchConfig c;
    c.op = op;
    c.channels = 16;
    c.size = 8;
    c.kernel = 3;
    c.group_channels = 8;
    const BenchResult r = run_bench(c, 2);
    EXPECT_TRUE(r.verified) << to_string(op);
    EXPECT_LE(r.oracle_err, kBenchOracleTolerance);
    EXPECT_GT(r.median_ms, 0.0);
    EXPECT_LE(r.p10_ms, r.median_ms);
    EXPECT_LE(r.median_ms, r.p90_ms);
  }
}

TEST(Bench, KernelOneInvolutionRowPresent) {
  BenchConfig c;
  c.kernel = 1;
  c.channels = 16;
  c.size = 8;
  std::ostringstream os;
  write_bench_csv(os, {run_bench(c, 3)});
  std::istringstream is(os.str());
  std::string header, row;
  std::getline(is, header);
  std::getline(is, row);
  EXPECT_EQ(row.rfind("involution,1,16,8,8,1,", 0), 0u) << row;
}

TEST(Quantile, Interpolates) {
  EXPECT_DOUBLE_EQ(quantile({3, 1, 2, 4}, 0.5), 2.5);
  EXPECT_DOUBLE_EQ(quantile({5}, 0.9), 5.0);
  EXPECT_DOUBLE_EQ(quantile({0, 10}, 0.1), 1.0);
}

namespace {

Tensor toy_image(std::uint64_t seed) {
  Prng rng(seed);
  return random_uniform({1, 3, 32, 32}, rng, 0.0, 1.0);
}

}  // namespace

TEST(Heatmap, IsKernelTapSum) {
  Network net(build_rednet_toy(), 4);
  net.set_mode(BnMode::kEval);
  const Tensor image = toy_image(5);
  const Tensor maps = kernel_heat_maps(net, image, "conv2_1");
  const Tensor k = net.extract_kernels(image, "conv2_1");
  ASSERT_EQ(maps.shape(), (Shape{k.dim(1), k.dim(3), k.dim(4)}));
  EXPECT_EQ(maps, reshape(reduce_sum(k, {2}), maps.shape()));
}

TEST(Heatmap, ConstantKernelGivesFlatMaps) {
  Network net(build_rednet_toy(), 6);
  force_constant_kernel(net, "conv3_1", 0.5);
  const Tensor maps = kernel_heat_maps(net, toy_image(7), "conv3_1");
  EXPECT_EQ(maps.dim(0), 4u);
  for (double v : maps.data()) EXPECT_EQ(v, 0.5 * 49);
}

TEST(Heatmap, NonInvolutionLayerRejected) {
  Network net(build_rednet_toy(), 8);
  EXPECT_THROW(kernel_heat_maps(net, toy_image(9), "fc"), LayerError);
}

TEST(Heatmap, CsvRowsAndPgm) {
  const Tensor maps = Tensor::from({2, 1, 2}, {0, 1, 7, 7});
  std::ostringstream os;
  write_heatmap_csv(os, maps);
  EXPECT_EQ(os.str(), "group,row,col,value\n0,0,0,0\n0,0,1,1\n1,0,0,7\n1,0,1,7\n");
  EXPECT_EQ(encode_pgm(maps, 0), std::string("P5\n2 1\n255\n") + std::string(1, '\0') + std::string(1, '\xff'));
  EXPECT_EQ(encode_pgm(maps, 1), std::string("P5\n2 1\n255\n") + std::string(2, '\0'));
}

TEST(Heatmap, PpmRoundTrip) {
  std::istringstream is(std::string("P6\n1 1\n255\n") + std::string("\xff\0\x33", 3));
  EXPECT_EQ(read_ppm(is), Tensor::from({1, 3, 1, 1}, {1.0, 0.0, 0.2}));
}

namespace {

ToyExperiment tiny_experiment() {
  ToyExperiment e;
  e.data.samples = 32;
  e.test_samples = 16;
  e.train.epochs = 3;
  e.train.batch_size = 8;
  e.train.seed = 11;
  return e;
}

}  // namespace

TEST(Train, ZeroLearningRateKeepsLossConstant) {
  ToyExperiment e = tiny_experiment();
  e.train.lr = 0.0;
  e.baseline = false;
  const ToyOutcome out = run_toy_experiment(e);
  ASSERT_EQ(out.rednet.size(), 3u);
  for (const EpochMetrics& m : out.rednet) EXPECT_NEAR(m.loss, out.rednet.front().loss, 1e-12);
}

TEST(Train, SameSeedSameMetricsCsv) {
  auto csv = [] {
    const ToyOutcome out = run_toy_experiment(tiny_experiment());
    std::ostringstream os;
    write_metrics_csv(os, out.rednet);
    write_metrics_csv(os, out.linear);
    return os.str();
  };
  EXPECT_EQ(csv(), csv());
}

TEST(Train, InvalidConfigRejected) {
  TrainConfig c;
  c.lr = -1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.lr = 0.1;
  c.momentum = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Train, DivergenceAborts) {
  ToyExperiment e = tiny_experiment();
  e.train.lr = 1e150;
  e.baseline = false;
  EXPECT_THROW(run_toy_experiment(e), TrainingDiverged);
}

TEST(Train, SgdFirstStepIsPlainGradient) {
  Parameter p("p", Tensor::from({2}, {1.0, -2.0}));
  p.grad = Tensor::from({2}, {0.5, 0.25});
  Sgd sgd({&p}, {0.9, 0.0});
  sgd.step(0.1);
  EXPECT_EQ(p.value, Tensor::from({2}, {1.0 - 0.05, -2.0 - 0.025}));
}

TEST(Train, CosineScheduleEndpoints) {
  EXPECT_DOUBLE_EQ(cosine_lr(0.1, 0, 10), 0.1);
  EXPECT_NEAR(cosine_lr(0.1, 5, 10), 0.05, 1e-15);
  EXPECT_NEAR(cosine_lr(0.1, 10, 10), 0.0, 1e-15);
}

TEST(Dataset, LabelsBalancedAndDeterministic) {
  DatasetConfig c;
  c.samples = 40;
  const SyntheticDataset a(c, 3), b(c, 3);
  EXPECT_EQ(a.images(), b.images());
  std::vector<std::size_t> counts(4, 0);
  for (std::size_t l : a.labels()) ++counts[l];
  for (std::size_t n : counts) EXPECT_EQ(n, 10u);
}

TEST(Profile, TargetsUseTheRednetTolerance) {
  const ProfileTarget t = depth_targets().front();
  Tolerance loose;
  Tolerance none{0.0, 0.0};
  const ProfileCheck ok = check_target(t, loose);
  EXPECT_EQ(ok.params_ok, std::abs(ok.params_err_pct) <= loose.params_pct);
  EXPECT_EQ(ok.macs_ok, std::abs(ok.macs_err_pct) <= loose.macs_pct);
  EXPECT_FALSE(check_target(t, none).pass());
}

TEST(Profile, FindTargetRecognisesRedNet50) {
  const std::optional<ProfileTarget> t = find_target(build_rednet({}));
  ASSERT_TRUE(t.has_value());
  EXPECT_DOUBLE_EQ(t->params_m, 15.5);
  EXPECT_DOUBLE_EQ(t->macs_g, 2.7);
}
