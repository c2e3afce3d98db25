#include "involution/harness/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <ostream>
#include <string>

#include "involution/nnops.hpp"
#include "involution/prng.hpp"
#include "involution/reference.hpp"

namespace involution::harness {

namespace {

InvolutionConfig involution_config(const BenchConfig& c) {
  InvolutionConfig cfg;
  cfg.channels = c.channels;
  cfg.kernel = c.kernel;
  cfg.groups = c.groups();
  cfg.reduction = c.reduction;
  return cfg;
}

ConvConfig conv_config(const BenchConfig& c) {
  ConvConfig cfg;
  cfg.in_channels = c.channels;
  cfg.out_channels = c.channels;
  cfg.kernel = 3;
  cfg.groups = c.op == BenchOp::kDepthwise3x3 ? c.channels : 1;
  return cfg;
}

AttentionConfig attention_config(const BenchConfig& c) {
  AttentionConfig cfg;
  cfg.channels = c.channels;
  cfg.window = c.kernel;
  cfg.heads = c.groups();
  return cfg;
}

struct Prepared {
  std::function<Tensor()> op;
  std::function<Tensor()> oracle;
};

}  // namespace

std::string_view to_string(BenchOp op) {
  switch (op) {
    case BenchOp::kInvolution:
      return "involution";
    case BenchOp::kConv3x3:
      return "conv3x3";
    case BenchOp::kDepthwise3x3:
      return "depthwise3x3";
    case BenchOp::kAttention:
      return "attention";
  }
  return "?";
}

BenchOp parse_bench_op(std::string_view text) {
  for (BenchOp op : {BenchOp::kInvolution, BenchOp::kConv3x3, BenchOp::kDepthwise3x3, BenchOp::kAttention}) {
    if (text == to_string(op)) return op;
  }
  throw std::invalid_argument("unknown bench op '" + std::string(text) +
                              "' (expected involution, conv3x3, depthwise3x3 or attention)");
}

std::size_t BenchConfig::groups() const {
  if (op == BenchOp::kConv3x3) return 1;
  if (op == BenchOp::kDepthwise3x3) return channels;
  if (group_channels == 0) return 1;
  return std::max<std::size_t>(1, channels / group_channels);
}

std::size_t BenchConfig::window() const {
  return op == BenchOp::kConv3x3 || op == BenchOp::kDepthwise3x3 ? 3 : kernel;
}

void BenchConfig::validate() const {
  if (batch == 0 || channels == 0 || size == 0) throw std::invalid_argument("bench: batch, channels and size must be > 0");
  if (reps < 20) throw std::invalid_argument("bench: at least 20 timed repetitions are required");
  if (kernel % 2 == 0) throw std::invalid_argument("bench: kernel must be odd");
  if (channels % groups() != 0) throw std::invalid_argument("bench: channels must divide into groups");
  if (op == BenchOp::kInvolution && (reduction == 0 || channels % reduction != 0)) {
    throw std::invalid_argument("bench: channels must be divisible by the reduction ratio");
  }
}

std::uint64_t bench_workspace_bytes(const BenchConfig& c) {
  const std::uint64_t L = static_cast<std::uint64_t>(c.size) * c.size;
  const std::uint64_t taps = static_cast<std::uint64_t>(c.window()) * c.window();
  const std::uint64_t cols = c.batch * c.channels * taps * L;
  const std::uint64_t kernels = c.batch * c.groups() * taps * L;
  const std::uint64_t maps = c.batch * c.channels * L;
  return 8 * (2 * cols + 2 * kernels + 6 * maps);
}

std::uint64_t bench_macs(const BenchConfig& c) {
  std::uint64_t per_image = 0;
  switch (c.op) {
    case BenchOp::kInvolution:
      per_image = involution_macs(involution_config(c), c.size, c.convention);
      break;
    case BenchOp::kConv3x3:
    case BenchOp::kDepthwise3x3:
      per_image = conv_macs(conv_config(c), c.size, c.convention);
      break;
    case BenchOp::kAttention:
      per_image = attention_macs(attention_config(c), c.size, c.convention);
      break;
  }
  return per_image * c.batch;
}

double quantile(std::vector<double> samples, double q) {
  if (samples.empty()) throw std::invalid_argument("quantile of an empty sample");
  std::sort(samples.begin(), samples.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(samples.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, samples.size() - 1);
  return samples[lo] + (pos - static_cast<double>(lo)) * (samples[hi] - samples[lo]);
}

BenchResult run_bench(const BenchConfig& config, std::uint64_t seed) {
  config.validate();
  if (bench_workspace_bytes(config) > kBenchWorkspaceLimit) {
    throw BenchSizeError("bench: config needs " + std::to_string(bench_workspace_bytes(config) >> 20) +
                         " MiB of workspace, limit is " + std::to_string(kBenchWorkspaceLimit >> 20) + " MiB");
  }
  Prng rng(seed);
  const Tensor x = random_normal({config.batch, config.channels, config.size, config.size}, rng);

  // Specs live here so the closures below can hold references.
  InvolutionSpec inv;
  ConvSpec conv;
  AttentionSpec att;
  Prepared p;
  switch (config.op) {
    case BenchOp::kInvolution:
      inv = make_involution("bench", involution_config(config), rng);
      if (inv.bn) inv.bn->mode = BnMode::kEval;
      p.op = [&] { return ops::involution(x, inv); };
      p.oracle = [&] { return reference::involution(x, inv); };
      break;
    case BenchOp::kConv3x3:
      conv = make_conv("bench", conv_config(config), rng);
      p.op = [&] { return ops::conv2d(x, conv); };
      p.oracle = [&] { return reference::conv2d(x, conv.filters.value, nullptr, conv.config.window(), 1); };
      break;
    case BenchOp::kDepthwise3x3:
      conv = make_conv("bench", conv_config(config), rng);
      p.op = [&] { return ops::depthwise_conv2d(x, conv); };
      p.oracle = [&] { return reference::depthwise_conv2d(x, conv.filters.value, conv.config.window()); };
      break;
    case BenchOp::kAttention:
      att = make_attention("bench", attention_config(config), rng);
      p.op = [&] { return ops::local_self_attention(x, att); };
      p.oracle = [&] { return reference::local_self_attention(x, att); };
      break;
  }

  BenchResult r;
  r.config = config;
  r.macs = bench_macs(config);
  r.oracle_err = max_abs_diff(p.op(), p.oracle());
  r.verified = r.oracle_err <= kBenchOracleTolerance;
  if (!r.verified) return r;

  for (std::size_t i = 0; i < config.warmup; ++i) (void)p.op();
  std::vector<double> ms;
  ms.reserve(config.reps);
  double sink = 0.0;
  for (std::size_t i = 0; i < config.reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const Tensor y = p.op();
    const auto t1 = std::chrono::steady_clock::now();
    sink += y[0];
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  [[maybe_unused]] volatile double keep = sink;
  r.median_ms = quantile(ms, 0.5);
  r.p10_ms = quantile(ms, 0.1);
  r.p90_ms = quantile(ms, 0.9);
  r.gmacs_per_s = static_cast<double>(r.macs) / (r.median_ms * 1e6);
  return r;
}

void write_bench_csv(std::ostream& os, const std::vector<BenchResult>& results) {
  os << "op,batch,channels,height,width,kernel,groups,reduction,reps,macs,median_ms,p10_ms,p90_ms,gmacs_per_s,"
        "oracle_err,verified\n";
  char line[320];
  for (const BenchResult& r : results) {
    const BenchConfig& c = r.config;
    const std::string op(to_string(c.op));
    const std::size_t reduction = c.op == BenchOp::kInvolution ? c.reduction : 0;
    if (r.verified) {
      std::snprintf(line, sizeof line, "%s,%zu,%zu,%zu,%zu,%zu,%zu,%zu,%zu,%llu,%.4f,%.4f,%.4f,%.4f,%.3e,true\n",
                    op.c_str(), c.batch, c.channels, c.size, c.size, c.window(), c.groups(), reduction, c.reps,
                    static_cast<unsigned long long>(r.macs), r.median_ms, r.p10_ms, r.p90_ms, r.gmacs_per_s,
                    r.oracle_err);
    } else {
      std::snprintf(line, sizeof line, "%s,%zu,%zu,%zu,%zu,%zu,%zu,%zu,%zu,%llu,,,,,%.3e,false\n", op.c_str(),
                    c.batch, c.channels, c.size, c.size, c.window(), c.groups(), reduction, c.reps,
                    static_cast<unsigned long long>(r.macs), r.oracle_err);
    }
    os << line;
  }
}

}  // namespace involution::harness
