#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "involution/rednet.hpp"

namespace involution::harness {

enum class BenchOp { kInvolution, kConv3x3, kDepthwise3x3, kAttention };

std::string_view to_string(BenchOp op);
/// "involution", "conv3x3", "depthwise3x3", "attention".
BenchOp parse_bench_op(std::string_view text);

struct BenchConfig {
  BenchOp op = BenchOp::kInvolution;
  std::size_t batch = 1;
  std::size_t channels = 64;
  std::size_t size = 56;  // H = W
  /// Window of involution and attention; the convolutions are always 3x3.
  std::size_t kernel = 7;
  std::size_t group_channels = 16;  // 0: one group
  std::size_t reduction = 4;
  std::size_t reps = 20;
  std::size_t warmup = 2;
  MacConvention convention = MacConvention::kFramework;

  /// Kernel groups, attention heads, 1 for conv3x3, C for depthwise3x3.
  std::size_t groups() const;
  std::size_t window() const;
  void validate() const;
};

/// Largest intermediate of the op or of its oracle, in bytes.
std::uint64_t bench_workspace_bytes(const BenchConfig& config);

inline constexpr std::uint64_t kBenchWorkspaceLimit = std::uint64_t{1} << 30;
/// Maximum absolute deviation from the nested-loop oracle before timing.
inline constexpr double kBenchOracleTolerance = 1e-9;

class BenchSizeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// MACs of one forward call, by the layer MAC functions of the cost model.
std::uint64_t bench_macs(const BenchConfig& config);

struct BenchResult {
  BenchConfig config;
  std::uint64_t macs = 0;
  double oracle_err = 0.0;
  /// False when the op disagreed with the oracle; timings are then absent.
  bool verified = false;
  double median_ms = 0.0;
  double p10_ms = 0.0;
  double p90_ms = 0.0;
  double gmacs_per_s = 0.0;
};

/// Linear interpolation between order statistics, q in [0, 1].
double quantile(std::vector<double> samples, double q);

/// Builds seeded weights and input, checks the op against the oracle and
/// only then times `reps` calls with steady_clock. Throws BenchSizeError
/// above kBenchWorkspaceLimit.
BenchResult run_bench(const BenchConfig& config, std::uint64_t seed);

/// op,batch,channels,height,width,kernel,groups,reduction,reps,macs,median_ms,p10_ms,p90_ms,gmacs_per_s,oracle_err,verified
void write_bench_csv(std::ostream& os, const std::vector<BenchResult>& results);

}  // namespace involution::harness
