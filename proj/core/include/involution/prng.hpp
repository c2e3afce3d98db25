#pragma once

#include <cstdint>

#include "involution/tensor.hpp"

namespace involution {

/// SplitMix64 generator. Integer arithmetic only, so a seed yields the same
/// sequence on every platform; the floating-point helpers below are built
/// on it rather than on <random> distributions, whose output is
/// implementation-defined.
class Prng {
 public:
  explicit Prng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal via Box-Muller.
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  /// Derive an independent stream, e.g. one per layer.
  Prng fork() { return Prng(next_u64()); }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

Tensor random_uniform(Shape shape, Prng& rng, double lo = -1.0, double hi = 1.0);
Tensor random_normal(Shape shape, Prng& rng, double stddev = 1.0);

}  // namespace involution
