#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "involution/grad_check.hpp"

namespace involution::harness {

/// Finite-difference certification of every registered differentiable op,
/// with inputs drawn away from relu and max-pool kinks.
std::vector<GradCheckReport> run_gradcheck_suite(std::uint64_t seed, const GradCheckOptions& options = {});

struct OracleCheck {
  std::string name;
  std::size_t cases = 0;
  std::size_t failures = 0;
  /// "max_abs_err": largest deviation over all cases, must not exceed the
  /// tolerance. "min_abs_diff": smallest separation, must exceed it.
  std::string metric = "max_abs_err";
  double value = 0.0;
  double tolerance = 0.0;

  bool pass() const { return cases > 0 && failures == 0; }
};

struct OracleOptions {
  std::size_t random_configs = 50;
  std::size_t property_cases = 100;
  double tolerance = 1e-12;
};

/// Naive-loop comparisons for conv2d, depthwise_conv2d, involution and
/// windowed attention; structural properties of the MAC and the generator;
/// the attention-as-involution identity.
std::vector<OracleCheck> run_oracle_suite(std::uint64_t seed, const OracleOptions& options = {});

/// check,cases,failures,metric,value,tolerance,pass
void write_oracle_csv(std::ostream& os, const std::vector<OracleCheck>& checks);

}  // namespace involution::harness
