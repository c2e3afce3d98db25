#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "involution/autodiff.hpp"

namespace involution {

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-5;
  std::uint64_t seed = 0x5eed;
};

struct InputGradError {
  std::string input;
  double max_rel_err = 0.0;
  bool pass = false;
};

struct GradCheckReport {
  std::string op;
  double max_rel_err = 0.0;
  std::vector<InputGradError> inputs;
  bool pass = false;
};

using TapeFunction = std::function<Var(Tape&, std::span<const Var>)>;

/// Compares the tape gradient of  L = sum(P * f(inputs))  for a seeded
/// random projection P against central differences
/// (L(x + eps) - L(x - eps)) / (2 eps), element by element. The error of
/// one element is |analytic - numeric| / max(1, |analytic|, |numeric|).
/// Throws std::invalid_argument unless eps lies in [1e-7, 1e-3].
GradCheckReport grad_check(std::string op_name, const TapeFunction& f, const std::vector<Tensor>& inputs,
                           const std::vector<std::string>& input_names, const GradCheckOptions& options = {});

/// Same, for an op looked up in `registry`.
GradCheckReport grad_check(const OpRegistry& registry, std::string_view op, const std::vector<Tensor>& inputs,
                           const Attrs& attrs = {}, const GradCheckOptions& options = {});

/// One row per (op, input): op,input,max_rel_err,pass
void write_gradcheck_csv(std::ostream& os, std::span<const GradCheckReport> reports);

}  // namespace involution
