#include "involution/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <stdexcept>

#include "involution/prng.hpp"

namespace involution {

namespace {

double projected_loss(const TapeFunction& f, const std::vector<Tensor>& inputs, const Tensor& projection) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const Tensor& t : inputs) vars.push_back(tape.constant(t));
  const Tensor& y = f(tape, vars).value();
  double acc = 0.0;
  for (std::size_t i = 0; i < y.numel(); ++i) acc += projection[i] * y[i];
  return acc;
}

}  // namespace

GradCheckReport grad_check(std::string op_name, const TapeFunction& f, const std::vector<Tensor>& inputs,
                           const std::vector<std::string>& input_names, const GradCheckOptions& options) {
  if (!(options.eps >= 1e-7 && options.eps <= 1e-3)) {
    throw std::invalid_argument("grad_check: eps must lie in [1e-7, 1e-3]");
  }
  if (input_names.size() != inputs.size()) throw std::invalid_argument("grad_check: one name per input required");

  // Analytic pass.
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(tape.input(t));
  Var y = f(tape, vars);
  Prng rng(options.seed);
  const Tensor projection = random_uniform(y.shape(), rng);
  Var loss = ad::sum(ad::mul(y, tape.constant(projection)));
  tape.backward(loss);

  GradCheckReport report;
  report.op = std::move(op_name);
  report.pass = true;
  std::vector<Tensor> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor analytic = tape.grad(vars[k]);
    double worst = 0.0;
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      const double x0 = inputs[k][i];
      probe[k][i] = x0 + options.eps;
      const double up = projected_loss(f, probe, projection);
      probe[k][i] = x0 - options.eps;
      const double down = projected_loss(f, probe, projection);
      probe[k][i] = x0;
      const double numeric = (up - down) / (2.0 * options.eps);
      const double a = analytic[i];
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
    const bool ok = worst < options.tol;
    report.inputs.push_back({input_names[k], worst, ok});
    report.max_rel_err = std::max(report.max_rel_err, worst);
    report.pass = report.pass && ok;
  }
  return report;
}

GradCheckReport grad_check(const OpRegistry& registry, std::string_view op, const std::vector<Tensor>& inputs,
                           const Attrs& attrs, const GradCheckOptions& options) {
  const OpRule& rule = registry.at(op);
  TapeFunction f = [&registry, &rule, &attrs](Tape& tape, std::span<const Var> in) {
    return registry.forward(tape, rule.name, in, attrs);
  };
  return grad_check(rule.name, f, inputs, rule.input_names, options);
}

void write_gradcheck_csv(std::ostream& os, std::span<const GradCheckReport> reports) {
  os << "op,input,max_rel_err,pass\n";
  const auto flags = os.flags();
  for (const GradCheckReport& r : reports) {
    for (const InputGradError& e : r.inputs) {
      os << r.op << ',' << e.input << ',' << std::scientific << std::setprecision(6) << e.max_rel_err << ','
         << (e.pass ? "true" : "false") << '\n';
      os.flags(flags);
    }
  }
}

}  // namespace involution
