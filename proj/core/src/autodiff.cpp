#include "involution/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace involution {

Parameter::Parameter(std::string n, Tensor v)
    : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape())) {}

void Parameter::zero_grad() { grad = Tensor::zeros(value.shape()); }

const Tensor& Var::value() const { return tape().value(*this); }

Tape& Var::tape() const {
  if (!tape_) throw std::logic_error("Var is not attached to a tape");
  return *tape_;
}

Var Tape::input(Tensor value, bool requires_grad) {
  TapeNode node;
  node.op = "input";
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(Parameter& p) {
  TapeNode node;
  node.op = "param:" + p.name;
  node.value = p.value;
  node.param = &p;
  node.requires_grad = true;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(std::string op, std::vector<Var> inputs, Tensor value, BackwardFn backward) {
  TapeNode node;
  node.op = std::move(op);
  node.value = std::move(value);
  node.backward = std::move(backward);
  for (const Var& in : inputs) {
    if (&in.tape() != this) throw std::logic_error("op '" + node.op + "' mixes vars from different tapes");
    if (in.id() >= nodes_.size()) throw std::logic_error("op '" + node.op + "' references a future node");
    node.inputs.push_back(in.id());
    node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var loss) {
  const TapeNode& root = nodes_.at(loss.id());
  if (root.value.numel() != 1) {
    throw ShapeError("backward: loss must be a single element, got " + shape_to_string(root.value.shape()));
  }
  grads_.assign(nodes_.size(), Tensor());
  has_grad_.assign(nodes_.size(), false);
  visits_ = 0;
  grads_[loss.id()] = Tensor::ones(root.value.shape());
  has_grad_[loss.id()] = true;

  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    if (!has_grad_[i]) continue;
    ++visits_;
    TapeNode& node = nodes_[i];
    if (node.is_leaf()) {
      if (node.param) add_inplace(node.param->grad, grads_[i]);
      continue;
    }
    if (!node.requires_grad) continue;
    const std::size_t arity = node.inputs.size();
    std::unique_ptr<bool[]> needed(new bool[arity + 1]);
    for (std::size_t k = 0; k < arity; ++k) needed[k] = nodes_[node.inputs[k]].requires_grad;
    std::vector<Tensor> in_grads = node.backward(grads_[i], std::span<const bool>(needed.get(), arity));
    if (in_grads.size() != node.inputs.size()) {
      throw std::logic_error("gradient rule of '" + node.op + "' returned the wrong number of gradients");
    }
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      if (!needed[k]) continue;
      const std::size_t j = node.inputs[k];
      if (!in_grads[k].same_shape(nodes_[j].value)) {
        throw std::logic_error("gradient rule of '" + node.op + "' produced shape " +
                               shape_to_string(in_grads[k].shape()) + " for input of shape " +
                               shape_to_string(nodes_[j].value.shape()));
      }
      if (has_grad_[j]) {
        add_inplace(grads_[j], in_grads[k]);
      } else {
        grads_[j] = std::move(in_grads[k]);
        has_grad_[j] = true;
      }
    }
  }
}

Tensor Tape::grad(Var v) const {
  const std::size_t i = v.id();
  if (i < has_grad_.size() && has_grad_[i]) return grads_[i];
  return Tensor::zeros(nodes_.at(i).value.shape());
}

std::size_t Tape::op_count() const noexcept {
  return static_cast<std::size_t>(std::count_if(nodes_.begin(), nodes_.end(), [](const TapeNode& n) { return !n.is_leaf(); }));
}

void Tape::clear() {
  nodes_.clear();
  grads_.clear();
  has_grad_.clear();
  visits_ = 0;
}

double attr(const Attrs& attrs, std::string_view key, double fallback) {
  auto it = attrs.find(key);
  return it == attrs.end() ? fallback : it->second;
}

std::size_t attr_size(const Attrs& attrs, std::string_view key, std::size_t fallback) {
  const double v = attr(attrs, key, static_cast<double>(fallback));
  if (v < 0 || v != std::floor(v)) throw std::invalid_argument("attribute '" + std::string(key) + "' must be a non-negative integer");
  return static_cast<std::size_t>(v);
}

void OpRegistry::add(OpRule rule) {
  std::string name = rule.name;
  rules_.insert_or_assign(std::move(name), std::move(rule));
}

bool OpRegistry::contains(std::string_view name) const { return rules_.find(name) != rules_.end(); }

const OpRule& OpRegistry::at(std::string_view name) const {
  auto it = rules_.find(name);
  if (it == rules_.end()) throw UnknownOpError("op '" + std::string(name) + "' has no registered gradient rule");
  return it->second;
}

std::vector<std::string> OpRegistry::names() const {
  std::vector<std::string> out;
  for (const auto& [name, rule] : rules_) out.push_back(name);
  return out;
}

Var OpRegistry::forward(Tape& tape, std::string_view op, std::span<const Var> inputs, const Attrs& attrs) const {
  const OpRule& rule = at(op);
  if (inputs.size() != rule.input_names.size()) {
    throw ShapeError("op '" + rule.name + "' expects " + std::to_string(rule.input_names.size()) + " inputs, got " +
                     std::to_string(inputs.size()));
  }
  return rule.apply(tape, inputs, attrs);
}

namespace ad {

Var add(Var a, Var b) {
  Tensor out = involution::add(a.value(), b.value());
  return a.tape().record("add", {a, b}, std::move(out),
                         [](const Tensor& g, std::span<const bool>) { return std::vector<Tensor>{g, g}; });
}

Var sub(Var a, Var b) {
  Tensor out = involution::sub(a.value(), b.value());
  return a.tape().record("sub", {a, b}, std::move(out), [](const Tensor& g, std::span<const bool>) {
    return std::vector<Tensor>{g, involution::scale(g, -1.0)};
  });
}

Var mul(Var a, Var b) {
  Tensor av = a.value(), bv = b.value();
  Tensor out = involution::mul(av, bv);
  return a.tape().record("mul", {a, b}, std::move(out), [av, bv](const Tensor& g, std::span<const bool>) {
    return std::vector<Tensor>{involution::mul(g, bv), involution::mul(g, av)};
  });
}

Var scale(Var a, double s) {
  return a.tape().record("scale", {a}, involution::scale(a.value(), s), [s](const Tensor& g, std::span<const bool>) {
    return std::vector<Tensor>{involution::scale(g, s)};
  });
}

Var matmul(Var a, Var b) {
  Tensor av = a.value(), bv = b.value();
  Tensor out = involution::matmul(av, bv);
  return a.tape().record("matmul", {a, b}, std::move(out), [av, bv](const Tensor& g, std::span<const bool> needed) {
    std::vector<Tensor> grads(2);
    if (needed[0]) grads[0] = involution::matmul(g, transpose(bv));
    if (needed[1]) grads[1] = involution::matmul(transpose(av), g);
    return grads;
  });
}

Var relu(Var x) {
  Tensor xv = x.value();
  Tensor out = ew_map(xv, [](double v) { return v > 0.0 ? v : 0.0; });
  return x.tape().record("relu", {x}, std::move(out), [xv](const Tensor& g, std::span<const bool>) {
    // Subgradient 0 at exactly 0.
    return std::vector<Tensor>{ew_zip(g, xv, [](double gv, double v) { return v > 0.0 ? gv : 0.0; })};
  });
}

Var sum(Var x) {
  Shape shape = x.shape();
  return x.tape().record("sum", {x}, Tensor::scalar(involution::sum(x.value())),
                         [shape](const Tensor& g, std::span<const bool>) {
                           return std::vector<Tensor>{Tensor::full(shape, g.item())};
                         });
}

Var reshape(Var x, Shape shape) {
  Shape original = x.shape();
  return x.tape().record("reshape", {x}, involution::reshape(x.value(), std::move(shape)),
                         [original](const Tensor& g, std::span<const bool>) {
                           return std::vector<Tensor>{involution::reshape(g, original)};
                         });
}

namespace {

OpRegistry make_core_registry() {
  OpRegistry reg;
  reg.add({"add", {"a", "b"}, [](Tape&, std::span<const Var> in, const Attrs&) { return add(in[0], in[1]); }});
  reg.add({"sub", {"a", "b"}, [](Tape&, std::span<const Var> in, const Attrs&) { return sub(in[0], in[1]); }});
  reg.add({"mul", {"a", "b"}, [](Tape&, std::span<const Var> in, const Attrs&) { return mul(in[0], in[1]); }});
  reg.add({"matmul", {"a", "b"}, [](Tape&, std::span<const Var> in, const Attrs&) { return matmul(in[0], in[1]); }});
  reg.add({"relu", {"x"}, [](Tape&, std::span<const Var> in, const Attrs&) { return relu(in[0]); }});
  reg.add({"sum", {"x"}, [](Tape&, std::span<const Var> in, const Attrs&) { return sum(in[0]); }});
  return reg;
}

}  // namespace

const OpRegistry& core_registry() {
  static const OpRegistry reg = make_core_registry();
  return reg;
}

}  // namespace ad

}  // namespace involution
