#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "involution/tensor.hpp"

namespace involution {

/// Trainable tensor with its accumulated gradient.
struct Parameter {
  Parameter() = default;
  Parameter(std::string name, Tensor value);

  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad();
  std::size_t numel() const noexcept { return value.numel(); }
};

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; only valid while
/// the tape is alive and not cleared.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const;
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Maps the output gradient to one gradient per input. `needed[i]` is false
/// when input i does not lead to any trainable leaf; rules may return an
/// arbitrary placeholder for such inputs.
using BackwardFn =
    std::function<std::vector<Tensor>(const Tensor& grad_out, std::span<const bool> needed)>;

struct TapeNode {
  std::string op;
  std::vector<std::size_t> inputs;
  Tensor value;
  BackwardFn backward;
  Parameter* param = nullptr;
  bool requires_grad = false;

  bool is_leaf() const noexcept { return !backward; }
};

/// Reverse-mode record. Nodes are appended in evaluation order, so every
/// node's inputs precede it and a single reverse sweep is a valid
/// topological traversal.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf holding data. Gradients are tracked only when `requires_grad`.
  Var input(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return input(std::move(value), false); }
  /// Leaf bound to a parameter; backward accumulates into `p.grad`.
  Var param(Parameter& p);

  Var record(std::string op, std::vector<Var> inputs, Tensor value, BackwardFn backward);

  /// Propagates d(loss)/d(node) for every node. Throws ShapeError when the
  /// loss is not a single element.
  void backward(Var loss);

  const Tensor& value(Var v) const { return nodes_.at(v.id()).value; }
  /// Gradient from the last backward(); zeros if the node was unreached.
  Tensor grad(Var v) const;

  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t op_count() const noexcept;
  const TapeNode& node(std::size_t i) const { return nodes_.at(i); }
  /// Nodes visited by the last backward().
  std::size_t backward_visits() const noexcept { return visits_; }

  void clear();

 private:
  std::vector<TapeNode> nodes_;
  std::vector<Tensor> grads_;
  std::vector<bool> has_grad_;
  std::size_t visits_ = 0;
};

/// Named op attributes (kernel size, stride, ...).
using Attrs = std::map<std::string, double, std::less<>>;

double attr(const Attrs& attrs, std::string_view key, double fallback);
std::size_t attr_size(const Attrs& attrs, std::string_view key, std::size_t fallback);

class UnknownOpError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

struct OpRule {
  std::string name;
  std::vector<std::string> input_names;
  std::function<Var(Tape&, std::span<const Var>, const Attrs&)> apply;
};

/// Registered differentiable ops, addressable by name.
class OpRegistry {
 public:
  void add(OpRule rule);
  bool contains(std::string_view name) const;
  const OpRule& at(std::string_view name) const;
  std::vector<std::string> names() const;

  /// Applies a registered op and records it. Throws UnknownOpError for an
  /// unregistered name and ShapeError on arity mismatch.
  Var forward(Tape& tape, std::string_view op, std::span<const Var> inputs, const Attrs& attrs = {}) const;

 private:
  std::map<std::string, OpRule, std::less<>> rules_;
};

namespace ad {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var matmul(Var a, Var b);
Var relu(Var x);
/// Sum of all elements, shape {1}.
Var sum(Var x);
Var reshape(Var x, Shape shape);

/// add, sub, mul, matmul, relu, sum.
const OpRegistry& core_registry();

}  // namespace ad

}  // namespace involution
