#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace involution {

using Shape = std::vector<std::size_t>;

/// Raised for any rank, extent or divisibility violation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major tensor of doubles. Feature maps use (B, C, H, W).
///
/// The element count always equals the product of the shape; every
/// constructor validates this and rejects zero extents.
class Tensor {
 public:
  /// Scalar zero with shape {1}.
  Tensor();
  Tensor(Shape shape, std::vector<double> data);

  static Tensor full(Shape shape, double value);
  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
  static Tensor scalar(double value) { return full({1}, value); }
  static Tensor from(Shape shape, std::initializer_list<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const noexcept { return data_.size(); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  /// Bounds-checked multi-index access.
  double at(std::initializer_list<std::size_t> index) const;
  double& at(std::initializer_list<std::size_t> index);

  /// Value of a single-element tensor.
  double item() const;

  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t offset(std::initializer_list<std::size_t> index) const;

  Shape shape_;
  std::vector<double> data_;
};

/// Zero padding of `pad` on every spatial side of a (B, C, H, W) tensor.
Tensor pad_zero(const Tensor& x, std::size_t pad);

/// Plain (m, k) x (k, n) product.
Tensor matmul(const Tensor& a, const Tensor& b);
/// Transpose of a rank-2 tensor.
Tensor transpose(const Tensor& a);

template <class F>
Tensor ew_map(const Tensor& x, F&& f) {
  Tensor out = x;
  for (double& v : out.data()) v = f(v);
  return out;
}

template <class F>
Tensor ew_zip(const Tensor& x, const Tensor& y, F&& f) {
  if (!x.same_shape(y)) {
    throw ShapeError("ew_zip: shape mismatch " + shape_to_string(x.shape()) + " vs " +
                     shape_to_string(y.shape()));
  }
  Tensor out = x;
  auto o = out.data();
  auto b = y.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(o[i], b[i]);
  return out;
}

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
/// In-place a += b.
void add_inplace(Tensor& a, const Tensor& b);

/// Multiplies `a` by `b`, where `b` has the shape of `a` with extent 1 at
/// `axis`; `b` is broadcast along that axis. This is the only broadcasting
/// the library supports.
Tensor mul_broadcast(const Tensor& a, const Tensor& b, std::size_t axis);

/// Sums over `axes`; the reduced axes are removed. Reducing every axis
/// yields shape {1}.
Tensor reduce_sum(const Tensor& x, std::span<const std::size_t> axes);
Tensor reduce_sum(const Tensor& x, std::initializer_list<std::size_t> axes);
double sum(const Tensor& x);

Tensor permute(const Tensor& x, std::span<const std::size_t> order);
Tensor permute(const Tensor& x, std::initializer_list<std::size_t> order);
Tensor reshape(const Tensor& x, Shape shape);

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace involution
