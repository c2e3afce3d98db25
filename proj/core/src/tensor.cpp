#include "involution/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace involution {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("invalid shape " + shape_to_string(shape) + ": zero extent");
  }
}

}  // namespace

Tensor::Tensor() : shape_{1}, data_(1, 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  validate_shape(shape_);
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_to_string(shape_));
  }
}

Tensor Tensor::full(Shape shape, double value) {
  validate_shape(shape);
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values) {
  return Tensor(std::move(shape), std::vector<double>(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_to_string(shape_));
  }
  return shape_[axis];
}

std::size_t Tensor::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) throw ShapeError("index rank does not match tensor rank");
  std::size_t off = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= shape_[axis]) throw std::out_of_range("tensor index out of range");
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

double Tensor::at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }
double& Tensor::at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_to_string(shape_));
  return data_[0];
}

Tensor pad_zero(const Tensor& x, std::size_t pad) {
  if (x.rank() != 4) throw ShapeError("pad_zero expects (B, C, H, W), got " + shape_to_string(x.shape()));
  if (pad == 0) return x;
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t h = x.dim(2), w = x.dim(3);
  const std::size_t hp = h + 2 * pad, wp = w + 2 * pad;
  Tensor out = Tensor::zeros({x.dim(0), x.dim(1), hp, wp});
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < h; ++i) {
      std::copy_n(src.begin() + (p * h + i) * w, w, dst.begin() + (p * hp + i + pad) * wp + pad);
    }
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul expects rank-2 operands");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul inner dimension mismatch " + shape_to_string(a.shape()) + " x " +
                     shape_to_string(b.shape()));
  }
  Tensor out = Tensor::zeros({m, n});
  auto A = a.data();
  auto B = b.data();
  auto C = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = C.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects a rank-2 tensor");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return ew_zip(a, b, std::plus<>{}); }
Tensor sub(const Tensor& a, const Tensor& b) { return ew_zip(a, b, std::minus<>{}); }
Tensor mul(const Tensor& a, const Tensor& b) { return ew_zip(a, b, std::multiplies<>{}); }
Tensor scale(const Tensor& a, double s) {
  return ew_map(a, [s](double v) { return v * s; });
}

void add_inplace(Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("add_inplace: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
  auto d = a.data();
  auto s = b.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

Tensor mul_broadcast(const Tensor& a, const Tensor& b, std::size_t axis) {
  if (axis >= a.rank() || b.rank() != a.rank()) throw ShapeError("mul_broadcast: rank mismatch");
  for (std::size_t d = 0; d < a.rank(); ++d) {
    const std::size_t expect = d == axis ? 1 : a.dim(d);
    if (b.dim(d) != expect) {
      throw ShapeError("mul_broadcast: " + shape_to_string(b.shape()) + " cannot broadcast to " +
                       shape_to_string(a.shape()) + " along axis " + std::to_string(axis));
    }
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= a.dim(d);
  for (std::size_t d = axis + 1; d < a.rank(); ++d) inner *= a.dim(d);
  const std::size_t n = a.dim(axis);
  Tensor out = a;
  auto o = out.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < outer; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < inner; ++k) o[(i * n + j) * inner + k] *= bv[i * inner + k];
  return out;
}

Tensor reduce_sum(const Tensor& x, std::span<const std::size_t> axes) {
  std::vector<bool> reduced(x.rank(), false);
  for (std::size_t a : axes) {
    if (a >= x.rank()) throw ShapeError("reduce_sum: axis out of range");
    if (reduced[a]) throw ShapeError("reduce_sum: repeated axis");
    reduced[a] = true;
  }
  Shape out_shape;
  for (std::size_t d = 0; d < x.rank(); ++d)
    if (!reduced[d]) out_shape.push_back(x.dim(d));
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out = Tensor::zeros(out_shape);

  // Strides of the output indexed by input axes (0 on reduced axes).
  std::vector<std::size_t> ostride(x.rank(), 0);
  std::size_t s = 1;
  for (std::size_t d = x.rank(); d-- > 0;) {
    if (!reduced[d]) {
      ostride[d] = s;
      s *= x.dim(d);
    }
  }
  std::vector<std::size_t> idx(x.rank(), 0);
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    std::size_t o = 0;
    for (std::size_t d = 0; d < x.rank(); ++d) o += idx[d] * ostride[d];
    dst[o] += src[i];
    for (std::size_t d = x.rank(); d-- > 0;) {
      if (++idx[d] < x.dim(d)) break;
      idx[d] = 0;
    }
  }
  return out;
}

Tensor reduce_sum(const Tensor& x, std::initializer_list<std::size_t> axes) {
  return reduce_sum(x, std::span<const std::size_t>(axes.begin(), axes.size()));
}

double sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return acc;
}

Tensor permute(const Tensor& x, std::span<const std::size_t> order) {
  const std::size_t r = x.rank();
  if (order.size() != r) throw ShapeError("permute: order length does not match rank");
  std::vector<bool> seen(r, false);
  for (std::size_t a : order) {
    if (a >= r || seen[a]) throw ShapeError("permute: order is not a permutation");
    seen[a] = true;
  }
  Shape out_shape(r);
  for (std::size_t d = 0; d < r; ++d) out_shape[d] = x.dim(order[d]);
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t d = r - 1; d-- > 0;) in_stride[d] = in_stride[d + 1] * x.dim(d + 1);

  Tensor out = Tensor::zeros(out_shape);
  std::vector<std::size_t> idx(r, 0);
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < r; ++d) off += idx[d] * in_stride[order[d]];
    dst[i] = src[off];
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  return out;
}

Tensor permute(const Tensor& x, std::initializer_list<std::size_t> order) {
  return permute(x, std::span<const std::size_t>(order.begin(), order.size()));
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_to_string(x.shape()) + " as " + shape_to_string(shape));
  }
  std::vector<double> data(x.data().begin(), x.data().end());
  return Tensor(std::move(shape), std::move(data));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("max_abs_diff: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = std::abs(a[i] - b[i]);
    if (std::isnan(d)) return d;
    m = std::max(m, d);
  }
  return m;
}

}  // namespace involution
