#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace odenet {

/// Dimensions of a dense row-major array: (N, C, H, W), (N, D) or (D).
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims) : dims_(dims) {}
  explicit Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) {}

  std::size_t rank() const { return dims_.size(); }
  std::size_t operator[](std::size_t i) const { return dims_.at(i); }
  const std::vector<std::size_t>& dims() const { return dims_; }

  std::size_t numel() const {
    return std::accumulate(dims_.begin(), dims_.end(), std::size_t{1},
                           std::multiplies<>());
  }

  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "," : "") << dims_[i];
    os << ')';
    return os.str();
  }

 private:
  std::vector<std::size_t> dims_;
};

class ShapeError : public std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Dense array with shape metadata. Value type: copies are deep.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_.numel(), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_.numel())
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
  }

  const Shape& shape() const { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_[i]; }
  std::size_t rank() const { return shape_.rank(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape s) const {
    if (s.numel() != size())
      throw ShapeError("cannot reshape " + shape_.str() + " to " + s.str());
    return Tensor(std::move(s), data_);
  }

  /// Elements [n0, n1) along the leading dimension.
  Tensor slice_batch(std::size_t n0, std::size_t n1) const {
    std::vector<std::size_t> d = shape_.dims();
    const std::size_t inner = size() / d[0];
    d[0] = n1 - n0;
    return Tensor(Shape(d), std::vector<T>(data_.begin() + n0 * inner, data_.begin() + n1 * inner));
  }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
T l2_norm(const T* p, std::size_t n) {
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += p[i] * p[i];
  return std::sqrt(s);
}

template <typename T>
T l2_norm(const Tensor<T>& t) {
  return l2_norm(t.data(), t.size());
}

/// Mean over the leading (batch) dimension of per-example flattened L2 norms.
template <typename T>
double batch_mean_l2(const Tensor<T>& t) {
  const std::size_t n = t.dim(0);
  if (n == 0) return 0.0;
  const std::size_t inner = t.size() / n;
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(l2_norm(t.data() + i * inner, inner));
  return acc / static_cast<double>(n);
}

template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("subtract: " + a.shape().str() + " vs " + b.shape().str());
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

}  // namespace odenet
