#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace villa {

// Error taxonomy shared by every module.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class NumericDomainError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// 64-byte aligned storage. Eigen's vectorized kernels choose their scalar
/// prologue from the buffer address, so results are only bitwise
/// reproducible when alignment depends on shapes alone.
template <class T, std::size_t Align = 64>
struct AlignedAllocator {
  using value_type = T;
  template <class U>
  struct rebind {
    using other = AlignedAllocator<U, Align>;
  };
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U, Align>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{Align})); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{Align}); }
  template <class U>
  bool operator==(const AlignedAllocator<U, Align>&) const noexcept {
    return true;
  }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

/// Dense row-major float64 n-dimensional array. Plain value type; the tape
/// stores these for node values and gradients.
class Array {
 public:
  Array() = default;

  explicit Array(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), values_(shape_size(shape_), fill) {
    check_dims();
  }

  Array(Shape shape, Storage values) : shape_(std::move(shape)), values_(std::move(values)) {
    check_dims();
    check_count();
  }

  Array(Shape shape, const std::vector<double>& values)
      : shape_(std::move(shape)), values_(values.begin(), values.end()) {
    check_dims();
    check_count();
  }

  static Array scalar(double v) { return Array(Shape{}, Storage{v}); }

  static Array zeros_like(const Array& other) { return Array(other.shape_, 0.0); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  std::span<double> data() { return values_; }
  std::span<const double> data() const { return values_; }
  Storage& values() { return values_; }
  const Storage& values() const { return values_; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  double item() const {
    if (values_.size() != 1) {
      throw ContractError("Array::item on array of shape " + shape_str(shape_));
    }
    return values_[0];
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

  Array& operator+=(const Array& other) {
    if (other.shape_ != shape_) {
      throw DimensionError("Array +=: " + shape_str(shape_) + " vs " + shape_str(other.shape_));
    }
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
    return *this;
  }

  Array& operator*=(double s) {
    for (double& v : values_) v *= s;
    return *this;
  }

  /// Bitwise equality of shape and every value.
  friend bool operator==(const Array& a, const Array& b) {
    if (a.shape_ != b.shape_) return false;
    return std::equal(a.values_.begin(), a.values_.end(), b.values_.begin(),
                      [](double x, double y) { return std::bit_cast<std::uint64_t>(x) == std::bit_cast<std::uint64_t>(y); });
  }

 private:
  void check_count() const {
    if (values_.size() != shape_size(shape_)) {
      throw DimensionError("Array: " + std::to_string(values_.size()) + " values for shape " + shape_str(shape_));
    }
  }

  void check_dims() const {
    for (std::size_t d : shape_) {
      if (d == 0) throw DimensionError("Array: zero-sized dimension in " + shape_str(shape_));
    }
  }

  Shape shape_;
  Storage values_;
};

/// Frobenius norm over the whole array.
inline double frobenius_norm(const Array& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

/// Frobenius norm of each leading-axis slice.
inline std::vector<double> frobenius_norm_per_sample(const Array& t) {
  if (t.rank() == 0) return {std::abs(t.item())};
  const std::size_t n = t.dim(0);
  const std::size_t stride = t.size() / n;
  std::vector<double> out(n, 0.0);
  for (std::size_t b = 0; b < n; ++b) {
    double s = 0.0;
    for (std::size_t i = 0; i < stride; ++i) {
      const double v = t[b * stride + i];
      s += v * v;
    }
    out[b] = std::sqrt(s);
  }
  return out;
}

inline double max_abs_diff(const Array& a, const Array& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace villa
