#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "grl/errors.hpp"

namespace grl {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "tensors hold float or double");
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// Test hook: while armed on the current thread, records the largest tensor
// buffer (in elements) that was allocated.
class AllocationProbe {
 public:
  AllocationProbe();
  ~AllocationProbe();
  AllocationProbe(const AllocationProbe&) = delete;
  AllocationProbe& operator=(const AllocationProbe&) = delete;

  std::size_t peak_elements() const { return peak_; }
  std::size_t allocations() const { return count_; }

  static void note(std::size_t elements);

 private:
  AllocationProbe* previous_;
  std::size_t peak_ = 0;
  std::size_t count_ = 0;
};

}  // namespace detail

// Dense row-major array of float or double. Extents are strictly positive;
// a rank-0 tensor is a scalar holding one value.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    validate_extents();
    detail::AllocationProbe::note(numel_of(shape_));
    data_.assign(numel_of(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_extents();
    if (numel_of(shape_) != data_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
    detail::AllocationProbe::note(data_.size());
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, T value) { return Tensor(std::move(shape), value); }

  static Tensor scalar(T value) { return Tensor(Shape{}, value); }

  template <typename Rng>
  static Tensor randn(Shape shape, Rng& rng, T stddev = T{1}) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : t.data_) v = static_cast<T>(dist(rng)) * stddev;
    return t;
  }

  template <typename Rng>
  static Tensor uniform(Shape shape, Rng& rng, T lo, T hi) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : t.data_) v = static_cast<T>(dist(rng));
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  DType dtype() const { return dtype_of<T>(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  template <typename... Idx>
  T& at(Idx... idx) {
    return data_[offset(idx...)];
  }
  template <typename... Idx>
  const T& at(Idx... idx) const {
    return data_[offset(idx...)];
  }

  T item() const {
    if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const& {
    Tensor out = *this;
    out.reshape(std::move(shape));
    return out;
  }
  Tensor reshaped(Shape shape) && {
    reshape(std::move(shape));
    return std::move(*this);
  }

  void reshape(Shape shape) {
    if (numel_of(shape) != data_.size()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    shape_ = std::move(shape);
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  // Bitwise equality of shape and values.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_extents() const {
    for (std::size_t e : shape_) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape_));
    }
  }

  template <typename... Idx>
  std::size_t offset(Idx... idx) const {
    const std::size_t ids[] = {static_cast<std::size_t>(idx)...};
    std::size_t off = 0;
    for (std::size_t i = 0; i < sizeof...(Idx); ++i) off = off * shape_[i] + ids[i];
    return off;
  }

  Shape shape_;
  std::vector<T> data_;
};

// Largest |a - b| over all elements; shapes must match.
template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

}  // namespace grl
