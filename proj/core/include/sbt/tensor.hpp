#pragma once

#include <algorithm>
#include <array>
#include <cassert>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sbt/error.hpp"

namespace sbt {

/// Extents of a tensor of rank 0..3 (batch x time x feature at most).
class Shape {
 public:
  static constexpr std::size_t kMaxRank = 3;

  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims) {
    if (dims.size() > kMaxRank) throw ShapeError("tensor rank > 3 is not supported");
    for (std::size_t d : dims) dims_[rank_++] = d;
  }

  std::size_t rank() const noexcept { return rank_; }
  std::size_t operator[](std::size_t i) const noexcept { return dims_[i]; }
  std::size_t back() const noexcept { return rank_ == 0 ? 1 : dims_[rank_ - 1]; }

  std::size_t elements() const noexcept {
    std::size_t n = 1;
    for (std::size_t i = 0; i < rank_; ++i) n *= dims_[i];
    return n;
  }

  std::string str() const {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < rank_; ++i) os << (i ? "," : "") << dims_[i];
    os << ')';
    return os.str();
  }

  friend bool operator==(const Shape& a, const Shape& b) noexcept {
    if (a.rank_ != b.rank_) return false;
    for (std::size_t i = 0; i < a.rank_; ++i)
      if (a.dims_[i] != b.dims_[i]) return false;
    return true;
  }

 private:
  std::array<std::size_t, kMaxRank> dims_{};
  std::size_t rank_ = 0;
};

/// Row-major dense array with value semantics. Training uses double,
/// frozen inference uses float.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T{0}) : shape_(shape), values_(shape.elements(), fill) {}
  BasicTensor(Shape shape, std::vector<T> values) : shape_(shape), values_(std::move(values)) {
    if (values_.size() != shape_.elements())
      throw ShapeError("value count " + std::to_string(values_.size()) + " does not match shape " +
                       shape_.str());
  }

  static BasicTensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> v;
    v.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix literal");
      v.insert(v.end(), row.begin(), row.end());
    }
    return BasicTensor(Shape{r, c}, std::move(v));
  }

  static BasicTensor vector(std::initializer_list<T> values) {
    return BasicTensor(Shape{values.size()}, std::vector<T>(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.rank(); }
  std::size_t dim(std::size_t i) const noexcept { return shape_[i]; }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  T* data() noexcept { return values_.data(); }
  const T* data() const noexcept { return values_.data(); }
  std::span<T> values() noexcept { return values_; }
  std::span<const T> values() const noexcept { return values_; }
  std::vector<T>& storage() noexcept { return values_; }
  const std::vector<T>& storage() const noexcept { return values_; }

  T& operator[](std::size_t i) noexcept { return values_[i]; }
  const T& operator[](std::size_t i) const noexcept { return values_[i]; }
  T& operator()(std::size_t i, std::size_t j) noexcept { return values_[i * shape_[1] + j]; }
  const T& operator()(std::size_t i, std::size_t j) const noexcept { return values_[i * shape_[1] + j]; }
  T& operator()(std::size_t i, std::size_t j, std::size_t k) noexcept {
    return values_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const T& operator()(std::size_t i, std::size_t j, std::size_t k) const noexcept {
    return values_[(i * shape_[1] + j) * shape_[2] + k];
  }

  /// Same values viewed under a different shape with equal element count.
  BasicTensor reshaped(Shape shape) const {
    if (shape.elements() != size())
      throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
    return BasicTensor(shape, values_);
  }

  void fill(T v) { std::fill(values_.begin(), values_.end(), v); }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(values_.size());
    std::transform(values_.begin(), values_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return BasicTensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  Shape shape_;
  std::vector<T> values_;
};

using Tensor = BasicTensor<double>;
using TensorF = BasicTensor<float>;

}  // namespace sbt
