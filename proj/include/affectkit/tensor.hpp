#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "affectkit/errors.hpp"

namespace affectkit {

using Shape = std::vector<std::size_t>;

/// Storage aligned for Eigen packets, so vectorized kernels take the same
/// path (and round the same way) wherever the buffer lands in memory.
using AlignedBuffer = std::vector<double, Eigen::aligned_allocator<double>>;

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

/**
 * Dense row-major array of doubles. A rank-0 shape holds a single scalar.
 * Every extent must be positive.
 */
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), values_(checked_count(shape_), fill) {}

  Tensor(Shape shape, const std::vector<double>& values)
      : shape_(std::move(shape)), values_(values.begin(), values.end()) {
    if (checked_count(shape_) != values_.size()) {
      throw ShapeError("tensor of shape " + to_string(shape_) + " cannot hold " +
                       std::to_string(values_.size()) + " values");
    }
  }

  static Tensor scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  double* data() noexcept { return values_.data(); }
  const double* data() const noexcept { return values_.data(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  /// Value of a single-element tensor.
  double item() const {
    if (values_.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
    return values_[0];
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
    if (checked_count(shape) != values_.size()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    shape_ = std::move(shape);
  }

  void fill(double value) { std::fill(values_.begin(), values_.end(), value); }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  Tensor& operator+=(const Tensor& other) {
    if (other.shape_ != shape_) {
      throw ShapeError("cannot accumulate " + to_string(other.shape_) + " into " + to_string(shape_));
    }
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
    return *this;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

private:
  static std::size_t checked_count(const Shape& shape) {
    for (std::size_t extent : shape) {
      if (extent == 0) throw ShapeError("zero extent in shape " + to_string(shape));
    }
    return element_count(shape);
  }

  Shape shape_;
  AlignedBuffer values_;
};

}  // namespace affectkit
