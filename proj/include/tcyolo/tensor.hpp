#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "tcyolo/error.hpp"

namespace tcyolo {

using Index = std::int64_t;
using Real = double;

/// Extents of a dense tensor. 4-D data uses (batch, channel, height, width).
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<Index> extents) : extents_(extents) { validate(); }
  explicit Shape(std::vector<Index> extents) : extents_(std::move(extents)) { validate(); }

  std::size_t rank() const { return extents_.size(); }
  Index operator[](std::size_t axis) const { return extents_.at(axis); }
  const std::vector<Index>& extents() const { return extents_; }

  Index numel() const {
    Index n = 1;
    for (Index e : extents_) n *= e;
    return n;
  }

  std::string str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < extents_.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(extents_[i]);
    }
    return s + "]";
  }

  friend bool operator==(const Shape&, const Shape&) = default;

 private:
  void validate() const {
    for (Index e : extents_)
      if (e < 1) throw DimensionError("non-positive extent in shape " + str());
  }

  std::vector<Index> extents_;
};

/// Dense row-major tensor over `Scalar`. Values live in a flat Eigen array so
/// elementwise math stays expression-friendly.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<Matrix>;
  using ConstMatrixMap = Eigen::Map<const Matrix>;

  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), values_(Array::Constant(shape_.numel(), fill)) {}
  Tensor(Shape shape, Array values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.size() != shape_.numel())
      throw DimensionError("tensor of shape " + shape_.str() + " given " +
                           std::to_string(values_.size()) + " values");
  }
  Tensor(Shape shape, const std::vector<Scalar>& values)
      : Tensor(std::move(shape), Array(Eigen::Map<const Array>(values.data(), Index(values.size())))) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor scalar(Scalar v) { return Tensor(Shape{1}, v); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.rank(); }
  Index dim(std::size_t axis) const { return shape_[axis]; }
  Index size() const { return values_.size(); }
  bool empty() const { return values_.size() == 0; }

  Array& values() { return values_; }
  const Array& values() const { return values_; }
  Scalar* data() { return values_.data(); }
  const Scalar* data() const { return values_.data(); }

  Scalar& operator[](Index i) { return values_[i]; }
  Scalar operator[](Index i) const { return values_[i]; }

  Scalar& at(Index n, Index c, Index h, Index w) {
    return values_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  Scalar at(Index n, Index c, Index h, Index w) const {
    return values_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  /// Same values under a new shape with equal element count.
  Tensor reshaped(Shape shape) const {
    if (shape.numel() != size())
      throw DimensionError("cannot reshape " + shape_.str() + " to " + shape.str());
    return Tensor(std::move(shape), values_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, values_.template cast<Other>().eval());
  }

  bool all_finite() const { return values_.isFinite().all(); }

 private:
  Shape shape_;
  Array values_;
};

/// Throws a DimensionError unless `t` is 4-D.
template <typename Scalar>
void require_nchw(const Tensor<Scalar>& t, const char* what) {
  if (t.rank() != 4)
    throw DimensionError(std::string(what) + ": expected NCHW tensor, got " + t.shape().str());
}

}  // namespace tcyolo
