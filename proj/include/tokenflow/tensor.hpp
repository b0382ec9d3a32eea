#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tokenflow {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

std::string shape_string(const Shape& shape);
Index shape_numel(const Shape& shape);

/// Dense row-major n-dimensional array. Storage is a flat Eigen vector; 2-D
/// views are exposed through Eigen maps so the math stays in Eigen.
template <typename Scalar>
class DenseTensor {
 public:
  using Storage = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  DenseTensor() = default;

  explicit DenseTensor(Shape shape) : shape_(std::move(shape)), data_(Storage::Zero(shape_numel(shape_))) {}

  DenseTensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size()) {
      throw std::invalid_argument("tensor: shape " + shape_string(shape_) + " does not match " +
                                  std::to_string(data_.size()) + " values");
    }
  }

  DenseTensor(Shape shape, std::initializer_list<Scalar> values)
      : DenseTensor(std::move(shape), Storage(Eigen::Map<const Storage>(values.begin(), Index(values.size())))) {}

  static DenseTensor zeros(Shape shape) { return DenseTensor(std::move(shape)); }

  /// Storage left uninitialized; for outputs that are fully overwritten.
  static DenseTensor uninitialized(Shape shape) {
    DenseTensor t;
    t.data_.resize(shape_numel(shape));
    t.shape_ = std::move(shape);
    return t;
  }

  static DenseTensor full(Shape shape, Scalar value) {
    DenseTensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  static DenseTensor scalar(Scalar value) { return DenseTensor(Shape{}, Storage::Constant(1, value)); }

  template <typename Derived>
  static DenseTensor from_matrix(const Eigen::MatrixBase<Derived>& m) {
    DenseTensor t(Shape{m.rows(), m.cols()});
    t.matrix() = m;
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return Index(shape_.size()); }
  Index numel() const { return data_.size(); }
  bool empty() const { return data_.size() == 0 && shape_.empty(); }
  Index dim(Index axis) const { return shape_.at(std::size_t(axis)); }

  /// Rows of the 2-D view: product of every dimension but the last.
  Index rows() const { return shape_.empty() ? 1 : numel() / cols(); }
  /// Columns of the 2-D view: the last dimension.
  Index cols() const { return shape_.empty() ? 1 : shape_.back(); }

  Storage& values() { return data_; }
  const Storage& values() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> span() { return {data_.data(), std::size_t(data_.size())}; }
  std::span<const Scalar> span() const { return {data_.data(), std::size_t(data_.size())}; }

  MatrixMap matrix() { return MatrixMap(data_.data(), rows(), cols()); }
  ConstMatrixMap matrix() const { return ConstMatrixMap(data_.data(), rows(), cols()); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }
  Scalar& operator()(Index r, Index c) { return data_[r * cols() + c]; }
  Scalar operator()(Index r, Index c) const { return data_[r * cols() + c]; }

  Scalar item() const {
    if (numel() != 1) throw std::invalid_argument("tensor: item() on " + shape_string(shape_));
    return data_[0];
  }

  DenseTensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw std::invalid_argument("reshape: " + shape_string(shape_) + " -> " + shape_string(shape));
    }
    return DenseTensor(std::move(shape), data_);
  }

  template <typename Other>
  DenseTensor<Other> cast() const {
    return DenseTensor<Other>(shape_, data_.template cast<Other>());
  }

  /// x * 0 is 0 for finite x and NaN otherwise, so the sum cannot overflow.
  bool all_finite() const { return (data_.array() * Scalar(0)).sum() == Scalar(0); }

  bool operator==(const DenseTensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

 private:
  Shape shape_;
  Storage data_;
};

using Tensor = DenseTensor<double>;
using TensorF = DenseTensor<float>;

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

inline Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension in " + shape_string(shape));
    n *= d;
  }
  return n;
}

}  // namespace tokenflow
