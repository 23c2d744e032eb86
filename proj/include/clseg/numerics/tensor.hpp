// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstring>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "clseg/errors.hpp"

namespace clseg {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major n-d array with an optional gradient buffer of the same shape.
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using Buffer = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_shape();
    values_ = Buffer::Zero(shape_size(shape_));
  }

  Tensor(Shape shape, Buffer values) : shape_(std::move(shape)), values_(std::move(values)) {
    check_shape();
    if (values_.size() != shape_size(shape_)) {
      throw ConfigError("tensor of shape " + shape_str(shape_) + " given " +
                        std::to_string(values_.size()) + " values");
    }
  }

  static Tensor constant(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    t.values_.setConstant(value);
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_.at(static_cast<std::size_t>(i)); }
  Index size() const { return values_.size(); }

  Buffer& values() { return values_; }
  const Buffer& values() const { return values_; }
  Scalar* data() { return values_.data(); }
  const Scalar* data() const { return values_.data(); }
  Scalar& operator[](Index i) { return values_[i]; }
  Scalar operator[](Index i) const { return values_[i]; }

  bool has_grad() const { return grad_.size() == values_.size() && values_.size() > 0; }
  Buffer& grad() {
    if (!has_grad()) grad_ = Buffer::Zero(values_.size());
    return grad_;
  }
  const Buffer& grad() const { return grad_; }
  void zero_grad() { grad_ = Buffer::Zero(values_.size()); }
  void drop_grad() { grad_.resize(0); }

  /// Same values, new shape with equal element count.
  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), values_); }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, values_.template cast<Other>());
  }

  bool all_finite() const { return values_.allFinite(); }

  /// Bitwise equality of shape and values (NaN payloads compare by bits).
  bool bit_equal(const Tensor& other) const {
    return shape_ == other.shape_ &&
           std::memcmp(values_.data(), other.values_.data(),
                       static_cast<std::size_t>(values_.size()) * sizeof(Scalar)) == 0;
  }

 private:
  void check_shape() const {
    for (Index d : shape_) {
      if (d <= 0) throw ConfigError("tensor shape must be positive, got " + shape_str(shape_));
    }
  }

  Shape shape_;
  Buffer values_;
  Buffer grad_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace clseg
