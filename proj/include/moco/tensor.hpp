#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "moco/error.hpp"

namespace moco {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;

template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1},
                         std::multiplies<Index>());
}

std::string to_string(const Shape& shape);

// Dense row-major array with an optional gradient buffer. Scalars are
// represented with shape {1}.
template <typename Scalar>
struct Tensor {
  Shape shape;
  Vector<Scalar> data;
  std::optional<Vector<Scalar>> grad;
  bool requires_grad = false;

  Tensor() = default;

  explicit Tensor(Shape s) : shape(std::move(s)) {
    for (Index e : shape) {
      if (e <= 0) {
        throw DimensionError("tensor extents must be positive, got " +
                             to_string(shape));
      }
    }
    data = Vector<Scalar>::Zero(moco::numel(shape));
  }

  Tensor(Shape s, std::initializer_list<Scalar> values) : Tensor(std::move(s)) {
    if (static_cast<Index>(values.size()) != data.size()) {
      throw DimensionError("initializer has " + std::to_string(values.size()) +
                           " values for shape " + to_string(shape));
    }
    std::copy(values.begin(), values.end(), data.data());
  }

  Tensor(Shape s, Vector<Scalar> values) : shape(std::move(s)), data(std::move(values)) {
    if (moco::numel(shape) != data.size()) {
      throw DimensionError("data length " + std::to_string(data.size()) +
                           " does not match shape " + to_string(shape));
    }
  }

  static Tensor scalar(Scalar v) { return Tensor({1}, {v}); }

  Index numel() const { return data.size(); }
  Index rank() const { return static_cast<Index>(shape.size()); }
  Index dim(Index i) const { return shape.at(static_cast<std::size_t>(i)); }
  Scalar item() const { return data(0); }

  // View as shape[0] x (numel / shape[0]).
  MatrixMap<Scalar> matrix() {
    return MatrixMap<Scalar>(data.data(), shape.front(), numel() / shape.front());
  }
  ConstMatrixMap<Scalar> matrix() const {
    return ConstMatrixMap<Scalar>(data.data(), shape.front(),
                                  numel() / shape.front());
  }

  void zero_grad() { grad = Vector<Scalar>::Zero(data.size()); }

  bool all_finite() const { return data.allFinite(); }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out;
    out.shape = shape;
    out.data = data.template cast<Other>();
    out.requires_grad = requires_grad;
    return out;
  }
};

}  // namespace moco
