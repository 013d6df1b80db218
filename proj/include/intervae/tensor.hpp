#pragma once

#include <Eigen/Dense>

#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "intervae/common.hpp"
#include "intervae/rng.hpp"

namespace intervae {

// Dense n-d array over a flat row-major buffer. Rank is small (<= 4 in this
// codebase); matrix views over the trailing two axes map onto Eigen for the
// actual math.
template <typename Scalar>
struct Tensor {
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using MatrixMap = Eigen::Map<MatrixX<Scalar>>;
  using ConstMatrixMap = Eigen::Map<const MatrixX<Scalar>>;

  std::vector<Index> shape;
  Storage data;

  Tensor() = default;
  explicit Tensor(std::vector<Index> s) : shape(std::move(s)) {
    data = Storage::Zero(count(shape));
  }
  Tensor(std::vector<Index> s, Scalar fill) : shape(std::move(s)) {
    data = Storage::Constant(count(shape), fill);
  }

  static Index count(const std::vector<Index>& s) {
    Index n = 1;
    for (Index d : s) n *= d;
    return n;
  }

  static Tensor zeros(std::vector<Index> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<Index> s, Scalar v) { return Tensor(std::move(s), v); }

  static Tensor from_matrix(const MatrixX<Scalar>& m) {
    Tensor t({m.rows(), m.cols()});
    ConstMatrixMap src(m.data(), m.rows(), m.cols());
    t.matrix(m.rows(), m.cols()) = m;
    return t;
  }

  static Tensor from_vector(const VectorX<Scalar>& v) {
    Tensor t({v.size()});
    t.data = v.array();
    return t;
  }

  static Tensor scalar(Scalar v) { return Tensor({Index(1)}, v); }

  static Tensor uniform(std::vector<Index> s, Scalar lo, Scalar hi, Rng& rng) {
    Tensor t(std::move(s));
    for (Index i = 0; i < t.size(); ++i)
      t.data[i] = static_cast<Scalar>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
    return t;
  }

  static Tensor gaussian(std::vector<Index> s, Scalar mean, Scalar stddev, Rng& rng) {
    Tensor t(std::move(s));
    for (Index i = 0; i < t.size(); ++i)
      t.data[i] = static_cast<Scalar>(rng.normal(static_cast<double>(mean), static_cast<double>(stddev)));
    return t;
  }

  Index size() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  Index dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  Index last_dim() const { return shape.back(); }

  // Product of all axes except the last; the "row count" when the tensor is
  // treated as a stack of last-axis vectors.
  Index rows_flat() const { return size() / last_dim(); }

  Scalar& at(Index i) { return data[i]; }
  Scalar at(Index i) const { return data[i]; }

  Scalar& at2(Index i, Index j) { return data[i * shape[1] + j]; }
  Scalar at2(Index i, Index j) const { return data[i * shape[1] + j]; }

  Scalar& at3(Index i, Index j, Index k) { return data[(i * shape[1] + j) * shape[2] + k]; }
  Scalar at3(Index i, Index j, Index k) const { return data[(i * shape[1] + j) * shape[2] + k]; }

  MatrixMap matrix(Index r, Index c) { return MatrixMap(data.data(), r, c); }
  ConstMatrixMap matrix(Index r, Index c) const { return ConstMatrixMap(data.data(), r, c); }

  // View as [rows_flat, last_dim]; the shape every "row-wise" op works over.
  MatrixMap rows_view() { return matrix(rows_flat(), last_dim()); }
  ConstMatrixMap rows_view() const { return matrix(rows_flat(), last_dim()); }

  // Slab b of a rank-3 tensor as a dim(1) x dim(2) matrix.
  MatrixMap slab(Index b) {
    return MatrixMap(data.data() + b * shape[1] * shape[2], shape[1], shape[2]);
  }
  ConstMatrixMap slab(Index b) const {
    return ConstMatrixMap(data.data() + b * shape[1] * shape[2], shape[1], shape[2]);
  }

  MatrixX<Scalar> to_matrix() const { return rows_view(); }
  VectorX<Scalar> to_vector() const { return data.matrix(); }
  Scalar value() const { return data[0]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  Tensor reshaped(std::vector<Index> s) const {
    check(count(s) == size(), "reshape: element count mismatch");
    Tensor t;
    t.shape = std::move(s);
    t.data = data;
    return t;
  }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> t;
    t.shape = shape;
    t.data = data.template cast<Other>();
    return t;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
  }
};

using Tensord = Tensor<double>;
using Tensorf = Tensor<float>;

}  // namespace intervae
