#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>

#include "dyns/common.hpp"

namespace dyns {

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
class Tape;

namespace detail {
struct Unchecked {};
}  // namespace detail

/// Dense row-major array of rank >= 0 with optional participation in a Tape.
///
/// Tensors are immutable values: ops return new tensors, and copies share the
/// underlying buffer. A tensor that was produced on a tape carries a handle to
/// its node; the tape must outlive every tensor recorded on it.
template <typename Scalar>
class BasicTensor {
 public:
  using Vector = Vec<Scalar>;
  using Matrix = RowMat<Scalar>;
  using MatrixMap = Eigen::Map<const Matrix>;

  /// Rank-0 zero.
  BasicTensor();
  /// Validates extents (all positive), element count, and finiteness.
  BasicTensor(Shape shape, Vector data);
  BasicTensor(Shape shape, Vector data, detail::Unchecked);

  static BasicTensor zeros(Shape shape);
  static BasicTensor ones(Shape shape);
  static BasicTensor full(Shape shape, Scalar value);
  static BasicTensor scalar(Scalar value);
  static BasicTensor from(Shape shape, std::initializer_list<Scalar> values);
  static BasicTensor from(Shape shape, std::span<const Scalar> values);

  /// Rank-2 copy of any Eigen matrix expression.
  template <typename Derived>
  static BasicTensor from_matrix(const Eigen::MatrixBase<Derived>& m) {
    Matrix tmp = m;
    Vector flat = Eigen::Map<const Vector>(tmp.data(), tmp.size());
    return BasicTensor({static_cast<Index>(tmp.rows()), static_cast<Index>(tmp.cols())}, std::move(flat));
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index numel() const { return data_->size(); }
  /// Extent of axis i; negative i counts from the back.
  Index dim(Index i) const;

  const Vector& data() const { return *data_; }
  /// Copy-on-write access. The returned tensor is no longer a tape node.
  Vector& mutable_data();

  /// View as (numel / last extent) x (last extent); rank-0 views as 1x1.
  MatrixMap matrix() const;
  Scalar item() const;
  Scalar at(std::initializer_list<Index> index) const;

  bool requires_grad() const { return node_ >= 0; }
  std::int32_t node() const { return node_; }
  Tape<Scalar>* tape() const { return tape_; }
  /// Same values, detached from any tape.
  BasicTensor detach() const;

  bool all_finite() const;

 private:
  friend class Tape<Scalar>;

  Shape shape_;
  std::shared_ptr<Vector> data_;
  Tape<Scalar>* tape_ = nullptr;
  std::int32_t node_ = -1;
};

using Tensor = BasicTensor<Real>;

/// Throws NumericalError naming `what` if any entry is NaN or infinite.
template <typename Scalar>
void require_finite(const BasicTensor<Scalar>& t, const char* what);

extern template class BasicTensor<double>;
extern template class BasicTensor<float>;

}  // namespace dyns
