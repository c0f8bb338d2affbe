#include "dyns/tensor.hpp"

#include <string>

namespace dyns {

template <typename Scalar>
BasicTensor<Scalar>::BasicTensor() : shape_{}, data_(std::make_shared<Vector>(Vector::Zero(1))) {}

template <typename Scalar>
BasicTensor<Scalar>::BasicTensor(Shape shape, Vector data, detail::Unchecked)
    : shape_(std::move(shape)), data_(std::make_shared<Vector>(std::move(data))) {}

template <typename Scalar>
BasicTensor<Scalar>::BasicTensor(Shape shape, Vector data)
    : BasicTensor(std::move(shape), std::move(data), detail::Unchecked{}) {
  for (Index e : shape_)
    if (e <= 0) throw DimensionError("tensor extents must be positive, got " + shape_to_string(shape_));
  if (shape_numel(shape_) != data_->size())
    throw DimensionError("tensor shape " + shape_to_string(shape_) + " needs " +
                         std::to_string(shape_numel(shape_)) + " values, got " + std::to_string(data_->size()));
  require_finite(*this, "tensor creation");
}

template <typename Scalar>
BasicTensor<Scalar> BasicTensor<Scalar>::zeros(Shape shape) {
  return full(std::move(shape), Scalar(0));
}

template <typename Scalar>
BasicTensor<Scalar> BasicTensor<Scalar>::ones(Shape shape) {
  return full(std::move(shape), Scalar(1));
}

template <typename Scalar>
BasicTensor<Scalar> BasicTensor<Scalar>::full(Shape shape, Scalar value) {
  const Index n = shape_numel(shape);
  return BasicTensor(std::move(shape), Vector::Constant(n, value));
}

template <typename Scalar>
BasicTensor<Scalar> BasicTensor<Scalar>::scalar(Scalar value) {
  return BasicTensor(Shape{}, Vector::Constant(1, value));
}

template <typename Scalar>
BasicTensor<Scalar> BasicTensor<Scalar>::from(Shape shape, std::initializer_list<Scalar> values) {
  return from(std::move(shape), std::span<const Scalar>(values.begin(), values.size()));
}

template <typename Scalar>
BasicTensor<Scalar> BasicTensor<Scalar>::from(Shape shape, std::span<const Scalar> values) {
  Vector v(static_cast<Index>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i) v[static_cast<Index>(i)] = values[i];
  return BasicTensor(std::move(shape), std::move(v));
}

template <typename Scalar>
Index BasicTensor<Scalar>::dim(Index i) const {
  const Index r = rank();
  const Index k = i < 0 ? r + i : i;
  if (k < 0 || k >= r)
    throw DimensionError("axis " + std::to_string(i) + " out of range for shape " + shape_to_string(shape_));
  return shape_[static_cast<std::size_t>(k)];
}

template <typename Scalar>
typename BasicTensor<Scalar>::Vector& BasicTensor<Scalar>::mutable_data() {
  if (data_.use_count() > 1) data_ = std::make_shared<Vector>(*data_);
  tape_ = nullptr;
  node_ = -1;
  return *data_;
}

template <typename Scalar>
typename BasicTensor<Scalar>::MatrixMap BasicTensor<Scalar>::matrix() const {
  const Index cols = shape_.empty() ? 1 : shape_.back();
  return MatrixMap(data_->data(), numel() / cols, cols);
}

template <typename Scalar>
Scalar BasicTensor<Scalar>::item() const {
  if (numel() != 1) throw DimensionError("item() needs a single-element tensor, got " + shape_to_string(shape_));
  return (*data_)[0];
}

template <typename Scalar>
Scalar BasicTensor<Scalar>::at(std::initializer_list<Index> index) const {
  if (static_cast<Index>(index.size()) != rank())
    throw DimensionError("index rank mismatch for shape " + shape_to_string(shape_));
  Index flat = 0;
  std::size_t axis = 0;
  for (Index i : index) {
    if (i < 0 || i >= shape_[axis]) throw DimensionError("index out of range for shape " + shape_to_string(shape_));
    flat = flat * shape_[axis] + i;
    ++axis;
  }
  return (*data_)[flat];
}

template <typename Scalar>
BasicTensor<Scalar> BasicTensor<Scalar>::detach() const {
  BasicTensor out = *this;
  out.tape_ = nullptr;
  out.node_ = -1;
  return out;
}

template <typename Scalar>
bool BasicTensor<Scalar>::all_finite() const {
  return data_->allFinite();
}

template <typename Scalar>
void require_finite(const BasicTensor<Scalar>& t, const char* what) {
  if (!t.all_finite())
    throw NumericalError(std::string("non-finite value in ") + what + " (shape " + shape_to_string(t.shape()) + ")");
}

template class BasicTensor<double>;
template class BasicTensor<float>;
template void require_finite(const BasicTensor<double>&, const char*);
template void require_finite(const BasicTensor<float>&, const char*);

}  // namespace dyns
