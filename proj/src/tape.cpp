#include "dyns/tape.hpp"

#include <string>

namespace dyns {

template <typename Scalar>
typename Tape<Scalar>::Vector& Tape<Scalar>::Sink::buffer(std::size_t input) {
  const auto id = static_cast<std::size_t>(parents_[input]);
  Vector& g = grads_[id];
  if (g.size() == 0) g = Vector::Zero(shape_numel(tape_.nodes_[id].shape));
  return g;
}

template <typename Scalar>
BasicTensor<Scalar> Tape<Scalar>::watch(const BasicTensor<Scalar>& value) {
  BasicTensor<Scalar> out = value.detach();
  out.tape_ = this;
  out.node_ = static_cast<std::int32_t>(nodes_.size());
  nodes_.push_back(Node{value.shape(), {}, nullptr});
  return out;
}

template <typename Scalar>
BasicTensor<Scalar> Tape<Scalar>::record(BasicTensor<Scalar> output,
                                         std::span<const BasicTensor<Scalar>* const> inputs,
                                         BackwardFn backward) {
  Node node{output.shape(), {}, std::move(backward)};
  node.parents.reserve(inputs.size());
  for (const auto* in : inputs) node.parents.push_back(in->tape() == this ? in->node() : -1);
  output.tape_ = this;
  output.node_ = static_cast<std::int32_t>(nodes_.size());
  nodes_.push_back(std::move(node));
  return output;
}

template <typename Scalar>
Gradients<Scalar> Tape<Scalar>::backward(const BasicTensor<Scalar>& loss) const {
  if (loss.numel() != 1)
    throw ContractError("backward needs a scalar loss, got shape " + shape_to_string(loss.shape()));
  if (loss.tape() != this || loss.node() < 0) throw ContractError("backward: loss is not recorded on this tape");

  Gradients<Scalar> result;
  result.tape_ = this;
  result.grads_.resize(nodes_.size());
  result.grads_[static_cast<std::size_t>(loss.node())] = Vector::Ones(1);
  for (std::int32_t id = loss.node(); id >= 0; --id) {
    const Node& node = nodes_[static_cast<std::size_t>(id)];
    const Vector& g = result.grads_[static_cast<std::size_t>(id)];
    if (g.size() == 0 || !node.backward) continue;
    Sink sink(*this, result.grads_, node.parents);
    node.backward(g, sink);
  }
  return result;
}

template <typename Scalar>
BasicTensor<Scalar> Gradients<Scalar>::operator[](const BasicTensor<Scalar>& t) const {
  if (!reached(t)) return BasicTensor<Scalar>::zeros(t.shape());
  return BasicTensor<Scalar>(t.shape(), grads_[static_cast<std::size_t>(t.node())], detail::Unchecked{});
}

template <typename Scalar>
bool Gradients<Scalar>::reached(const BasicTensor<Scalar>& t) const {
  return t.tape() == tape_ && t.node() >= 0 && static_cast<std::size_t>(t.node()) < grads_.size() &&
         grads_[static_cast<std::size_t>(t.node())].size() != 0;
}

template <typename Scalar>
BasicTensor<Scalar> record_op(BasicTensor<Scalar> output, std::span<const BasicTensor<Scalar>* const> inputs,
                              typename Tape<Scalar>::BackwardFn backward) {
  if (debug_checks()) require_finite(output, "op output");
  Tape<Scalar>* tape = nullptr;
  for (const auto* in : inputs) {
    if (!in->requires_grad()) continue;
    if (tape && in->tape() != tape) throw ContractError("op inputs are recorded on different tapes");
    tape = in->tape();
  }
  if (!tape) return output;
  return tape->record(std::move(output), inputs, std::move(backward));
}

template class Tape<double>;
template class Tape<float>;
template class Gradients<double>;
template class Gradients<float>;
template BasicTensor<double> record_op(BasicTensor<double>, std::span<const BasicTensor<double>* const>,
                                       Tape<double>::BackwardFn);
template BasicTensor<float> record_op(BasicTensor<float>, std::span<const BasicTensor<float>* const>,
                                      Tape<float>::BackwardFn);

}  // namespace dyns
