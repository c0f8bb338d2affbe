#pragma once

#include <functional>
#include <initializer_list>
#include <vector>

#include "dyns/tensor.hpp"

namespace dyns {

template <typename Scalar>
class Tape;

/// Result of Tape::backward: gradient of the loss with respect to every node.
template <typename Scalar>
class Gradients {
 public:
  using Vector = Vec<Scalar>;

  /// Gradient for `t`; zeros when t is not on this tape or the loss does not
  /// depend on it.
  BasicTensor<Scalar> operator[](const BasicTensor<Scalar>& t) const;
  bool reached(const BasicTensor<Scalar>& t) const;

 private:
  friend class Tape<Scalar>;
  const Tape<Scalar>* tape_ = nullptr;
  std::vector<Vector> grads_;
};

/// Define-by-run record of executed ops for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so parents always precede children
/// and a reverse sweep visits each node once. A tape is single-threaded; use
/// one tape per worker for batch-parallel evaluation.
template <typename Scalar>
class Tape {
 public:
  using Vector = Vec<Scalar>;

  /// Hands a backward rule the gradient buffers of the op's inputs.
  class Sink {
   public:
    /// False when input i is a constant (no gradient needed).
    bool wants(std::size_t input) const { return parents_[input] >= 0; }
    /// Zero-initialized accumulation buffer for input i.
    Vector& buffer(std::size_t input);
    void add(std::size_t input, const Eigen::Ref<const Vector>& g) { buffer(input) += g; }

   private:
    friend class Tape;
    Sink(const Tape& tape, std::vector<Vector>& grads, const std::vector<std::int32_t>& parents)
        : tape_(tape), grads_(grads), parents_(parents) {}
    const Tape& tape_;
    std::vector<Vector>& grads_;
    const std::vector<std::int32_t>& parents_;
  };

  using BackwardFn = std::function<void(const Vector& grad_output, Sink& sink)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers `value` as a differentiable leaf.
  BasicTensor<Scalar> watch(const BasicTensor<Scalar>& value);

  /// Appends an op node. Inputs not on this tape are treated as constants.
  BasicTensor<Scalar> record(BasicTensor<Scalar> output, std::span<const BasicTensor<Scalar>* const> inputs,
                             BackwardFn backward);

  /// Reverse sweep from a scalar loss recorded on this tape.
  Gradients<Scalar> backward(const BasicTensor<Scalar>& loss) const;

  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::int32_t>& parents(std::size_t node) const { return nodes_[node].parents; }

 private:
  struct Node {
    Shape shape;
    std::vector<std::int32_t> parents;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

/// Records an op on whichever tape its inputs live on; returns `output`
/// unchanged when no input requires a gradient.
template <typename Scalar>
BasicTensor<Scalar> record_op(BasicTensor<Scalar> output, std::span<const BasicTensor<Scalar>* const> inputs,
                              typename Tape<Scalar>::BackwardFn backward);

template <typename Scalar>
BasicTensor<Scalar> record_op(BasicTensor<Scalar> output, std::initializer_list<const BasicTensor<Scalar>*> inputs,
                              typename Tape<Scalar>::BackwardFn backward) {
  return record_op(std::move(output), std::span<const BasicTensor<Scalar>* const>(inputs.begin(), inputs.size()),
                   std::move(backward));
}

extern template class Tape<double>;
extern template class Tape<float>;
extern template class Gradients<double>;
extern template class Gradients<float>;

}  // namespace dyns
