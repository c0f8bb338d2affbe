#pragma once

#include <functional>
#include <span>

#include "dyns/tape.hpp"

namespace dyns {

/// Scalar-valued function of a parameter list. Must be deterministic and must
/// build its result from the given tensors with dyns ops.
template <typename S>
using ScalarFn = std::function<BasicTensor<S>(std::span<const BasicTensor<S>>)>;

template <typename S>
struct GradCheckReport {
  S max_rel_error = 0;
  Index worst_param = -1;
  Index worst_index = -1;
  S analytic = 0;
  S numeric = 0;
  Index coordinates = 0;
};

/// Compares tape gradients of `fn` against central differences at every
/// coordinate of every parameter.
///
/// Relative error per coordinate is |analytic - numeric| / max(|g|, floor),
/// where |g| is the larger of the two gradient magnitudes. Evaluates fn twice
/// at the base point first and throws OracleError if the values differ.
template <typename S>
GradCheckReport<S> finite_diff_report(const ScalarFn<S>& fn, std::span<const BasicTensor<S>> params, S eps,
                                      S floor = S(1e-8));

template <typename S>
S finite_diff_check(const ScalarFn<S>& fn, std::span<const BasicTensor<S>> params, S eps, S floor = S(1e-8)) {
  return finite_diff_report(fn, params, eps, floor).max_rel_error;
}

}  // namespace dyns
