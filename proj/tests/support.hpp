#pragma once

#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "dyns/rng.hpp"
#include "dyns/tensor.hpp"

namespace dyns::test {

inline Tensor randn(Shape shape, CounterRng& rng, double stddev = 1.0) {
  Vec<Real> v(shape_numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<Real>(rng.normal() * stddev);
  return Tensor(std::move(shape), std::move(v));
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (Index i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a.data()[i]) - double(b.data()[i])));
  return m;
}

/// max |a - b| / max(|b|, floor) over entries.
inline double max_rel_diff(const Tensor& a, const Tensor& b, double floor = 1e-12) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (Index i = 0; i < a.numel(); ++i) {
    const double x = a.data()[i], y = b.data()[i];
    m = std::max(m, std::abs(x - y) / std::max(std::abs(y), floor));
  }
  return m;
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

}  // namespace dyns::test
