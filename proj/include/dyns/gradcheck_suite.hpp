#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dyns/common.hpp"

namespace dyns {

struct OpCheckResult {
  std::string op;
  double max_rel_error = 0;
  Index coordinates = 0;
};

/// Finite-difference check of every differentiable op and of the end-to-end
/// training loss on a tiny model, with inputs drawn from `seed`.
std::vector<OpCheckResult> run_gradcheck_suite(std::uint64_t seed);

/// 1e-4 at 64-bit, 1e-2 at 32-bit.
double gradcheck_tolerance();

}  // namespace dyns
