#include "dyns/rng.hpp"

#include <cmath>
#include <numbers>

namespace dyns {

namespace {
constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
}

std::uint64_t splitmix64_finalize(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

CounterRng::CounterRng(std::uint64_t seed, std::uint64_t stream)
    : key_(splitmix64_finalize(splitmix64_finalize(seed + kGolden) ^ (stream * 0xD1B54A32D192ED03ULL + 1))) {}

std::uint64_t CounterRng::next_u64() {
  ++counter_;
  return splitmix64_finalize(key_ + counter_ * kGolden);
}

double CounterRng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double CounterRng::uniform_open0() { return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53; }

double CounterRng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_normal_;
  }
  const double u1 = uniform_open0();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_normal_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

std::uint64_t CounterRng::below(std::uint64_t bound) {
  if (bound <= 1) return 0;
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = max() - max() % bound;
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return v % bound;
}

CounterRng CounterRng::split(std::uint64_t id) const { return CounterRng(key_, id + 1); }

}  // namespace dyns
