#pragma once

#include <cstdint>
#include <limits>

namespace dyns {

/// Counter-based 64-bit generator.
///
/// The i-th draw of a stream is splitmix64_finalize(key + i * 0x9E3779B97F4A7C15),
/// with key derived from (seed, stream) by the same finalizer. Every value is a
/// pure function of (seed, stream, i), so results are identical on any platform
/// and independent streams (e.g. one per subject) never need to be advanced in
/// a particular order. Normal variates use the Box-Muller transform.
class CounterRng {
 public:
  using result_type = std::uint64_t;

  CounterRng() : CounterRng(0, 0) {}
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0);

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return next_u64(); }
  std::uint64_t next_u64();

  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  /// Uniform on (0, 1]; safe as a log() argument.
  double uniform_open0();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  /// Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound);

  /// Child stream for a sub-task; deterministic in (this key, id).
  CounterRng split(std::uint64_t id) const;

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_normal_ = 0.0;
  bool has_spare_ = false;
};

std::uint64_t splitmix64_finalize(std::uint64_t z);

}  // namespace dyns
