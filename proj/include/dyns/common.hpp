#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace dyns {

#ifdef DYNS_SINGLE_PRECISION
using Real = float;
#else
using Real = double;
#endif

using Index = std::int64_t;
using Shape = std::vector<Index>;

/// Number of elements described by a shape (1 for the rank-0 scalar shape).
Index shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Error hierarchy. The CLI maps categories onto exit codes, so every
// failure the library raises derives from one of the three bases below.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or usage (CLI exit code 1).
class UsageError : public Error {
 public:
  using Error::Error;
};
/// Bad or inconsistent input data (CLI exit code 2).
class DataError : public Error {
 public:
  using Error::Error;
};
/// NaN, failed oracle, failed gradient check (CLI exit code 3).
class NumericalError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public UsageError {
 public:
  using UsageError::UsageError;
};
class DimensionError : public UsageError {
 public:
  using UsageError::UsageError;
};
class ContractError : public UsageError {
 public:
  using UsageError::UsageError;
};
class LengthError : public UsageError {
 public:
  using UsageError::UsageError;
};

class ParseError : public DataError {
 public:
  using DataError::DataError;
};
class ContentError : public DataError {
 public:
  using DataError::DataError;
};
class SplitError : public DataError {
 public:
  using DataError::DataError;
};
class SpecError : public DataError {
 public:
  using DataError::DataError;
};
class EvaluationError : public DataError {
 public:
  using DataError::DataError;
};

class OracleError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

// Global worker cap (the CLI's --threads). Defaults to hardware concurrency.
void set_thread_limit(int threads);
int thread_limit();

/// Runs body(i) for i in [0, count) on up to thread_limit() workers. Work is
/// split into contiguous blocks; callers must not depend on execution order.
void parallel_for(Index count, const std::function<void(Index)>& body);
/// Same, with an explicit worker count.
void parallel_for(Index count, int workers, const std::function<void(Index)>& body);

/// Finiteness checks on every op output (always on for tensor creation).
void set_debug_checks(bool enabled);
bool debug_checks();

}  // namespace dyns
