#include "dyns/common.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <thread>

namespace dyns {

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

int default_threads() {
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

std::atomic<int> g_thread_limit{default_threads()};

#ifdef NDEBUG
std::atomic<bool> g_debug_checks{false};
#else
std::atomic<bool> g_debug_checks{true};
#endif

}  // namespace

void set_thread_limit(int threads) {
  if (threads < 1) throw ConfigError("thread limit must be >= 1, got " + std::to_string(threads));
  g_thread_limit = threads;
}

int thread_limit() { return g_thread_limit.load(); }

void parallel_for(Index count, const std::function<void(Index)>& body) {
  parallel_for(count, thread_limit(), body);
}

void parallel_for(Index count, int max_workers, const std::function<void(Index)>& body) {
  if (count <= 0) return;
  const Index workers = std::min<Index>(std::max(max_workers, 1), count);
  if (workers <= 1) {
    for (Index i = 0; i < count; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  pool.reserve(static_cast<std::size_t>(workers));
  for (Index w = 0; w < workers; ++w) {
    const Index begin = count * w / workers;
    const Index end = count * (w + 1) / workers;
    pool.emplace_back([&, w, begin, end] {
      try {
        for (Index i = begin; i < end; ++i) body(i);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

void set_debug_checks(bool enabled) { g_debug_checks = enabled; }
bool debug_checks() { return g_debug_checks.load(); }

}  // namespace dyns
