#pragma once

// Parallel loops over independent indices. Each index is processed by one
// worker and writes only its own outputs, so results never depend on the
// number of threads.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace lensforge {

namespace detail {
inline std::atomic<unsigned> &thread_setting() {
  static std::atomic<unsigned> n{0};
  return n;
}
} // namespace detail

/// Worker cap for library loops: set_thread_count, else LENSFORGE_THREADS, else hardware.
inline unsigned thread_count() {
  if (unsigned n = detail::thread_setting().load()) return n;
  if (const char *env = std::getenv("LENSFORGE_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

inline void set_thread_count(unsigned n) { detail::thread_setting().store(n); }

/// Calls fn(i) for i in [0, n); the first exception is rethrown after all workers join.
template <class Fn> void parallel_for(std::size_t n, Fn &&fn, unsigned threads = 0) {
  if (threads == 0) threads = thread_count();
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, n));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next.store(n);
      }
    }
  };
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto &t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

} // namespace lensforge
