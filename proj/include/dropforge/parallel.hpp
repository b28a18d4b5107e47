#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <thread>
#include <vector>

namespace dropforge {

namespace detail {

inline std::atomic<int>& thread_count_slot() {
  static std::atomic<int> n{0};  // 0 = not yet initialized
  return n;
}

inline int threads_from_env() {
  if (const char* s = std::getenv("DROPFORGE_THREADS")) {
    int v = std::atoi(s);
    if (v >= 1) return v;
  }
  return 1;
}

inline bool& inside_parallel_region() {
  thread_local bool inside = false;
  return inside;
}

}  // namespace detail

inline int num_threads() {
  int n = detail::thread_count_slot().load(std::memory_order_relaxed);
  if (n == 0) {
    n = detail::threads_from_env();
    detail::thread_count_slot().store(n, std::memory_order_relaxed);
  }
  return n;
}

inline void set_num_threads(int n) {
  detail::thread_count_slot().store(std::max(1, n), std::memory_order_relaxed);
}

// Runs fn(begin, end) over a partition of [0, n) into contiguous chunks,
// one chunk per worker. Every index is handled by exactly one worker with
// the same per-index code path, so the result cannot depend on the worker
// count. Nested calls run inline to avoid thread explosions.
template <typename Fn>
void parallel_for(std::int64_t n, std::int64_t grain, Fn&& fn) {
  if (n <= 0) return;
  const int threads = num_threads();
  if (threads <= 1 || n < 2 * grain || detail::inside_parallel_region()) {
    fn(std::int64_t{0}, n);
    return;
  }
  const std::int64_t max_chunks = std::max<std::int64_t>(1, n / grain);
  const int workers = static_cast<int>(std::min<std::int64_t>(threads, max_chunks));
  const std::int64_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers) - 1);
  for (int w = 1; w < workers; ++w) {
    const std::int64_t b = w * chunk;
    const std::int64_t e = std::min<std::int64_t>(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] {
      detail::inside_parallel_region() = true;
      fn(b, e);
      detail::inside_parallel_region() = false;
    });
  }
  detail::inside_parallel_region() = true;
  fn(std::int64_t{0}, std::min<std::int64_t>(n, chunk));
  detail::inside_parallel_region() = false;
  for (auto& t : pool) t.join();
}

}  // namespace dropforge
