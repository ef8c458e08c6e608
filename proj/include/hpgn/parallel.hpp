#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace hpgn {

namespace detail {
inline std::atomic<std::size_t>& thread_setting() {
  static std::atomic<std::size_t> n{1};
  return n;
}
}  // namespace detail

// Intra-op worker count. 1 (the default) keeps every primitive sequential
// and bit-reproducible.
inline void set_num_threads(std::size_t n) { detail::thread_setting() = std::max<std::size_t>(1, n); }
inline std::size_t num_threads() { return detail::thread_setting(); }

// --threads value, falling back to HPGN_THREADS, then the hardware count.
inline std::size_t resolve_thread_count(std::size_t flag_value) {
  if (flag_value > 0) return flag_value;
  if (const char* env = std::getenv("HPGN_THREADS")) {
    try {
      long v = std::stol(env);
      if (v > 0) return static_cast<std::size_t>(v);
    } catch (...) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs fn(worker, begin, end) over contiguous chunks of [0, n). Chunk
// boundaries depend only on n and the worker count.
template <class Fn>
void parallel_chunks(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min(num_threads(), std::max<std::size_t>(n, 1));
  if (workers <= 1) {
    fn(std::size_t{0}, std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  const std::size_t step = (n + workers - 1) / workers;
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t b = std::min(n, w * step), e = std::min(n, b + step);
    pool.emplace_back([&fn, w, b, e] { fn(w, b, e); });
  }
  fn(std::size_t{0}, std::size_t{0}, std::min(n, step));
  for (auto& t : pool) t.join();
}

inline std::size_t chunk_workers(std::size_t n) {
  return std::min(num_threads(), std::max<std::size_t>(n, 1));
}

}  // namespace hpgn
