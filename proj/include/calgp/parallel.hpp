#pragma once

#include <atomic>
#include <cstddef>
#include <thread>
#include <vector>

namespace calgp {

namespace detail {
inline std::atomic<int>& thread_count() {
  static std::atomic<int> n{1};
  return n;
}
}  // namespace detail

inline void set_num_threads(int n) { detail::thread_count() = n < 1 ? 1 : n; }
inline int num_threads() { return detail::thread_count(); }

// Runs fn(chunk_index, begin, end) over fixed-size chunks of [0, n).
// The chunk decomposition depends only on n and chunk_size, never on the
// thread count, so per-chunk partial results combined in chunk order give
// bit-identical totals for any --threads setting. Callers own the combine.
template <typename Fn>
void parallel_chunks(std::size_t n, std::size_t chunk_size, Fn&& fn) {
  if (n == 0) return;
  if (chunk_size == 0) chunk_size = 1;
  const std::size_t n_chunks = (n + chunk_size - 1) / chunk_size;
  const int threads = num_threads();
  if (threads <= 1 || n_chunks <= 1) {
    for (std::size_t c = 0; c < n_chunks; ++c) {
      const std::size_t b = c * chunk_size;
      const std::size_t e = b + chunk_size < n ? b + chunk_size : n;
      fn(c, b, e);
    }
    return;
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t c = next.fetch_add(1);
      if (c >= n_chunks) return;
      const std::size_t b = c * chunk_size;
      const std::size_t e = b + chunk_size < n ? b + chunk_size : n;
      fn(c, b, e);
    }
  };
  std::vector<std::thread> pool;
  const int spawn = threads - 1 < static_cast<int>(n_chunks) - 1
                        ? threads - 1
                        : static_cast<int>(n_chunks) - 1;
  pool.reserve(static_cast<std::size_t>(spawn));
  for (int t = 0; t < spawn; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
}

// Default row-chunk granularity for batch loops.
inline constexpr std::size_t kRowChunk = 32;

}  // namespace calgp
