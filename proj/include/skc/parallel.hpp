#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <thread>
#include <vector>

namespace skc {

inline int max_threads() {
  static int n = [] {
    if (const char* env = std::getenv("SKC_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
  }();
  return n;
}

// Static range partition. Each index is handled by exactly one worker and the
// per-index arithmetic is unchanged, so results are bitwise identical to a
// serial run for any thread count. `fn(begin, end)` must not throw and must
// only write outputs owned by its index range.
template <typename F>
void parallel_for(int64_t n, F&& fn, int64_t grain = 2048) {
  if (n <= 0) return;
  int threads = max_threads();
  int64_t blocks = std::min<int64_t>(threads, (n + grain - 1) / grain);
  if (blocks <= 1) {
    fn(int64_t{0}, n);
    return;
  }
  int64_t chunk = (n + blocks - 1) / blocks;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(blocks - 1));
  for (int64_t b = 1; b < blocks; ++b) {
    int64_t lo = b * chunk;
    int64_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  fn(int64_t{0}, std::min(n, chunk));
  for (auto& t : pool) t.join();
}

}  // namespace skc
