#pragma once

#include <algorithm>
#include <thread>
#include <vector>

namespace stw {

inline int resolve_analysis_threads(int requested) {
  if (requested > 0) return requested;
  unsigned hw = std::thread::hardware_concurrency();
  return static_cast<int>(std::min<unsigned>(hw == 0 ? 1 : hw, 8));
}

// Static contiguous split of [0, n). fn(i) must write only to index-addressed
// slots so results are identical for any thread count.
template <typename Fn>
void parallel_for(int n, int n_threads, Fn&& fn) {
  n_threads = std::min(resolve_analysis_threads(n_threads), std::max(1, n));
  if (n_threads <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> threads;
  threads.reserve(static_cast<size_t>(n_threads));
  for (int s = 0; s < n_threads; ++s) {
    const int lo = n * s / n_threads;
    const int hi = n * (s + 1) / n_threads;
    if (lo >= hi) continue;
    threads.emplace_back([&fn, lo, hi]() {
      for (int i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : threads) t.join();
}

}  // namespace stw
