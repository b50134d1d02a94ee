#pragma once

#include <functional>
#include <thread>
#include <vector>

namespace xald {

// Runs fn(i) for i in [0,n). Slots must be independent; the strided split
// keeps results identical for any thread count.
inline void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  if (threads > n) threads = n;
  if (threads <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&fn, t, n, threads] {
      for (int i = t; i < n; i += threads) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace xald
