#pragma once

#include <functional>
#include <thread>
#include <vector>

namespace lpcr {

inline int default_threads() {
  unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : static_cast<int>(n);
}

// Static block partition of [begin, end). Each index is processed by exactly
// one thread, so writes to disjoint per-index data need no synchronization
// and results cannot depend on the thread count.
template <typename Fn>
void parallel_for(int begin, int end, int threads, Fn&& fn) {
  int n = end - begin;
  if (n <= 0) return;
  if (threads <= 1 || n == 1) {
    for (int i = begin; i < end; ++i) fn(i);
    return;
  }
  int workers = std::min(threads, n);
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  int chunk = (n + workers - 1) / workers;
  for (int t = 0; t < workers; ++t) {
    int lo = begin + t * chunk;
    int hi = std::min(end, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (int i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace lpcr
