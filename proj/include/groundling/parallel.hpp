#pragma once

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace groundling {

// Worker count: GROUNDLING_THREADS caps it, default logical cores.
inline int worker_threads() {
  int hw = int(std::thread::hardware_concurrency());
  if (hw < 1) hw = 1;
  if (const char* env = std::getenv("GROUNDLING_THREADS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1 && v < 1024)
      hw = std::min(hw, int(v));
  }
  return hw;
}

// Runs fn(i) for i in [0, n). Work is split into fixed contiguous blocks, so
// any per-index output lands in a preassigned slot and results never depend
// on scheduling. fn must not touch shared mutable state.
template <typename Fn>
void parallel_for(int64_t n, const Fn& fn) {
  int workers = std::min<int64_t>(worker_threads(), n);
  if (workers <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  int64_t chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    int64_t lo = w * chunk, hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace groundling
