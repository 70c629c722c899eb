#pragma once

#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace cfft {

inline int resolve_workers(int requested) {
  if (requested > 0) return requested;
  unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

// Runs fn(worker, lo, hi) over contiguous chunks of [0, n). Chunk boundaries
// depend only on (n, workers), so any accumulation done per chunk and combined
// in worker order is reproducible for a fixed worker count.
inline void parallel_chunks(int64_t n, int workers,
                            const std::function<void(int, int64_t, int64_t)>& fn) {
  workers = resolve_workers(workers);
  if (n <= 0) return;
  if (workers == 1 || n == 1) {
    fn(0, 0, n);
    return;
  }
  if (static_cast<int64_t>(workers) > n) workers = static_cast<int>(n);
  std::vector<std::thread> threads;
  std::exception_ptr first_error;
  std::mutex err_mutex;
  threads.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    int64_t lo = n * w / workers;
    int64_t hi = n * (w + 1) / workers;
    threads.emplace_back([&, w, lo, hi] {
      try {
        fn(w, lo, hi);
      } catch (...) {
        std::lock_guard<std::mutex> lk(err_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

inline void parallel_for(int64_t n, int workers, const std::function<void(int64_t)>& fn) {
  parallel_chunks(n, workers, [&](int, int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) fn(i);
  });
}

}  // namespace cfft
