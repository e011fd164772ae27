#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace simdiffrec {

/// Worker budget from SIMDIFFREC_THREADS (default 1). Results are only
/// reproducible for a fixed budget, so callers record the value they used.
inline int thread_budget() {
  const char* env = std::getenv("SIMDIFFREC_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  try {
    return std::max(1, std::stoi(env));
  } catch (...) {
    return 1;
  }
}

/// Splits [0, n) into `threads` contiguous chunks and runs fn(begin, end) on
/// each. Chunk boundaries depend only on (n, threads).
template <class Fn>
void parallel_chunks(std::size_t n, int threads, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(std::max(threads, 1), std::max<std::size_t>(n, 1));
  if (workers <= 1) {
    fn(std::size_t{0}, n);
    return;
  }
  const std::size_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&, w, begin, end] {
      try {
        fn(begin, end);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace simdiffrec
