#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace recvsr {

/// Worker count from RECVSR_THREADS; defaults to 1.
inline std::size_t thread_count() {
  static const std::size_t count = [] {
    const char* env = std::getenv("RECVSR_THREADS");
    if (env == nullptr) return std::size_t{1};
    try {
      long v = std::stol(env);
      return v > 0 ? static_cast<std::size_t>(v) : std::size_t{1};
    } catch (...) {
      return std::size_t{1};
    }
  }();
  return count;
}

namespace detail {
inline thread_local bool in_worker = false;
}

/// Runs fn(i) for i in [0, n). Each index is handled by exactly one worker, so
/// callers that write disjoint outputs per index stay bit-deterministic.
/// Nested calls run serially inside the calling worker. The first exception
/// (by worker order) is rethrown after all workers finish.
template <class F>
void parallel_for(std::size_t n, F&& fn) {
  const std::size_t workers = detail::in_worker ? 1 : std::min(thread_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    const std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t begin = w * chunk;
      const std::size_t end = std::min(n, begin + chunk);
      if (begin >= end) break;
      pool.emplace_back([&fn, &errors, w, begin, end] {
        detail::in_worker = true;
        try {
          for (std::size_t i = begin; i < end; ++i) fn(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace recvsr
