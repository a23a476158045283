#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace mgml {

/// Worker thread cap. Reads MGML_THREADS once; defaults to the hardware count.
inline std::size_t thread_count() {
  static const std::size_t n = [] {
    std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("MGML_THREADS")) {
      try {
        const long v = std::stol(env);
        if (v >= 1) return std::min<std::size_t>(static_cast<std::size_t>(v), 256);
      } catch (...) {
      }
    }
    return hw;
  }();
  return n;
}

namespace detail {
inline thread_local bool in_parallel_region = false;
}

/// Runs fn(i) for i in [0, n). Each index is computed by exactly one thread and
/// callers must keep iterations independent, so results never depend on the
/// partition. Nested calls run serially on the calling thread.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = detail::in_parallel_region ? 1 : std::min(thread_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t chunk = (n + workers - 1) / workers;
  std::vector<std::exception_ptr> errors(workers);
  auto run = [&fn, &errors, n, chunk](std::size_t w) {
    detail::in_parallel_region = true;
    try {
      for (std::size_t i = w * chunk; i < std::min(n, (w + 1) * chunk); ++i) fn(i);
    } catch (...) {
      errors[w] = std::current_exception();
    }
    detail::in_parallel_region = false;
  };
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers - 1);
    for (std::size_t w = 1; w < workers && w * chunk < n; ++w) pool.emplace_back(run, w);
    run(0);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace mgml
