#pragma once

#include <cstddef>
#include <exception>
#include <vector>

namespace deqnca::detail {

// Runs fn(i) for i in [0, n) across OpenMP threads. The first exception (by
// index) is rethrown on the calling thread once the loop finishes.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  std::vector<std::exception_ptr> errors(n);
  const long long count = static_cast<long long>(n);
#pragma omp parallel for schedule(dynamic, 1) if (count > 1)
  for (long long i = 0; i < count; ++i) {
    try {
      fn(static_cast<std::size_t>(i));
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace deqnca::detail
