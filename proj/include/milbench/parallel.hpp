#pragma once

#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "milbench/error.hpp"

namespace milbench {

/// Runs body(i) for i in [0, n) on up to `jobs` threads. Work items are
/// claimed dynamically; callers write results into pre-sized slots indexed
/// by i, so the merged output never depends on the schedule. The exception
/// of the lowest failing index is rethrown.
template <typename Body>
void parallel_for(std::size_t n, std::size_t jobs, Body&& body) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  auto worker = [&] {
    for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
      try {
        body(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    const std::size_t n_threads = jobs < n ? jobs : n;
    pool.reserve(n_threads);
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Worker count: explicit value if given, else $BENCH_JOBS, else 1.
inline std::size_t resolve_jobs(std::optional<std::size_t> flag) {
  if (flag) return *flag == 0 ? 1 : *flag;
  if (const char* env = std::getenv("BENCH_JOBS"); env != nullptr && *env != '\0') {
    try {
      const long v = std::stol(env);
      if (v >= 1) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
    throw UsageError(std::string("BENCH_JOBS must be a positive integer, got '") + env + "'");
  }
  return 1;
}

}  // namespace milbench
