#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace odenet {

namespace detail {
inline std::atomic<int>& thread_cap() {
  static std::atomic<int> cap = [] {
    if (const char* env = std::getenv("ODENET_THREADS")) {
      try {
        return std::max(1, std::stoi(env));
      } catch (...) {
      }
    }
    return 1;
  }();
  return cap;
}
}  // namespace detail

/// Upper bound on worker threads used inside operators. Seeded from ODENET_THREADS.
inline int max_threads() { return detail::thread_cap().load(); }
inline void set_max_threads(int n) { detail::thread_cap().store(std::max(1, n)); }

/// Runs fn(i) for i in [0, n). Work items must write disjoint memory; any
/// cross-item reduction is the caller's job, done in index order afterwards,
/// so results do not depend on the thread count.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(max_threads()), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  auto body = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      if (failed.load()) return;
      try {
        fn(i);
      } catch (...) {
        if (!failed.exchange(true)) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(body);
  body();
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace odenet
