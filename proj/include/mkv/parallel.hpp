#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <span>
#include <thread>
#include <vector>

namespace mkv {

/// Static-partition parallel loop. Each index is processed by exactly one
/// worker; results written per index are therefore independent of the
/// worker count. The first exception thrown by a worker is rethrown.
class Executor {
 public:
  explicit Executor(unsigned workers = 1) : workers_(std::max(1u, workers)) {}

  unsigned workers() const noexcept { return workers_; }

  template <class Body>
  void parallel_for(std::size_t count, Body&& body) const {
    if (workers_ == 1 || count < 2 * workers_) {
      for (std::size_t i = 0; i < count; ++i) body(i);
      return;
    }
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    pool.reserve(workers_);
    const std::size_t chunk = (count + workers_ - 1) / workers_;
    for (unsigned w = 0; w < workers_; ++w) {
      const std::size_t begin = w * chunk;
      const std::size_t end = std::min(count, begin + chunk);
      if (begin >= end) break;
      pool.emplace_back([&, begin, end] {
        try {
          for (std::size_t i = begin; i < end; ++i) body(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
  }

 private:
  unsigned workers_;
};

/// Pairwise (tree) summation with a fixed split, so the rounding pattern is reproducible.
inline double pairwise_sum(std::span<const double> v) {
  if (v.size() <= 16) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  const std::size_t half = v.size() / 2;
  return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

inline double pairwise_mean(std::span<const double> v) {
  return v.empty() ? 0.0 : pairwise_sum(v) / static_cast<double>(v.size());
}

}  // namespace mkv
