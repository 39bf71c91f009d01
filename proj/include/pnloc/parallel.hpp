// Copyright 2026 The pnloc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace pnloc {

/// Runs fn(i) for i in [0, n) on up to `threads` workers using static
/// contiguous chunks. Results must be written to per-index slots so that the
/// outcome does not depend on the worker count.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(std::max(threads, 1), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = n * w / workers, end = n * (w + 1) / workers;
    pool.emplace_back([&, begin, end] {
      try {
        for (std::size_t i = begin; i < end; ++i) fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

/// Pairwise summation in a fixed tree order.
template <typename T, typename Get>
T pairwise_sum(std::size_t begin, std::size_t end, const T& zero, Get&& get) {
  if (end - begin <= 8) {
    T acc = zero;
    for (std::size_t i = begin; i < end; ++i) acc += get(i);
    return acc;
  }
  const std::size_t mid = begin + (end - begin) / 2;
  T left = pairwise_sum<T>(begin, mid, zero, get);
  left += pairwise_sum<T>(mid, end, zero, get);
  return left;
}

}  // namespace pnloc
