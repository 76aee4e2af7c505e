#pragma once

#include <cstddef>
#include <functional>

namespace divsum {

/// DIVSUM_THREADS when set to a positive integer, otherwise the hardware
/// concurrency (at least 1).
std::size_t worker_threads();

/// Runs body(0..count-1) on up to `threads` threads. Indices are handed out
/// in increasing order; the first exception thrown is rethrown after all
/// workers finish.
void parallel_for(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& body);

}  // namespace divsum
