#pragma once

#include <cstddef>
#include <functional>

namespace grl {

// Worker cap from GRL_THREADS (default: hardware concurrency).
std::size_t thread_budget();
void set_thread_budget(std::size_t n);

// Runs body(begin, end) over disjoint chunks of [0, n). Every index is handled
// by exactly one call, so results do not depend on the worker count as long
// as body writes only to its own indices. Small ranges run inline.
void parallel_for(std::size_t n, std::size_t min_chunk,
                  const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace grl
