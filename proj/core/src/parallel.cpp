#include "grl/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace grl {

namespace {

std::size_t env_threads() {
  std::size_t hw = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("GRL_THREADS")) {
    try {
      long v = std::stol(env);
      if (v >= 1) return static_cast<std::size_t>(v);
    } catch (...) {
    }
  }
  return hw;
}

std::atomic<std::size_t>& budget() {
  static std::atomic<std::size_t> b{env_threads()};
  return b;
}

}  // namespace

std::size_t thread_budget() { return budget().load(); }

void set_thread_budget(std::size_t n) { budget().store(std::max<std::size_t>(1, n)); }

void parallel_for(std::size_t n, std::size_t min_chunk,
                  const std::function<void(std::size_t, std::size_t)>& body) {
  if (n == 0) return;
  min_chunk = std::max<std::size_t>(1, min_chunk);
  std::size_t workers = std::min(thread_budget(), (n + min_chunk - 1) / min_chunk);
  if (workers <= 1) {
    body(0, n);
    return;
  }
  std::size_t chunk = (n + workers - 1) / workers;
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) {
    std::size_t b = w * chunk;
    std::size_t e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&body, b, e] { body(b, e); });
  }
  body(0, std::min(n, chunk));
}

}  // namespace grl
