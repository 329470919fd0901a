#pragma once

#include <cstdint>

namespace grl {

// Work counted by the instrumented kernels: multiply-adds in contractions and
// one unit per softmaxed element.
struct FlopCounts {
  std::uint64_t macs = 0;
  std::uint64_t softmax = 0;

  std::uint64_t total() const { return macs + softmax; }
};

// Scoped counter. While alive, matmul/similarity/softmax kernels invoked from
// this thread add their work to it. Scopes nest; inner counts propagate out.
class FlopCounter {
 public:
  FlopCounter();
  ~FlopCounter();
  FlopCounter(const FlopCounter&) = delete;
  FlopCounter& operator=(const FlopCounter&) = delete;

  const FlopCounts& counts() const { return counts_; }
  void reset() { counts_ = {}; }

  static void add_macs(std::uint64_t n);
  static void add_softmax(std::uint64_t n);

 private:
  FlopCounter* previous_;
  FlopCounts counts_;
};

}  // namespace grl
