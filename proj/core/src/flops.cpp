#include "grl/flops.hpp"

namespace grl {

namespace {
thread_local FlopCounter* active_counter = nullptr;
}

FlopCounter::FlopCounter() : previous_(active_counter) { active_counter = this; }

FlopCounter::~FlopCounter() {
  active_counter = previous_;
  if (previous_ != nullptr) {
    previous_->counts_.macs += counts_.macs;
    previous_->counts_.softmax += counts_.softmax;
  }
}

void FlopCounter::add_macs(std::uint64_t n) {
  if (active_counter != nullptr) active_counter->counts_.macs += n;
}

void FlopCounter::add_softmax(std::uint64_t n) {
  if (active_counter != nullptr) active_counter->counts_.softmax += n;
}

}  // namespace grl
