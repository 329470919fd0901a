#include "grl/tensor.hpp"

namespace grl {

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {

namespace {
thread_local AllocationProbe* active_probe = nullptr;
}

AllocationProbe::AllocationProbe() : previous_(active_probe) { active_probe = this; }

AllocationProbe::~AllocationProbe() { active_probe = previous_; }

void AllocationProbe::note(std::size_t elements) {
  for (AllocationProbe* p = active_probe; p != nullptr; p = p->previous_) {
    p->peak_ = std::max(p->peak_, elements);
    ++p->count_;
  }
}

}  // namespace detail
}  // namespace grl
