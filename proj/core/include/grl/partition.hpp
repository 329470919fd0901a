#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <variant>
#include <vector>

#include "grl/tensor.hpp"

namespace grl {

enum class StripeDirection { horizontal, vertical };

// Full-width bands of `width` rows (horizontal) or full-height bands of
// `width` columns (vertical), cyclically shifted by `shift` across the bands.
struct StripeSpec {
  StripeDirection direction = StripeDirection::horizontal;
  std::size_t width = 4;
  std::size_t shift = 0;

  void validate() const;
};

// size×size tiles, cyclically shifted by `shift` along both axes.
struct WindowSpec {
  std::size_t size = 8;
  std::size_t shift = 0;

  void validate() const;
};

using Geometry = std::variant<StripeSpec, WindowSpec>;

// Maps position i of a reflect-extended axis of length n back into [0, n).
std::size_t reflect_index(std::size_t i, std::size_t n);

// Index bookkeeping for cutting an h×w map into token groups.
//
// The map is first reflect-padded at the bottom/right so the group geometry
// tiles it (the long axis of a stripe is additionally padded to a multiple of
// `long_multiple`), then rolled by -shift, then cut. Tokens inside a group are
// ordered row-major over the group's grid_rows×grid_cols cells.
class PartitionPlan {
 public:
  PartitionPlan(std::size_t h, std::size_t w, const Geometry& geom, std::size_t long_multiple = 1);

  std::size_t height() const { return h_; }
  std::size_t width() const { return w_; }
  std::size_t padded_height() const { return hp_; }
  std::size_t padded_width() const { return wp_; }
  std::size_t groups() const { return groups_; }
  std::size_t group_size() const { return grid_rows_ * grid_cols_; }
  std::size_t grid_rows() const { return grid_rows_; }
  std::size_t grid_cols() const { return grid_cols_; }
  std::size_t shift_y() const { return shift_y_; }
  std::size_t shift_x() const { return shift_x_; }

  // Per token (groups × group_size, group-major): flat index in the padded map.
  const std::shared_ptr<const std::vector<std::uint32_t>>& padded_index() const { return padded_; }
  // Per token: flat index of the original pixel it reads from.
  const std::shared_ptr<const std::vector<std::uint32_t>>& source_index() const { return source_; }
  // Per original pixel (row-major): flat token position g·group_size + i.
  const std::shared_ptr<const std::vector<std::uint32_t>>& merge_index() const { return merge_; }
  // Per token: 2·[row wrapped by the roll] + [column wrapped by the roll].
  const std::vector<std::uint8_t>& wrap_label() const { return wrap_; }

 private:
  std::size_t h_, w_, hp_ = 0, wp_ = 0;
  std::size_t groups_ = 0, grid_rows_ = 0, grid_cols_ = 0;
  std::size_t shift_y_ = 0, shift_x_ = 0;
  std::shared_ptr<const std::vector<std::uint32_t>> padded_, source_, merge_;
  std::vector<std::uint8_t> wrap_;
};

template <typename T>
struct TokenGroup {
  Tensor<T> tokens;                     // [N_g×c]
  std::vector<std::size_t> index_map;   // padded-map flat index of each token
};

template <typename T>
struct Partitioned {
  std::vector<TokenGroup<T>> groups;
  Shape original_shape;  // {c, h, w}
  std::size_t padded_height = 0;
  std::size_t padded_width = 0;
};

// Cuts fmap [c×h×w] into token groups. Never fails for positive extents.
template <typename T>
Partitioned<T> partition(const Tensor<T>& fmap, const Geometry& geom, std::size_t long_multiple = 1);

// Exact inverse of partition(): scatters tokens back, un-rolls and crops.
// Throws ConsistencyError unless the groups cover the padded map exactly once.
template <typename T>
Tensor<T> merge(const Partitioned<T>& parts);

}  // namespace grl
