#include "grl/partition.hpp"

#include <string>

namespace grl {

namespace {

std::size_t round_up(std::size_t v, std::size_t m) { return (v + m - 1) / m * m; }

}  // namespace

void StripeSpec::validate() const {
  if (width < 1) throw ConfigError("stripe width must be >= 1");
  if (shift >= width) {
    throw ConfigError("stripe shift " + std::to_string(shift) + " must be < width " +
                      std::to_string(width));
  }
}

void WindowSpec::validate() const {
  if (size < 1) throw ConfigError("window size must be >= 1");
  if (shift >= size) {
    throw ConfigError("window shift " + std::to_string(shift) + " must be < size " +
                      std::to_string(size));
  }
}

std::size_t reflect_index(std::size_t i, std::size_t n) {
  if (n == 1) return 0;
  const std::size_t period = 2 * (n - 1);
  i %= period;
  return i < n ? i : period - i;
}

PartitionPlan::PartitionPlan(std::size_t h, std::size_t w, const Geometry& geom,
                             std::size_t long_multiple)
    : h_(h), w_(w) {
  if (h == 0 || w == 0) throw DimensionError("partition of an empty map");
  if (long_multiple == 0) throw ConfigError("long_multiple must be >= 1");

  if (const auto* s = std::get_if<StripeSpec>(&geom)) {
    s->validate();
    if (s->direction == StripeDirection::horizontal) {
      hp_ = round_up(h, s->width);
      wp_ = round_up(w, long_multiple);
      shift_y_ = s->shift;
      grid_rows_ = s->width;
      grid_cols_ = wp_;
      groups_ = hp_ / s->width;
    } else {
      hp_ = round_up(h, long_multiple);
      wp_ = round_up(w, s->width);
      shift_x_ = s->shift;
      grid_rows_ = hp_;
      grid_cols_ = s->width;
      groups_ = wp_ / s->width;
    }
  } else {
    const auto& win = std::get<WindowSpec>(geom);
    win.validate();
    hp_ = round_up(h, win.size);
    wp_ = round_up(w, win.size);
    shift_y_ = shift_x_ = win.shift;
    grid_rows_ = grid_cols_ = win.size;
    groups_ = (hp_ / win.size) * (wp_ / win.size);
  }

  const std::size_t n = group_size();
  const std::size_t groups_x = wp_ / grid_cols_;
  auto padded = std::make_shared<std::vector<std::uint32_t>>(groups_ * n);
  auto source = std::make_shared<std::vector<std::uint32_t>>(groups_ * n);
  std::vector<std::uint32_t> inverse(hp_ * wp_);
  wrap_.resize(groups_ * n);
  for (std::size_t g = 0; g < groups_; ++g) {
    const std::size_t oy = (g / groups_x) * grid_rows_;
    const std::size_t ox = (g % groups_x) * grid_cols_;
    for (std::size_t i = 0; i < grid_rows_; ++i) {
      for (std::size_t j = 0; j < grid_cols_; ++j) {
        const std::size_t t = g * n + i * grid_cols_ + j;
        const std::size_t py = (oy + i + shift_y_) % hp_;
        const std::size_t px = (ox + j + shift_x_) % wp_;
        (*padded)[t] = static_cast<std::uint32_t>(py * wp_ + px);
        (*source)[t] = static_cast<std::uint32_t>(reflect_index(py, h) * w + reflect_index(px, w));
        inverse[py * wp_ + px] = static_cast<std::uint32_t>(t);
        wrap_[t] = static_cast<std::uint8_t>((py < shift_y_ ? 2 : 0) + (px < shift_x_ ? 1 : 0));
      }
    }
  }
  auto merge = std::make_shared<std::vector<std::uint32_t>>(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) (*merge)[y * w + x] = inverse[y * wp_ + x];
  padded_ = std::move(padded);
  source_ = std::move(source);
  merge_ = std::move(merge);
}

template <typename T>
Partitioned<T> partition(const Tensor<T>& fmap, const Geometry& geom, std::size_t long_multiple) {
  if (fmap.rank() != 3) throw DimensionError("partition expects [c×h×w], got " + shape_str(fmap.shape()));
  const std::size_t c = fmap.dim(0), h = fmap.dim(1), w = fmap.dim(2);
  PartitionPlan plan(h, w, geom, long_multiple);
  Partitioned<T> out;
  out.original_shape = fmap.shape();
  out.padded_height = plan.padded_height();
  out.padded_width = plan.padded_width();
  const std::size_t n = plan.group_size();
  const auto& src = *plan.source_index();
  const auto& pad = *plan.padded_index();
  out.groups.reserve(plan.groups());
  for (std::size_t g = 0; g < plan.groups(); ++g) {
    TokenGroup<T> grp{Tensor<T>(Shape{n, c}), std::vector<std::size_t>(n)};
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t pix = src[g * n + i];
      for (std::size_t ch = 0; ch < c; ++ch) grp.tokens.at(i, ch) = fmap[ch * h * w + pix];
      grp.index_map[i] = pad[g * n + i];
    }
    out.groups.push_back(std::move(grp));
  }
  return out;
}

template <typename T>
Tensor<T> merge(const Partitioned<T>& parts) {
  const Shape& os = parts.original_shape;
  if (os.size() != 3) throw DimensionError("merge needs an original [c×h×w] shape");
  const std::size_t c = os[0], h = os[1], w = os[2];
  const std::size_t hp = parts.padded_height, wp = parts.padded_width;
  if (hp < h || wp < w) throw ConsistencyError("padded extents smaller than original map");
  std::vector<std::uint8_t> seen(hp * wp, 0);
  Tensor<T> out(os);
  for (const auto& grp : parts.groups) {
    if (grp.tokens.rank() != 2 || grp.tokens.dim(0) != grp.index_map.size() ||
        grp.tokens.dim(1) != c) {
      throw ConsistencyError("token group shape " + shape_str(grp.tokens.shape()) +
                             " inconsistent with its index map");
    }
    for (std::size_t i = 0; i < grp.index_map.size(); ++i) {
      const std::size_t p = grp.index_map[i];
      if (p >= hp * wp || seen[p]) {
        throw ConsistencyError("token groups overlap or fall outside the padded map");
      }
      seen[p] = 1;
      const std::size_t y = p / wp, x = p % wp;
      if (y >= h || x >= w) continue;
      for (std::size_t ch = 0; ch < c; ++ch) out[(ch * h + y) * w + x] = grp.tokens.at(i, ch);
    }
  }
  for (std::uint8_t s : seen) {
    if (!s) throw ConsistencyError("token groups do not cover the padded map");
  }
  return out;
}

template Partitioned<float> partition(const Tensor<float>&, const Geometry&, std::size_t);
template Partitioned<double> partition(const Tensor<double>&, const Geometry&, std::size_t);
template Tensor<float> merge(const Partitioned<float>&);
template Tensor<double> merge(const Partitioned<double>&);

}  // namespace grl
