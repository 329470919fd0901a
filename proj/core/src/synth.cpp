#include <cmath>
#include <numbers>
#include <random>

#include "grl/errors.hpp"
#include "grl/kernels.hpp"
#include "grl/train.hpp"

namespace grl {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Distance-based soft box: 1 inside, 0 outside, ~1px ramp.
double box(double x, double y, double cx, double cy, double hw, double hh) {
  const double dx = std::abs(x - cx) - hw, dy = std::abs(y - cy) - hh;
  const double d = std::max(dx, dy);
  return std::clamp(0.5 - d, 0.0, 1.0);
}

// Ring-and-cross motif in a unit cell centred at the origin.
double motif(double u, double v) {
  const double r = std::sqrt(u * u + v * v);
  const double ring = std::clamp(1.0 - std::abs(r - 0.6) / 0.15, 0.0, 1.0);
  const double cross = (std::abs(u) < 0.12 || std::abs(v) < 0.12) && r < 0.45 ? 1.0 : 0.0;
  return std::max(ring, cross);
}

}  // namespace

template <typename T>
Tensor<T> synth_image(std::uint64_t seed, std::size_t h, std::size_t w) {
  if (h < 8 || w < 8) throw DimensionError("synth_image needs at least 8×8");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };

  const double extent = static_cast<double>(std::max(h, w));
  const double base = uni(0.3, 0.7);
  const double gx = uni(-0.15, 0.15), gy = uni(-0.15, 0.15);

  // One orientation shared by three octaves of the grating.
  const double theta = uni(0.0, std::numbers::pi);
  const double period = uni(0.35, 0.6) * extent;
  const double phase = uni(0.0, kTwoPi);
  const double ct = std::cos(theta), st = std::sin(theta);

  // Nested rectangles shrinking by 2 around a common centre.
  const double rcx = uni(0.3, 0.7) * w, rcy = uni(0.3, 0.7) * h;
  const double rhw = uni(0.25, 0.4) * w, rhh = uni(0.25, 0.4) * h;
  const double rsign = u01(rng) < 0.5 ? -1.0 : 1.0;

  // Motif copies at three scales, each with its own rotation.
  struct Stamp {
    double cx, cy, scale, c, s, sign;
  };
  std::vector<Stamp> stamps;
  for (int k = 0; k < 3; ++k) {
    const double scale = extent * 0.22 / std::pow(2.0, k);
    const double a = uni(0.0, kTwoPi);
    stamps.push_back({uni(0.15, 0.85) * w, uni(0.15, 0.85) * h, scale, std::cos(a), std::sin(a),
                      u01(rng) < 0.5 ? -1.0 : 1.0});
  }

  Tensor<T> img(Shape{1, h, w});
  for (std::size_t yi = 0; yi < h; ++yi) {
    for (std::size_t xi = 0; xi < w; ++xi) {
      const double x = static_cast<double>(xi) + 0.5, y = static_cast<double>(yi) + 0.5;
      double v = base + gx * (x / w - 0.5) + gy * (y / h - 0.5);
      const double t = (x * ct + y * st) / period;
      v += 0.10 * std::sin(kTwoPi * t + phase) + 0.06 * std::sin(kTwoPi * 2.0 * t + phase) +
           0.04 * std::sin(kTwoPi * 4.0 * t + phase);
      double nest = 0.0;
      for (int k = 0; k < 3; ++k) {
        const double f = std::pow(0.5, k);
        nest += (k % 2 == 0 ? 1.0 : -1.0) * box(x, y, rcx, rcy, rhw * f, rhh * f);
      }
      v += 0.18 * rsign * nest;
      for (const auto& s : stamps) {
        const double dx = (x - s.cx) / s.scale, dy = (y - s.cy) / s.scale;
        v += 0.2 * s.sign * motif(dx * s.c + dy * s.s, -dx * s.s + dy * s.c);
      }
      img[yi * w + xi] = static_cast<T>(std::clamp(v, 0.0, 1.0));
    }
  }
  return img;
}

template <typename T>
Tensor<T> add_noise(const Tensor<T>& img, double sigma, std::uint64_t seed) {
  if (sigma < 0.0) throw ConfigError("noise sigma must be >= 0");
  Tensor<T> out = img;
  if (sigma == 0.0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  const double s = sigma / 255.0;
  for (auto& v : out.data()) v = static_cast<T>(static_cast<double>(v) + s * n01(rng));
  return out;
}

std::uint64_t sample_seed(Stream stream, std::uint64_t run_seed, std::uint64_t index) {
  constexpr std::uint64_t kSeedMask = (1ull << 20) - 1, kIndexMask = (1ull << 40) - 1;
  return (static_cast<std::uint64_t>(stream) << 60) | ((run_seed & kSeedMask) << 40) |
         (index & kIndexMask);
}

template <typename T>
Sample<T> make_sample(Task task, std::uint64_t seed, std::size_t patch, double sigma) {
  Sample<T> s;
  s.target = synth_image<T>(seed, patch, patch);
  switch (task) {
    case Task::denoise:
      // Noise draws use a seed outside every image stream.
      s.input = add_noise(s.target, sigma, seed ^ (1ull << 59));
      break;
    case Task::sr_x2:
      s.input = ops::pool2d(s.target, 2, ops::PoolMode::avg);
      break;
    case Task::sr_x4:
      s.input = ops::pool2d(s.target, 4, ops::PoolMode::avg);
      break;
  }
  return s;
}

template Tensor<float> synth_image(std::uint64_t, std::size_t, std::size_t);
template Tensor<double> synth_image(std::uint64_t, std::size_t, std::size_t);
template Tensor<float> add_noise(const Tensor<float>&, double, std::uint64_t);
template Tensor<double> add_noise(const Tensor<double>&, double, std::uint64_t);
template Sample<float> make_sample(Task, std::uint64_t, std::size_t, double);
template Sample<double> make_sample(Task, std::uint64_t, std::size_t, double);

}  // namespace grl
