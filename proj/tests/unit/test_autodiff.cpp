#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "grl/autodiff.hpp"

using namespace grl;
using T64 = Tensor<double>;
using V = ad::Var<double>;
using Fn = std::function<V(const std::vector<V>&)>;

namespace {

T64 randn(Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return T64::randn(std::move(s), rng);
}

// Contracts the output with a fixed random tensor so every output element
// carries a distinct weight into the scalar.
double contracted(const Fn& f, const std::vector<T64>& xs, const T64& r) {
  ad::Tape<double> tape(false);
  std::vector<V> vs;
  for (const auto& x : xs) vs.push_back(tape.constant(x));
  const T64& y = f(vs).value();
  long double s = 0;
  for (std::size_t i = 0; i < y.numel(); ++i) s += static_cast<long double>(y[i]) * r[i];
  return static_cast<double>(s);
}

// Checks the reverse-mode gradient of every input against central differences
// on 10 random elements per input.
void expect_gradients(const Fn& f, const std::vector<T64>& xs, double tol = 1e-6,
                      double h = 1e-5) {
  ad::Tape<double> tape;
  std::vector<V> vs;
  for (const auto& x : xs) vs.push_back(tape.variable(x));
  V y = f(vs);
  const T64 r = randn(y.shape(), 999);
  V loss = ad::sum(ad::mul(y, tape.constant(r)));
  tape.backward(loss);

  std::mt19937_64 rng(17);
  for (std::size_t a = 0; a < xs.size(); ++a) {
    const T64 g = tape.grad_of(vs[a]);
    std::uniform_int_distribution<std::size_t> pick(0, xs[a].numel() - 1);
    for (int probe = 0; probe < 10; ++probe) {
      const std::size_t i = pick(rng);
      auto plus = xs, minus = xs;
      plus[a][i] += h;
      minus[a][i] -= h;
      const double fd = (contracted(f, plus, r) - contracted(f, minus, r)) / (2 * h);
      EXPECT_NEAR(g[i], fd, tol * std::max(1.0, std::abs(fd))) << "input " << a << " element " << i;
    }
  }
}

}  // namespace

TEST(Autodiff, TrivialBackward) {
  ad::Tape<double> tape;
  V x = tape.variable(T64({2}, std::vector<double>{1.0, 3.0}));
  V y = ad::sum(ad::mul(x, x));  // d/dx Σx² = 2x
  tape.backward(y);
  auto g = tape.grad_of(x);
  EXPECT_EQ(g[0], 2.0);
  EXPECT_EQ(g[1], 6.0);
}

TEST(Autodiff, FanOutAccumulates) {
  ad::Tape<double> tape;
  V x = tape.variable(T64({3}, 2.0));
  tape.backward(ad::sum(ad::add(x, ad::scale(x, 3.0))));
  EXPECT_EQ(tape.grad_of(x), T64({3}, 4.0));
}

TEST(Autodiff, NonScalarLossIsRejected) {
  ad::Tape<double> tape;
  V x = tape.variable(T64({3}, 1.0));
  EXPECT_THROW(tape.backward(x), DimensionError);
}

TEST(Autodiff, DisconnectedParameterHasZeroGradient) {
  ad::Tape<double> tape;
  T64 wa({2}, 1.0), wb({2}, 1.0);
  V a = tape.parameter(wa, 0);
  V b = tape.parameter(wb, 1);
  (void)b;
  tape.backward(ad::sum(a));
  auto grads = tape.parameter_grads();
  ASSERT_EQ(grads.size(), 1u);
  EXPECT_EQ(grads[0].first, 0u);
  EXPECT_EQ(tape.grad_of(b), T64({2}));
}

TEST(Autodiff, ParameterSlotIsShared) {
  ad::Tape<double> tape;
  T64 w({2}, 1.5);
  V a = tape.parameter(w, 7);
  V b = tape.parameter(w, 7);
  EXPECT_EQ(a.id, b.id);
  tape.backward(ad::sum(ad::add(a, b)));
  EXPECT_EQ(tape.grad_of(a)[0], 2.0);
}

TEST(AutodiffFD, Elementwise) {
  auto a = randn({3, 4}, 1), b = randn({3, 4}, 2);
  expect_gradients([](const auto& v) { return ad::add(v[0], v[1]); }, {a, b});
  expect_gradients([](const auto& v) { return ad::sub(v[0], v[1]); }, {a, b});
  expect_gradients([](const auto& v) { return ad::mul(v[0], v[1]); }, {a, b});
  expect_gradients([](const auto& v) { return ad::scale(v[0], -2.5); }, {a});
  expect_gradients([](const auto& v) { return ad::reshape(v[0], {4, 3}); }, {a});
}

TEST(AutodiffFD, Contractions) {
  expect_gradients([](const auto& v) { return ad::matmul(v[0], v[1]); },
                   {randn({3, 5}, 1), randn({5, 2}, 2)});
  expect_gradients([](const auto& v) { return ad::matmul(v[0], v[1]); },
                   {randn({2, 3, 5}, 3), randn({2, 5, 4}, 4)});
  expect_gradients([](const auto& v) { return ad::matmul_nt(v[0], v[1]); },
                   {randn({2, 3, 5}, 5), randn({2, 4, 5}, 6)});
  expect_gradients([](const auto& v) { return ad::linear(v[0], v[1], v[2]); },
                   {randn({4, 3}, 7), randn({3, 5}, 8), randn({5}, 9)});
}

TEST(AutodiffFD, SoftmaxAndNorm) {
  expect_gradients([](const auto& v) { return ad::softmax_rows(v[0]); }, {randn({3, 6}, 1)});
  expect_gradients([](const auto& v) { return ad::layer_norm(v[0], v[1], v[2]); },
                   {randn({4, 6}, 2), randn({6}, 3), randn({6}, 4)});
}

TEST(AutodiffFD, Activations) {
  for (auto kind : {ops::Activation::gelu, ops::Activation::relu, ops::Activation::sigmoid})
    expect_gradients([kind](const auto& v) { return ad::activation(v[0], kind); },
                     {randn({5, 4}, 11)});
}

TEST(AutodiffFD, ConvAndShuffle) {
  expect_gradients([](const auto& v) { return ad::conv2d(v[0], v[1], v[2], 1); },
                   {randn({2, 5, 6}, 1), randn({3, 2, 3, 3}, 2), randn({3}, 3)});
  expect_gradients([](const auto& v) { return ad::pixel_shuffle(v[0], 2); }, {randn({8, 3, 2}, 4)});
}

TEST(AutodiffFD, Similarity) {
  auto q = randn({2, 4, 3}, 1), k = randn({2, 5, 3}, 2);
  for (auto m : {SimilarityMeasure::dot, SimilarityMeasure::negative_sq_euclidean})
    expect_gradients([m](const auto& v) { return ad::similarity(v[0], v[1], m); }, {q, k});
}

TEST(AutodiffFD, LayoutOps) {
  auto x = randn({3, 4, 5}, 1);
  expect_gradients([](const auto& v) { return ad::chw_to_tokens(v[0]); }, {x});
  expect_gradients([](const auto& v) { return ad::tokens_to_chw(v[0], 4, 5); },
                   {randn({20, 3}, 2)});
  expect_gradients([](const auto& v) { return ad::slice_last(v[0], 1, 4); }, {x});
  expect_gradients([](const auto& v) { return ad::concat_last(v[0], v[1]); },
                   {randn({2, 3}, 3), randn({2, 4}, 4)});
  expect_gradients([](const auto& v) { return ad::split_heads(v[0], 2); }, {randn({2, 3, 4}, 5)});
  expect_gradients([](const auto& v) { return ad::merge_heads(v[0], 2); }, {randn({4, 3, 2}, 6)});
}

TEST(AutodiffFD, GathersWithRepeats) {
  auto idx = std::make_shared<const std::vector<std::uint32_t>>(std::vector<std::uint32_t>{2, 0, 2, 1});
  expect_gradients([idx](const auto& v) { return ad::gather_rows(v[0], idx, {4, 3}); },
                   {randn({3, 3}, 1)});
  expect_gradients([idx](const auto& v) { return ad::gather_flat(v[0], idx, {2, 2}); },
                   {randn({3}, 2)});
}

TEST(AutodiffFD, PoolTokens) {
  for (auto mode : {ops::PoolMode::avg, ops::PoolMode::max})
    expect_gradients(
        [mode](const auto& v) { return ad::pool_tokens(v[0], 4, 6, 2, 3, mode); },
        {randn({2, 24, 3}, 3)});
}

TEST(AutodiffFD, BiasesAndMasks) {
  expect_gradients([](const auto& v) { return ad::add_head_bias(v[0], v[1]); },
                   {randn({4, 3, 3}, 1), randn({2, 3, 3}, 2)});
  const T64 mask = randn({2, 3, 3}, 3);
  expect_gradients([mask](const auto& v) { return ad::add_group_mask(v[0], mask, 2); },
                   {randn({4, 3, 3}, 4)});
}

TEST(AutodiffFD, ChannelOps) {
  expect_gradients([](const auto& v) { return ad::global_avg_pool(v[0]); }, {randn({3, 4, 5}, 1)});
  expect_gradients([](const auto& v) { return ad::channel_scale(v[0], v[1]); },
                   {randn({3, 4, 5}, 2), randn({1, 3}, 3)});
}

TEST(AutodiffFD, Reductions) {
  auto x = randn({3, 4}, 1);
  expect_gradients([](const auto& v) { return ad::sum(v[0]); }, {x});
  expect_gradients([](const auto& v) { return ad::mean(v[0]); }, {x});
  // Target offset keeps every residual away from the |·| kink.
  T64 target = x;
  for (std::size_t i = 0; i < target.numel(); ++i) target[i] += (i % 2 ? 1.0 : -1.0);
  expect_gradients([target](const auto& v) { return ad::l1_loss(v[0], target); }, {x});
}

TEST(AutodiffFD, ComposedAttention) {
  expect_gradients(
      [](const auto& v) {
        auto s = ad::softmax_rows(ad::similarity(v[0], v[1], SimilarityMeasure::dot));
        return ad::matmul(s, v[2]);
      },
      {randn({1, 5, 4}, 1), randn({1, 6, 4}, 2), randn({1, 6, 3}, 3)});
}
