#include <gtest/gtest.h>

#include <random>

#include "grl/attention.hpp"
#include "grl/flops.hpp"
#include "reference.hpp"

using namespace grl;
using T64 = Tensor<double>;

namespace {

T64 randn(Shape s, std::uint64_t seed, double std = 1.0) {
  std::mt19937_64 rng(seed);
  return T64::randn(std::move(s), rng, std);
}

int measure_id(SimilarityMeasure m) { return m == SimilarityMeasure::dot ? 0 : 1; }

const SimilarityMeasure kMeasures[] = {SimilarityMeasure::dot,
                                       SimilarityMeasure::negative_sq_euclidean};

T64 ref_fmap(const ref::Mat& tokens, std::size_t h, std::size_t w) {
  return ref::from_map(ref::map_of(tokens, h, w));
}

StripeAttentionParams<double> stripe_params(std::size_t c, std::uint64_t seed) {
  return {randn({c, 3 * c}, seed, 0.5),     randn({3 * c}, seed + 1, 0.1),
          randn({c, c}, seed + 2, 0.5),     randn({c}, seed + 3, 0.1),
          randn({c, c}, seed + 4, 0.5),     randn({c}, seed + 5, 0.1)};
}

}  // namespace

TEST(Similarity, DotAndEuclideanValues) {
  T64 q({1, 4}, std::vector<double>{1, 0, 0, 0});
  T64 k({2, 4}, std::vector<double>{1, 0, 0, 0, 0, 2, 0, 0});
  auto dot = similarity_logits(q, k, SimilarityMeasure::dot);
  EXPECT_EQ(dot.at(0, 0), 0.5);  // 1/√4
  EXPECT_EQ(dot.at(0, 1), 0.0);
  auto euc = similarity_logits(q, k, SimilarityMeasure::negative_sq_euclidean);
  EXPECT_EQ(euc.at(0, 0), 0.0);
  EXPECT_EQ(euc.at(0, 1), -2.5);  // −(1 + 4)/2
  EXPECT_THROW(similarity_logits(q, T64({2, 3}), SimilarityMeasure::dot), DimensionError);
}

TEST(Similarity, ParseRoundTrip) {
  for (auto m : kMeasures) EXPECT_EQ(parse_similarity(to_string(m)), m);
  EXPECT_THROW(parse_similarity("cosine"), ConfigError);
}

TEST(ExactAttention, UniformKeysAverageValues) {
  auto v = randn({5, 3}, 1);
  auto y = exact_attention(randn({4, 2}, 2), T64({5, 2}, 0.3), v);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double mean = 0;
      for (std::size_t t = 0; t < 5; ++t) mean += v.at(t, j) / 5;
      EXPECT_NEAR(y.at(i, j), mean, 1e-14);
    }
}

TEST(ExactAttention, MatchesOracle) {
  auto q = randn({7, 4}, 1), k = randn({9, 4}, 2), v = randn({9, 3}, 3);
  for (auto m : kMeasures) {
    auto want = ref::to_tensor(
        ref::attention(ref::to_mat(q), ref::to_mat(k), ref::to_mat(v), measure_id(m)));
    EXPECT_LT(max_abs_diff(exact_attention(q, k, v, m), want), 1e-12);
  }
  EXPECT_THROW(exact_attention(q, k, randn({8, 3}, 4)), DimensionError);
}

TEST(AnchoredAttention, MatchesTwoStageOracle) {
  auto q = randn({12, 4}, 5), k = randn({12, 4}, 6), v = randn({12, 3}, 7), a = randn({3, 4}, 8);
  for (auto m : kMeasures) {
    const int id = measure_id(m);
    auto md = ref::softmax_rows(ref::similarity(ref::to_mat(a), ref::to_mat(k), id));
    auto me = ref::softmax_rows(ref::similarity(ref::to_mat(q), ref::to_mat(a), id));
    auto got = anchored_attention(q, k, v, a, m);
    EXPECT_LT(max_abs_diff(got, ref::to_tensor(ref::matmul(me, ref::matmul(md, ref::to_mat(v))))),
              1e-12);
    // Associativity: materializing the N×N product gives the same answer.
    EXPECT_LT(max_abs_diff(got, ref::to_tensor(ref::matmul(ref::matmul(me, md), ref::to_mat(v)))),
              1e-12);
  }
}

TEST(AnchoredAttention, PreservesConstantValues) {
  auto y = anchored_attention(randn({10, 4}, 1), randn({10, 4}, 2), T64({10, 2}, 3.25),
                              randn({4, 4}, 3));
  for (double e : y.data()) EXPECT_NEAR(e, 3.25, 1e-13);
}

TEST(AnchoredAttention, Batched) {
  auto q = randn({2, 6, 4}, 1), k = randn({2, 6, 4}, 2), v = randn({2, 6, 3}, 3),
       a = randn({2, 2, 4}, 4);
  auto y = anchored_attention(q, k, v, a);
  for (std::size_t b = 0; b < 2; ++b) {
    auto slice = [b](const T64& t) {
      const std::size_t n = t.dim(1), d = t.dim(2);
      return T64({n, d}, std::vector<double>(t.ptr() + b * n * d, t.ptr() + (b + 1) * n * d));
    };
    auto want = anchored_attention(slice(q), slice(k), slice(v), slice(a));
    EXPECT_LT(max_abs_diff(slice(y), want), 1e-14);
  }
}

TEST(AnchoredAttention, RejectsExcessAnchors) {
  EXPECT_THROW(anchored_attention(randn({4, 2}, 1), randn({4, 2}, 2), randn({4, 2}, 3),
                                  randn({5, 2}, 4)),
               ConfigError);
  EXPECT_THROW(anchored_attention(randn({4, 2}, 1), randn({4, 2}, 2), randn({3, 2}, 3),
                                  randn({2, 2}, 4)),
               DimensionError);
}

TEST(AnchoredAttention, CountsLinearWork) {
  const std::size_t n = 64, na = 8, d = 4;
  auto q = randn({n, d}, 1), k = randn({n, d}, 2), v = randn({n, d}, 3), a = randn({na, d}, 4);
  FlopCounter exact;
  exact_attention(q, k, v);
  EXPECT_EQ(exact.counts().macs, 2 * n * n * d);
  EXPECT_EQ(exact.counts().softmax, n * n);
  FlopCounter anchored;
  anchored_attention(q, k, v, a);
  EXPECT_EQ(anchored.counts().macs, 4 * n * na * d);
  EXPECT_EQ(anchored.counts().softmax, 2 * n * na);
}

TEST(AnchoredAttention, NeverAllocatesTokenSquared) {
  const std::size_t n = 1024, na = 16, d = 8;
  auto q = randn({n, d}, 1), k = randn({n, d}, 2), v = randn({n, d}, 3), a = randn({na, d}, 4);
  {
    detail::AllocationProbe probe;
    anchored_attention(q, k, v, a);
    EXPECT_GT(probe.allocations(), 0u);
    EXPECT_LE(probe.peak_elements(), n * na);
  }
  {
    detail::AllocationProbe probe;
    exact_attention(q, k, v);
    EXPECT_GE(probe.peak_elements(), n * n);
  }
}

TEST(Anchors, PoolFactorsClampToThinStripes) {
  auto f = anchor_pool_factors(2, 16, 4);
  EXPECT_EQ(f.fy, 2u);
  EXPECT_EQ(f.fx, 4u);
  f = anchor_pool_factors(8, 8, 1);
  EXPECT_EQ(f.fy, 1u);
  EXPECT_EQ(f.fx, 1u);
}

TEST(Anchors, PooledThenProjected) {
  auto stripe = randn({2, 4, 8}, 1);
  auto w = randn({2, 3}, 2), b = randn({3}, 3);
  auto a = compute_anchors(stripe, AnchorSpec{ops::PoolMode::avg, 4}, w, b);
  ASSERT_EQ(a.shape(), (Shape{2, 3}));
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t o = 0; o < 3; ++o) {
      long double acc = b[o];
      for (std::size_t c = 0; c < 2; ++c) {
        long double m = 0;
        for (std::size_t y = 0; y < 4; ++y)
          for (std::size_t x = 0; x < 4; ++x) m += stripe.at(c, y, t * 4 + x);
        acc += m / 16 * w.at(c, o);
      }
      EXPECT_NEAR(a.at(t, o), static_cast<double>(acc), 1e-13);
    }
}

TEST(RelativePosition, IndexEncodesCoordinateDifference) {
  const std::size_t s = 3, heads = 2, n = 9, span = 5;
  auto idx = relative_position_index(s, heads);
  ASSERT_EQ(idx->size(), heads * n * n);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const long dy = long(i / s) - long(j / s), dx = long(i % s) - long(j % s);
        const std::size_t cell = std::size_t((dy + 2) * long(span) + (dx + 2));
        EXPECT_EQ((*idx)[(h * n + i) * n + j], cell * heads + h);
      }
}

TEST(ShiftMask, ZeroWithoutShiftAndSymmetric) {
  auto none = shift_mask<double>(PartitionPlan(8, 8, WindowSpec{4, 0}));
  for (double v : none.data()) EXPECT_EQ(v, 0.0);
  auto m = shift_mask<double>(PartitionPlan(8, 8, WindowSpec{4, 2}));
  std::size_t masked = 0;
  for (std::size_t g = 0; g < m.dim(0); ++g)
    for (std::size_t i = 0; i < 16; ++i)
      for (std::size_t j = 0; j < 16; ++j) {
        EXPECT_EQ(m.at(g, i, j), m.at(g, j, i));
        masked += m.at(g, i, j) != 0.0;
      }
  // Only the last row/column of windows mixes wrapped and unwrapped pixels.
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(m.at(0, i, j), 0.0);
  EXPECT_GT(masked, 0u);
}

TEST(WindowAttention, MatchesStraightLineOracle) {
  const std::size_t c = 4, heads = 2;
  for (auto [h, w, size, shift] :
       {std::tuple{8, 8, 4, 0}, {8, 8, 4, 2}, {9, 6, 4, 2}, {5, 11, 3, 1}, {3, 3, 4, 2}}) {
    auto x = randn({c, std::size_t(h), std::size_t(w)}, 11 + h);
    WindowAttentionParams<double> p{randn({c, 3 * c}, 1, 0.5), randn({3 * c}, 2, 0.1),
                                    randn({std::size_t((2 * size - 1) * (2 * size - 1)), heads}, 3)};
    auto got = window_attention(x, WindowSpec{std::size_t(size), std::size_t(shift)}, heads, p);
    auto want = ref_fmap(ref::window_attention(ref::tokens_of(ref::to_map(x)), h, w, size, shift,
                                               heads, p.qkv_w, p.qkv_b, p.rel_bias),
                         h, w);
    EXPECT_LT(max_abs_diff(got, want), 1e-11) << h << "x" << w << " s" << size << "/" << shift;
  }
}

TEST(StripeAttention, MatchesStraightLineOracle) {
  const std::size_t c = 4, heads = 2;
  for (bool vertical : {false, true})
    for (std::size_t shift : {0u, 2u})
      for (auto pool : {ops::PoolMode::avg, ops::PoolMode::max})
        for (auto m : kMeasures)
          for (auto [h, w] : {std::pair{8, 8}, {9, 13}, {6, 5}}) {
            auto x = randn({c, std::size_t(h), std::size_t(w)}, 7 * h + w);
            auto p = stripe_params(c, 20);
            StripeSpec spec{vertical ? StripeDirection::vertical : StripeDirection::horizontal, 4,
                            shift};
            StripeProbe probe;
            auto got = anchored_stripe_attention(x, spec, AnchorSpec{pool, 4}, heads, m, p, &probe);
            ref::StripeRefProbe rp;
            auto want = ref_fmap(
                ref::stripe_attention(ref::tokens_of(ref::to_map(x)), h, w, vertical, 4, shift, 4,
                                      pool == ops::PoolMode::max, heads, measure_id(m), p.qkv_w,
                                      p.qkv_b, p.anchor_w, p.anchor_b, p.proj_w, p.proj_b, &rp),
                h, w);
            ASSERT_LT(max_abs_diff(got, want), 1e-11)
                << (vertical ? "V" : "H") << shift << " " << h << "x" << w;
            ASSERT_EQ(probe.entries.size(), rp.q.size());
            for (std::size_t e = 0; e < rp.q.size(); ++e) {
              EXPECT_LT(max_abs_diff(probe.entries[e].q, ref::to_tensor(rp.q[e])), 1e-12);
              EXPECT_LT(max_abs_diff(probe.entries[e].a, ref::to_tensor(rp.a[e])), 1e-12);
            }
          }
}

TEST(StripeAttention, AnchorFactorOneAndThinStripes) {
  const std::size_t c = 4;
  auto p = stripe_params(c, 3);
  for (std::size_t s : {1u, 2u, 8u}) {
    auto x = randn({c, 7, 10}, s);
    StripeSpec spec{StripeDirection::horizontal, 2, 1};
    auto got = anchored_stripe_attention(x, spec, AnchorSpec{ops::PoolMode::avg, s}, 2,
                                         SimilarityMeasure::dot, p);
    auto want = ref_fmap(ref::stripe_attention(ref::tokens_of(ref::to_map(x)), 7, 10, false, 2, 1,
                                               s, false, 2, 0, p.qkv_w, p.qkv_b, p.anchor_w,
                                               p.anchor_b, p.proj_w, p.proj_b),
                         7, 10);
    EXPECT_LT(max_abs_diff(got, want), 1e-11) << "s=" << s;
  }
}

TEST(StripeAttention, ConfigErrors) {
  auto p = stripe_params(4, 1);
  auto x = randn({4, 8, 8}, 2);
  StripeSpec spec{StripeDirection::horizontal, 4, 0};
  EXPECT_THROW(anchored_stripe_attention(x, spec, AnchorSpec{ops::PoolMode::avg, 4}, 3,
                                         SimilarityMeasure::dot, p),
               ConfigError);
  EXPECT_THROW(anchored_stripe_attention(x, spec, AnchorSpec{ops::PoolMode::avg, 0}, 2,
                                         SimilarityMeasure::dot, p),
               ConfigError);
}

TEST(StripeAttention, FloatTracksDouble) {
  auto x = randn({4, 8, 12}, 9);
  auto p = stripe_params(4, 30);
  StripeAttentionParams<float> pf{p.qkv_w.cast<float>(),    p.qkv_b.cast<float>(),
                                  p.anchor_w.cast<float>(), p.anchor_b.cast<float>(),
                                  p.proj_w.cast<float>(),   p.proj_b.cast<float>()};
  StripeSpec spec{StripeDirection::vertical, 4, 2};
  AnchorSpec an{ops::PoolMode::avg, 4};
  auto d = anchored_stripe_attention(x, spec, an, 2, SimilarityMeasure::dot, p);
  auto f = anchored_stripe_attention(x.cast<float>(), spec, an, 2, SimilarityMeasure::dot, pf);
  EXPECT_LT(max_abs_diff(f.cast<double>(), d), 1e-4);
}

TEST(StripeAttention, SingleChannelSixteenSquare) {
  const std::size_t c = 1;
  auto x = randn({c, 16, 16}, 29);
  auto p = stripe_params(c, 29);
  StripeSpec spec{StripeDirection::horizontal, 4, 0};
  auto got = anchored_stripe_attention(x, spec, AnchorSpec{ops::PoolMode::avg, 4}, 1,
                                       SimilarityMeasure::dot, p);
  auto want = ref_fmap(ref::stripe_attention(ref::tokens_of(ref::to_map(x)), 16, 16, false, 4, 0, 4,
                                             false, 1, 0, p.qkv_w, p.qkv_b, p.anchor_w, p.anchor_b,
                                             p.proj_w, p.proj_b),
                       16, 16);
  EXPECT_LT(max_abs_diff(got, want), 1e-9);
}

TEST(StripeAttention, ConstantMapGivesConstantChannels) {
  const std::size_t c = 4;
  T64 x({c, 9, 12});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < 9 * 12; ++i) x[ch * 108 + i] = 0.3 * ch - 0.4;
  auto p = stripe_params(c, 12);
  for (auto m : kMeasures) {
    auto y = anchored_stripe_attention(x, StripeSpec{StripeDirection::vertical, 4, 2},
                                       AnchorSpec{ops::PoolMode::max, 4}, 2, m, p);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 1; i < 108; ++i) ASSERT_NEAR(y[ch * 108 + i], y[ch * 108], 1e-12);
  }
}
