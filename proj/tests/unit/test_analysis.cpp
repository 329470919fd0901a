#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

#include "grl/analysis.hpp"
#include "grl/attention.hpp"
#include "grl/flops.hpp"
#include "grl/serialize.hpp"
#include "reference.hpp"

using namespace grl;
using T64 = Tensor<double>;

namespace {

T64 randn(Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return T64::randn(std::move(s), rng);
}

long double pearson_oracle(const T64& a, const T64& b) {
  const std::size_t n = a.numel();
  long double ma = 0, mb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  long double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

TEST(Pearson, Extremes) {
  auto a = randn({20}, 1);
  EXPECT_NEAR(pearson(a, a).value, 1.0, 1e-15);
  T64 neg = a;
  for (auto& v : neg.data()) v = -v;
  EXPECT_NEAR(pearson(a, neg).value, -1.0, 1e-15);
  EXPECT_FALSE(pearson(a, a).degenerate);
}

TEST(Pearson, MatchesHighPrecisionFormula) {
  auto a = randn({7}, 43), b = randn({7}, 44);
  EXPECT_NEAR(pearson(a, b).value, static_cast<double>(pearson_oracle(a, b)), 1e-12);
}

TEST(Pearson, SymmetricAndAffineInvariant) {
  auto a = randn({50}, 3), b = randn({50}, 4);
  for (std::size_t i = 0; i < 50; ++i) b[i] += 0.5 * a[i];
  T64 affine = a;
  for (auto& v : affine.data()) v = 2 * v + 3;
  const double r = pearson(a, b).value;
  EXPECT_EQ(r, pearson(b, a).value);
  EXPECT_NEAR(pearson(affine, b).value, r, 1e-12);
  EXPECT_GE(r, -1.0);
  EXPECT_LE(r, 1.0);
}

TEST(Pearson, DegenerateAndInvalidInput) {
  auto r = pearson(T64({5}, 2.0), randn({5}, 1));
  EXPECT_TRUE(r.degenerate);
  EXPECT_TRUE(std::isnan(r.value));
  EXPECT_THROW(pearson(T64({5}), T64({6})), DimensionError);
  EXPECT_THROW(pearson(T64({1}), T64({1})), DimensionError);
}

TEST(SingularValues, DiagonalAndOrthogonal) {
  T64 d({3, 3}, std::vector<double>{1, 0, 0, 0, 3, 0, 0, 0, 2});
  auto s = singular_values(d);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_NEAR(s[0], 3.0, 1e-14);
  EXPECT_NEAR(s[1], 2.0, 1e-14);
  EXPECT_NEAR(s[2], 1.0, 1e-14);
}

TEST(RankCheck, OuterProductAndIdentity) {
  auto u = randn({6}, 1), v = randn({6}, 2);
  T64 outer({6, 6});
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) outer.at(i, j) = u[i] * v[j];
  EXPECT_TRUE(rank_check(outer, 1));
  T64 eye({8, 8});
  for (std::size_t i = 0; i < 8; ++i) eye.at(i, i) = 1.0;
  EXPECT_FALSE(rank_check(eye, 4));
  EXPECT_TRUE(rank_check(eye, 8));
}

TEST(AttentionMaps, AnchoredProductIsLowRankAndStochastic) {
  for (auto m : {SimilarityMeasure::dot, SimilarityMeasure::negative_sq_euclidean}) {
    auto diag = attention_maps(randn({64, 8}, 1), randn({64, 8}, 2), randn({8, 8}, 3), m);
    EXPECT_TRUE(diag.rank_bound_ok);
    EXPECT_LT(diag.max_row_sum_err, 1e-12);
    EXPECT_EQ(diag.n, 64u);
    EXPECT_EQ(diag.n_anchors, 8u);
    EXPECT_EQ(diag.d, 8u);
    EXPECT_GE(diag.pearson.value, -1.0);
    EXPECT_LE(diag.pearson.value, 1.0);
  }
}

TEST(AttentionMaps, MapsMatchOracles) {
  auto q = randn({10, 4}, 5), k = randn({10, 4}, 6), a = randn({3, 4}, 7);
  auto diag = attention_maps(q, k, a, SimilarityMeasure::dot);
  auto exact = ref::softmax_rows(ref::similarity(ref::to_mat(q), ref::to_mat(k), 0));
  auto me = ref::softmax_rows(ref::similarity(ref::to_mat(q), ref::to_mat(a), 0));
  auto md = ref::softmax_rows(ref::similarity(ref::to_mat(a), ref::to_mat(k), 0));
  EXPECT_LT(max_abs_diff(diag.exact_map, ref::to_tensor(exact)), 1e-14);
  EXPECT_LT(max_abs_diff(diag.approx_map, ref::to_tensor(ref::matmul(me, md))), 1e-14);
  EXPECT_NEAR(diag.pearson.value, static_cast<double>(pearson_oracle(diag.exact_map, diag.approx_map)),
              1e-12);
}

TEST(AttentionMaps, ConstantInputsAreDegenerate) {
  auto diag = attention_maps(T64({6, 3}, 0.5), T64({6, 3}, 0.5), T64({2, 3}, 0.5),
                             SimilarityMeasure::dot);
  for (double v : diag.exact_map.data()) EXPECT_NEAR(v, 1.0 / 6, 1e-15);
  EXPECT_TRUE(diag.pearson.degenerate);
  EXPECT_TRUE(std::isnan(diag.pearson.value));
  EXPECT_TRUE(diag.rank_bound_ok);
}

TEST(AttentionMaps, AnchorsEqualKeysGiveCorrelatedButInexactMaps) {
  // With A = K the approximation is softmax(QKᵀ)·softmax(KKᵀ), not the exact
  // map: the second factor smooths every row. The correlation is high but not
  // near 1 for gaussian inputs at N=32, d=8.
  double sum = 0, lo = 1;
  for (std::uint64_t s = 0; s < 50; ++s) {
    auto k = randn({32, 8}, 2 * s + 1);
    auto diag = attention_maps(randn({32, 8}, 2 * s), k, k, SimilarityMeasure::dot);
    sum += diag.pearson.value;
    lo = std::min(lo, diag.pearson.value);
  }
  EXPECT_GT(sum / 50, 0.8);
  EXPECT_GT(lo, 0.6);
}

TEST(AttentionMaps, RefusesOversizedMaps) {
  const std::size_t n = kMaxMaterializedTokens + 1;
  EXPECT_THROW(attention_maps(T64({n, 1}), T64({n, 1}), T64({2, 1}), SimilarityMeasure::dot),
               ConfigError);
}

TEST(Complexity, ClosedForms) {
  auto r = complexity_report(4096, 256, 32);
  EXPECT_EQ(r.mem_exact, 16777216u);
  EXPECT_EQ(r.mem_anchored, 2097152u);
  EXPECT_EQ(r.flops_exact, 2ull * 4096 * 4096 * 32 + 4096ull * 4096);
  EXPECT_EQ(r.flops_anchored, 4ull * 4096 * 256 * 32 + 2ull * 4096 * 256);
  EXPECT_LT(r.flops_anchored, r.flops_exact);

  auto full = complexity_report(64, 64, 16);
  EXPECT_EQ(full.flops_anchored - 2 * 64 * 64, 2 * (full.flops_exact - 64 * 64));
}

TEST(Complexity, CountersEqualFormula) {
  const std::size_t n = 256, na = 16, d = 16;
  auto q = randn({n, d}, 1), k = randn({n, d}, 2), v = randn({n, d}, 3), a = randn({na, d}, 4);
  auto r = complexity_report(n, na, d);
  for (auto m : {SimilarityMeasure::dot, SimilarityMeasure::negative_sq_euclidean}) {
    FlopCounter e;
    exact_attention(q, k, v, m);
    EXPECT_EQ(e.counts().total(), r.flops_exact);
    FlopCounter an;
    anchored_attention(q, k, v, a, m);
    EXPECT_EQ(an.counts().total(), r.flops_anchored);
  }
}

TEST(Heatmap, EncodingConventions) {
  const std::string c = encode_pgm(T64({2, 3}, 0.7));
  ASSERT_EQ(c.substr(0, c.size() - 6), "P5\n3 2\n255\n");
  for (std::size_t i = c.size() - 6; i < c.size(); ++i) EXPECT_EQ(static_cast<unsigned char>(c[i]), 128);

  const std::string x = encode_pgm(T64({2, 2}, std::vector<double>{0, 1, 1, 0}));
  const std::string px = x.substr(x.size() - 4);
  EXPECT_EQ(px, std::string("\x00\xff\xff\x00", 4));
}

TEST(Heatmap, FileReadsBackWithHeader) {
  const auto path = std::filesystem::temp_directory_path() / "grl_heatmap_test.pgm";
  auto m = randn({5, 7}, 1);
  dump_heatmap(m, path);
  const std::string bytes = io::read_file(path);
  EXPECT_EQ(bytes, encode_pgm(m));
  std::istringstream is(bytes);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  EXPECT_EQ(magic, "P5");
  EXPECT_EQ(w, 7);
  EXPECT_EQ(h, 5);
  EXPECT_EQ(maxval, 255);
  EXPECT_EQ(bytes.size(), std::string("P5\n7 5\n255\n").size() + 35);
  std::filesystem::remove(path);
}

TEST(DiagnosticsCsv, RowFormat) {
  EXPECT_EQ(diagnostics_csv_header(), "n,na,d,pearson,rank_ok,row_sum_err,flops_exact,flops_anchored");
  auto diag = attention_maps(T64({4, 2}, 1.0), T64({4, 2}, 1.0), T64({2, 2}, 1.0),
                             SimilarityMeasure::dot);
  const std::string row = diagnostics_csv_row(diag, complexity_report(4, 2, 2));
  EXPECT_EQ(row.rfind("4,2,2,nan,1,", 0), 0u) << row;
  EXPECT_EQ(row.substr(row.size() - 6), ",80,80") << row;
}
