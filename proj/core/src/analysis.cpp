#include "grl/analysis.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "grl/errors.hpp"
#include "grl/kernels.hpp"
#include "grl/serialize.hpp"

namespace grl {

template <typename T>
PearsonResult pearson(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.numel() != b.numel()) {
    throw DimensionError("pearson of " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t n = a.numel();
  if (n < 2) throw DimensionError("pearson needs at least two values");
  long double ma = 0, mb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  long double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const long double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0 || sbb == 0) return {std::numeric_limits<double>::quiet_NaN(), true};
  const double r = static_cast<double>(sab / std::sqrt(saa * sbb));
  return {std::clamp(r, -1.0, 1.0), false};
}

std::vector<double> singular_values(const Tensor<double>& m) {
  if (m.rank() != 2) throw DimensionError("singular_values expects a matrix");
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const Mat> view(m.ptr(), static_cast<Eigen::Index>(m.dim(0)),
                             static_cast<Eigen::Index>(m.dim(1)));
  Eigen::JacobiSVD<Mat> svd(view);
  const auto& s = svd.singularValues();
  return {s.data(), s.data() + s.size()};
}

bool rank_check(const Tensor<double>& map, std::size_t n_anchors, double rel_tol) {
  if (map.rank() != 2 || map.dim(0) != map.dim(1)) {
    throw DimensionError("rank_check expects a square map, got " + shape_str(map.shape()));
  }
  const auto s = singular_values(map);
  if (n_anchors >= s.size()) return true;
  if (s.front() == 0.0) return true;
  return s[n_anchors] / s.front() < rel_tol;
}

namespace {

double row_sum_error(const Tensor<double>& m) {
  double worst = 0.0;
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  for (std::size_t i = 0; i < rows; ++i) {
    long double s = 0;
    for (std::size_t j = 0; j < cols; ++j) s += m[i * cols + j];
    worst = std::max(worst, static_cast<double>(std::abs(s - 1.0L)));
  }
  return worst;
}

}  // namespace

AttentionDiagnostics attention_maps(const Tensor<double>& q, const Tensor<double>& k,
                                    const Tensor<double>& a, SimilarityMeasure measure) {
  if (q.rank() != 2 || k.rank() != 2 || a.rank() != 2 || q.dim(1) != k.dim(1) ||
      a.dim(1) != k.dim(1)) {
    throw DimensionError("attention_maps needs Q, K, A of equal width, got " +
                         shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                         shape_str(a.shape()));
  }
  const std::size_t n = std::max(q.dim(0), k.dim(0));
  if (n > kMaxMaterializedTokens) {
    throw ConfigError("attention_maps refuses N = " + std::to_string(n) + " > " +
                      std::to_string(kMaxMaterializedTokens) +
                      "; subsample the tokens before materializing maps");
  }
  AttentionDiagnostics d;
  d.n = q.dim(0);
  d.n_anchors = a.dim(0);
  d.d = q.dim(1);
  d.exact_map = ops::softmax_rows(similarity_logits(q, k, measure));
  const auto m_d = ops::softmax_rows(similarity_logits(a, k, measure));
  const auto m_e = ops::softmax_rows(similarity_logits(q, a, measure));
  d.approx_map = ops::matmul(m_e, m_d);
  d.pearson = pearson(d.exact_map, d.approx_map);
  d.max_row_sum_err = std::max({row_sum_error(d.exact_map), row_sum_error(d.approx_map),
                                row_sum_error(m_d), row_sum_error(m_e)});
  d.rank_bound_ok = d.approx_map.dim(0) == d.approx_map.dim(1)
                        ? rank_check(d.approx_map, d.n_anchors)
                        : true;
  return d;
}

ComplexityReport complexity_report(std::uint64_t n, std::uint64_t n_anchors, std::uint64_t d) {
  ComplexityReport r;
  r.n = n;
  r.n_anchors = n_anchors;
  r.d = d;
  // Q·Kᵀ and M·V: 2·N²·d multiply-adds; softmax over N² logits.
  r.flops_exact = 2 * n * n * d + n * n;
  // A·Kᵀ, M_d·V, Q·Aᵀ, M_e·Z: 4·N·N_a·d; softmax over 2·N·N_a logits.
  r.flops_anchored = 4 * n * n_anchors * d + 2 * n * n_anchors;
  r.mem_exact = n * n;
  r.mem_anchored = 2 * n * n_anchors;
  return r;
}

template <typename T>
std::string encode_pgm(const Tensor<T>& map) {
  if (map.rank() != 2) throw DimensionError("heatmap expects a matrix, got " + shape_str(map.shape()));
  if (!map.all_finite()) throw NumericError("heatmap of non-finite values");
  const std::size_t h = map.dim(0), w = map.dim(1);
  const auto [lo_it, hi_it] = std::minmax_element(map.data().begin(), map.data().end());
  const double lo = static_cast<double>(*lo_it), hi = static_cast<double>(*hi_it);
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.reserve(out.size() + h * w);
  for (std::size_t i = 0; i < h * w; ++i) {
    long px = 128;
    if (hi > lo) px = std::lround((static_cast<double>(map[i]) - lo) / (hi - lo) * 255.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(px)));
  }
  return out;
}

template <typename T>
void dump_heatmap(const Tensor<T>& map, const std::filesystem::path& path) {
  io::atomic_write(path, encode_pgm(map));
}

std::string diagnostics_csv_header() {
  return "n,na,d,pearson,rank_ok,row_sum_err,flops_exact,flops_anchored";
}

std::string diagnostics_csv_row(const AttentionDiagnostics& diag, const ComplexityReport& cx) {
  std::ostringstream os;
  os.precision(10);
  os << diag.n << ',' << diag.n_anchors << ',' << diag.d << ',';
  if (diag.pearson.degenerate) {
    os << "nan";
  } else {
    os << diag.pearson.value;
  }
  os << ',' << (diag.rank_bound_ok ? 1 : 0) << ',' << diag.max_row_sum_err << ','
     << cx.flops_exact << ',' << cx.flops_anchored;
  return os.str();
}

template PearsonResult pearson(const Tensor<float>&, const Tensor<float>&);
template PearsonResult pearson(const Tensor<double>&, const Tensor<double>&);
template std::string encode_pgm(const Tensor<float>&);
template std::string encode_pgm(const Tensor<double>&);
template void dump_heatmap(const Tensor<float>&, const std::filesystem::path&);
template void dump_heatmap(const Tensor<double>&, const std::filesystem::path&);

}  // namespace grl
