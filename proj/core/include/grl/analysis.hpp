#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "grl/similarity.hpp"
#include "grl/tensor.hpp"

namespace grl {

// Largest token count for which full N×N maps may be materialized.
inline constexpr std::size_t kMaxMaterializedTokens = 4096;

struct PearsonResult {
  double value = 0.0;    // NaN when undefined
  bool degenerate = false;  // one side has zero variance
};

// Sample Pearson correlation over the flattened values.
template <typename T>
PearsonResult pearson(const Tensor<T>& a, const Tensor<T>& b);

// Singular values, descending (Jacobi SVD).
std::vector<double> singular_values(const Tensor<double>& m);

// True iff σ_{N_a+1}/σ_1 < rel_tol. Maps with at most N_a columns pass trivially.
bool rank_check(const Tensor<double>& map, std::size_t n_anchors, double rel_tol = 1e-6);

struct AttentionDiagnostics {
  Tensor<double> exact_map;   // softmax(sim(Q, K))      [N×N]
  Tensor<double> approx_map;  // M_e·M_d                  [N×N]
  PearsonResult pearson;
  bool rank_bound_ok = false;
  double max_row_sum_err = 0.0;  // over exact, approx, M_e and M_d
  std::size_t n = 0, n_anchors = 0, d = 0;
};

// Materializes both maps; refuses N > kMaxMaterializedTokens.
AttentionDiagnostics attention_maps(const Tensor<double>& q, const Tensor<double>& k,
                                    const Tensor<double>& a, SimilarityMeasure measure);

// Closed-form work of one attention evaluation. flops_* count multiply-adds
// plus one unit per softmaxed element; mem_* count attention-map elements.
struct ComplexityReport {
  std::uint64_t n = 0, n_anchors = 0, d = 0;
  std::uint64_t flops_exact = 0, flops_anchored = 0;
  std::uint64_t mem_exact = 0, mem_anchored = 0;
};

ComplexityReport complexity_report(std::uint64_t n, std::uint64_t n_anchors, std::uint64_t d);

// 8-bit binary PGM, min–max normalized; a constant map becomes all 128.
template <typename T>
void dump_heatmap(const Tensor<T>& map, const std::filesystem::path& path);
template <typename T>
std::string encode_pgm(const Tensor<T>& map);

// `n,na,d,pearson,rank_ok,row_sum_err,flops_exact,flops_anchored`
std::string diagnostics_csv_header();
std::string diagnostics_csv_row(const AttentionDiagnostics& diag, const ComplexityReport& cx);

}  // namespace grl
