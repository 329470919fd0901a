#include "grl/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "grl/flops.hpp"
#include "grl/parallel.hpp"

namespace grl::ops {

namespace {


struct MatDims {
  std::size_t batch;
  std::size_t rows;
  std::size_t cols;
};

template <typename T>
MatDims mat_dims(const Tensor<T>& t, const char* op) {
  if (t.rank() == 2) return {1, t.dim(0), t.dim(1)};
  if (t.rank() == 3) return {t.dim(0), t.dim(1), t.dim(2)};
  throw DimensionError(std::string(op) + " expects rank 2 or 3, got " + shape_str(t.shape()));
}

template <typename T>
Shape mat_shape(bool batched, std::size_t b, std::size_t r, std::size_t c) {
  return batched ? Shape{b, r, c} : Shape{r, c};
}

enum class Layout { nn, tn, nt };

template <typename T>
Tensor<T> matmul_impl(const Tensor<T>& a, const Tensor<T>& b, bool count, Layout layout) {
  MatDims da = mat_dims(a, "matmul");
  MatDims db = mat_dims(b, "matmul");
  const std::size_t m = layout == Layout::tn ? da.cols : da.rows;
  const std::size_t k = layout == Layout::tn ? da.rows : da.cols;
  const std::size_t kb = layout == Layout::nt ? db.cols : db.rows;
  const std::size_t n = layout == Layout::nt ? db.rows : db.cols;
  if (a.rank() != b.rank() || da.batch != db.batch || k != kb) {
    throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) +
                         (layout == Layout::tn ? "^T" : "") + " x " + shape_str(b.shape()) +
                         (layout == Layout::nt ? "^T" : ""));
  }
  Tensor<T> c(mat_shape<T>(a.rank() == 3, da.batch, m, n));
  if (count) FlopCounter::add_macs(static_cast<std::uint64_t>(da.batch) * m * k * n);
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* pc = c.ptr();
  // Rows [r0, r1) of one batch entry.
  auto rows = [&](std::size_t bi, std::size_t r0, std::size_t r1) {
    const T* ab = pa + bi * m * k;
    const T* bb = pb + bi * k * n;
    T* cb = pc + bi * m * n + r0 * n;
    switch (layout) {
      case Layout::nn:
        detail::gemm_accumulate(ab + r0 * k, bb, cb, r1 - r0, k, n);
        break;
      case Layout::tn:
        detail::gemm_tn_accumulate(ab + r0, m, bb, cb, r1 - r0, k, n);
        break;
      case Layout::nt:
        detail::gemm_nt_accumulate(ab + r0 * k, bb, cb, r1 - r0, k, n);
        break;
    }
  };
  const std::size_t work_per_row = std::max<std::size_t>(1, k * n);
  if (da.batch == 1) {
    parallel_for(m, std::max<std::size_t>(1, 65536 / work_per_row),
                 [&](std::size_t r0, std::size_t r1) { rows(0, r0, r1); });
  } else {
    parallel_for(da.batch, std::max<std::size_t>(1, 65536 / std::max<std::size_t>(1, m * work_per_row)),
                 [&](std::size_t b0, std::size_t b1) {
                   for (std::size_t bi = b0; bi < b1; ++bi) rows(bi, 0, m);
                 });
  }
  return c;
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + " shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

}  // namespace

void require_finite_values(std::span<const float> v, const char* where) {
  for (float x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value in ") + where);
  }
}

void require_finite_values(std::span<const double> v, const char* where) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value in ") + where);
  }
}

namespace detail {

// Multiply-add with one rounding wherever the target has FMA. Spelling it out
// keeps every kernel path on identical arithmetic instead of leaving
// contraction to the compiler's per-loop choice.
template <typename T>
inline T madd(T a, T b, T c) {
#if defined(__FMA__)
  return std::fma(a, b, c);
#else
  return c + a * b;
#endif
}

// Register-blocked MR×NR tiles of C stay in registers across the whole k
// loop. Every element still sums its k products in order t = 0..k−1, so the
// result does not depend on tiling or on how rows are split across threads.
// A is addressed as a[i·sai + t·sat], which covers both A and Aᵀ storage.
template <typename T, std::size_t MR, std::size_t NR>
inline void gemm_tile(const T* __restrict a, std::size_t sai, std::size_t sat,
                      const T* __restrict b, std::size_t ldb, T* __restrict c, std::size_t ldc,
                      std::size_t k) {
  T acc[MR][NR];
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t j = 0; j < NR; ++j) acc[r][j] = c[r * ldc + j];
  for (std::size_t t = 0; t < k; ++t) {
    T bv[NR];
    for (std::size_t j = 0; j < NR; ++j) bv[j] = b[t * ldb + j];
    T av[MR];
    for (std::size_t r = 0; r < MR; ++r) av[r] = a[r * sai + t * sat];
#pragma GCC unroll 8
    for (std::size_t r = 0; r < MR; ++r) {
#pragma omp simd
      for (std::size_t j = 0; j < NR; ++j) acc[r][j] = madd(av[r], bv[j], acc[r][j]);
    }
  }
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t j = 0; j < NR; ++j) c[r * ldc + j] = acc[r][j];
}

// Column panels of width NR, then NR/2, ... down to 4; rows in groups of 4 then singly.
template <typename T, std::size_t NR>
void gemm_panels(const T* a, std::size_t sai, std::size_t sat, const T* b, T* c, std::size_t m,
                 std::size_t k, std::size_t n, std::size_t j0) {
  const std::size_t m_main = m - m % 4;
  for (; j0 + NR <= n; j0 += NR) {
    for (std::size_t i = 0; i < m_main; i += 4)
      gemm_tile<T, 4, NR>(a + i * sai, sai, sat, b + j0, n, c + i * n + j0, n, k);
    for (std::size_t i = m_main; i < m; ++i)
      gemm_tile<T, 1, NR>(a + i * sai, sai, sat, b + j0, n, c + i * n + j0, n, k);
  }
  if constexpr (NR > 4) {
    gemm_panels<T, NR / 2>(a, sai, sat, b, c, m, k, n, j0);
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      T* __restrict crow = c + i * n;
      for (std::size_t t = 0; t < k; ++t) {
        const T av = a[i * sai + t * sat];
        const T* __restrict brow = b + t * n;
        for (std::size_t j = j0; j < n; ++j) crow[j] = madd(av, brow[j], crow[j]);
      }
    }
  }
}

template <typename T>
void gemm_accumulate(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t m,
                     std::size_t k, std::size_t n) {
  gemm_panels<T, 128 / sizeof(T)>(a, k, 1, b, c, m, k, n, 0);
}

template <typename T>
void gemm_tn_accumulate(const T* a, std::size_t lda, const T* b, T* c, std::size_t m,
                        std::size_t k, std::size_t n) {
  gemm_panels<T, 128 / sizeof(T)>(a, 1, lda, b, c, m, k, n, 0);
}

// MI×MJ block of row-by-row dot products, each split over one vector's worth
// of lanes and reduced lane 0..L−1 at the end. The split depends only on k.
template <typename T, std::size_t MI, std::size_t MJ>
inline void dot_tile(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t k,
                     std::size_t ldc) {
  constexpr std::size_t L = 64 / sizeof(T);
  T acc[MI][MJ][L] = {};
  std::size_t t = 0;
  for (; t + L <= k; t += L)
    for (std::size_t i = 0; i < MI; ++i)
      for (std::size_t j = 0; j < MJ; ++j)
        for (std::size_t l = 0; l < L; ++l)
          acc[i][j][l] = madd(a[i * k + t + l], b[j * k + t + l], acc[i][j][l]);
  for (std::size_t i = 0; i < MI; ++i)
    for (std::size_t j = 0; j < MJ; ++j) {
      T s = 0;
      for (std::size_t l = 0; l < L; ++l) s += acc[i][j][l];
      for (std::size_t tt = t; tt < k; ++tt) s = madd(a[i * k + tt], b[j * k + tt], s);
      c[i * ldc + j] += s;
    }
}

template <typename T>
void gemm_nt_accumulate(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  constexpr std::size_t L = 64 / sizeof(T);
  if (k < 2 * L) {
    // Short rows: transpose B once and use the broadcast kernel.
    std::vector<T> bt(k * n);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t t = 0; t < k; ++t) bt[t * n + j] = b[j * k + t];
    gemm_accumulate(a, bt.data(), c, m, k, n);
    return;
  }
  const std::size_t m_main = m - m % 2, n_main = n - n % 4;
  for (std::size_t i = 0; i < m_main; i += 2) {
    for (std::size_t j = 0; j < n_main; j += 4) dot_tile<T, 2, 4>(a + i * k, b + j * k, c + i * n + j, k, n);
    for (std::size_t j = n_main; j < n; ++j) dot_tile<T, 2, 1>(a + i * k, b + j * k, c + i * n + j, k, n);
  }
  for (std::size_t i = m_main; i < m; ++i) {
    for (std::size_t j = 0; j < n_main; j += 4) dot_tile<T, 1, 4>(a + i * k, b + j * k, c + i * n + j, k, n);
    for (std::size_t j = n_main; j < n; ++j) dot_tile<T, 1, 1>(a + i * k, b + j * k, c + i * n + j, k, n);
  }
}

template <typename T>
Tensor<T> matmul_uncounted(const Tensor<T>& a, const Tensor<T>& b) {
  return matmul_impl(a, b, false, Layout::nn);
}

template <typename T>
Tensor<T> matmul_nt_uncounted(const Tensor<T>& a, const Tensor<T>& b) {
  return matmul_impl(a, b, false, Layout::nt);
}

template <typename T>
Tensor<T> matmul_tn_uncounted(const Tensor<T>& a, const Tensor<T>& b) {
  return matmul_impl(a, b, false, Layout::tn);
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  return matmul_impl(a, b, true, Layout::nn);
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != b.rank() || a.dim(a.rank() - 1) != b.dim(b.rank() - 1)) {
    throw DimensionError("matmul_nt shape mismatch: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  }
  return matmul_impl(a, b, true, Layout::nt);
}

template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != b.rank() || a.dim(a.rank() - 2) != b.dim(b.rank() - 2)) {
    throw DimensionError("matmul_tn shape mismatch: " + shape_str(a.shape()) + "^T x " +
                         shape_str(b.shape()));
  }
  return matmul_impl(a, b, true, Layout::tn);
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  MatDims d = mat_dims(a, "transpose");
  Tensor<T> out(mat_shape<T>(a.rank() == 3, d.batch, d.cols, d.rows));
  const T* src = a.ptr();
  T* dst = out.ptr();
  for (std::size_t bi = 0; bi < d.batch; ++bi) {
    const T* s = src + bi * d.rows * d.cols;
    T* o = dst + bi * d.rows * d.cols;
    constexpr std::size_t kTile = 16;
    for (std::size_t i0 = 0; i0 < d.rows; i0 += kTile) {
      const std::size_t i1 = std::min(d.rows, i0 + kTile);
      for (std::size_t j0 = 0; j0 < d.cols; j0 += kTile) {
        const std::size_t j1 = std::min(d.cols, j0 + kTile);
        for (std::size_t i = i0; i < i1; ++i)
          for (std::size_t j = j0; j < j1; ++j) o[j * d.rows + i] = s[i * d.cols + j];
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  if (x.rank() == 0) throw DimensionError("softmax_rows on a scalar");
  require_finite_values(x.data(), "softmax_rows input");
  const std::size_t n = x.dim(x.rank() - 1);
  const std::size_t rows = x.numel() / n;
  FlopCounter::add_softmax(x.numel());
  Tensor<T> out(x.shape());
  const T* src = x.ptr();
  T* dst = out.ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = src + r * n;
    T* o = dst + r * n;
    T mx = in[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
    T sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    const T inv = T{1} / sum;
    for (std::size_t j = 0; j < n; ++j) o[j] *= inv;
  }
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() == 0 || w.rank() != 2 || b.rank() != 1 || x.dim(x.rank() - 1) != w.dim(0) ||
      b.dim(0) != w.dim(1)) {
    throw DimensionError("linear shape mismatch: x " + shape_str(x.shape()) + ", w " +
                         shape_str(w.shape()) + ", b " + shape_str(b.shape()));
  }
  const std::size_t k = w.dim(0), n = w.dim(1);
  const std::size_t rows = x.numel() / k;
  Tensor<T> x2 = x.reshaped({rows, k});
  Tensor<T> out(Shape{rows, n});
  T* po = out.ptr();
  for (std::size_t i = 0; i < rows; ++i) std::copy(b.ptr(), b.ptr() + n, po + i * n);
  FlopCounter::add_macs(static_cast<std::uint64_t>(rows) * k * n);
  parallel_for(rows, std::max<std::size_t>(1, 65536 / std::max<std::size_t>(1, k * n)),
               [&](std::size_t r0, std::size_t r1) {
                 detail::gemm_accumulate(x2.ptr() + r0 * k, w.ptr(), po + r0 * n, r1 - r0, k, n);
               });
  Shape os = x.shape();
  os.back() = n;
  out.reshape(std::move(os));
  return out;
}

template <typename T>
Tensor<T> im2col(const Tensor<T>& x, std::size_t kh, std::size_t kw, std::size_t pad) {
  if (x.rank() != 3) throw DimensionError("im2col expects [c×h×w], got " + shape_str(x.shape()));
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h + 2 * pad < kh || w + 2 * pad < kw) {
    throw DimensionError("kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " larger than padded input " + shape_str(x.shape()));
  }
  const std::size_t oh = h + 2 * pad - kh + 1, ow = w + 2 * pad - kw + 1;
  Tensor<T> cols(Shape{c * kh * kw, oh * ow});
  T* pc = cols.ptr();
  const T* px = x.ptr();
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        T* row = pc + ((ci * kh + ky) * kw + kx) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy + ky) - static_cast<long>(pad);
          T* dst = row + oy * ow;
          if (iy < 0 || iy >= static_cast<long>(h)) {
            std::fill(dst, dst + ow, T{0});
            continue;
          }
          const T* src = px + (ci * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox + kx) - static_cast<long>(pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(w)) ? T{0} : src[ix];
          }
        }
      }
    }
  }
  return cols;
}

template <typename T>
Tensor<T> col2im(const Tensor<T>& cols, std::size_t c, std::size_t h, std::size_t w,
                 std::size_t kh, std::size_t kw, std::size_t pad) {
  const std::size_t oh = h + 2 * pad - kh + 1, ow = w + 2 * pad - kw + 1;
  if (cols.rank() != 2 || cols.dim(0) != c * kh * kw || cols.dim(1) != oh * ow) {
    throw DimensionError("col2im column shape " + shape_str(cols.shape()) + " inconsistent");
  }
  Tensor<T> x(Shape{c, h, w});
  T* px = x.ptr();
  const T* pc = cols.ptr();
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const T* row = pc + ((ci * kh + ky) * kw + kx) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          T* dst = px + (ci * h + static_cast<std::size_t>(iy)) * w;
          const T* src = row + oy * ow;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox + kx) - static_cast<long>(pad);
            if (ix >= 0 && ix < static_cast<long>(w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
  return x;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t pad) {
  if (x.rank() != 3 || kernel.rank() != 4 || bias.rank() != 1 || kernel.dim(1) != x.dim(0) ||
      bias.dim(0) != kernel.dim(0)) {
    throw DimensionError("conv2d shape mismatch: x " + shape_str(x.shape()) + ", kernel " +
                         shape_str(kernel.shape()) + ", bias " + shape_str(bias.shape()));
  }
  const std::size_t c_out = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw DimensionError("conv2d kernel extents must be odd, got " + shape_str(kernel.shape()));
  }
  Tensor<T> cols = im2col(x, kh, kw, pad);
  const std::size_t oh = x.dim(1) + 2 * pad - kh + 1, ow = x.dim(2) + 2 * pad - kw + 1;
  const std::size_t k = cols.dim(0), n = cols.dim(1);
  Tensor<T> out(Shape{c_out, oh, ow});
  T* po = out.ptr();
  for (std::size_t co = 0; co < c_out; ++co) std::fill(po + co * n, po + (co + 1) * n, bias[co]);
  parallel_for(c_out, std::max<std::size_t>(1, 65536 / std::max<std::size_t>(1, k * n)),
               [&](std::size_t r0, std::size_t r1) {
                 detail::gemm_accumulate(kernel.ptr() + r0 * k, cols.ptr(), po + r0 * n, r1 - r0,
                                         k, n);
               });
  return out;
}

template <typename T>
Tensor<T> pool2d(const Tensor<T>& x, std::size_t fy, std::size_t fx, PoolMode mode) {
  if (x.rank() != 3) throw DimensionError("pool2d expects [c×h×w], got " + shape_str(x.shape()));
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (fy == 0 || fx == 0 || h % fy != 0 || w % fx != 0) {
    throw DimensionError("pool2d factors " + std::to_string(fy) + "x" + std::to_string(fx) +
                         " do not divide " + shape_str(x.shape()));
  }
  const std::size_t oh = h / fy, ow = w / fx;
  Tensor<T> out(Shape{c, oh, ow});
  const T inv = T{1} / static_cast<T>(fy * fx);
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T acc = mode == PoolMode::max ? x.at(ci, oy * fy, ox * fx) : T{0};
        for (std::size_t dy = 0; dy < fy; ++dy) {
          for (std::size_t dx = 0; dx < fx; ++dx) {
            const T v = x.at(ci, oy * fy + dy, ox * fx + dx);
            acc = mode == PoolMode::max ? std::max(acc, v) : acc + v;
          }
        }
        out.at(ci, oy, ox) = mode == PoolMode::max ? acc : acc * inv;
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm on a scalar");
  const std::size_t d = x.dim(x.rank() - 1);
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm affine extents " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " vs feature size " + std::to_string(d));
  }
  Tensor<T> out(x.shape());
  const std::size_t rows = x.numel() / d;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.ptr() + r * d;
    T* o = out.ptr() + r * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += in[j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<T>(d);
    const T rstd = T{1} / std::sqrt(var + static_cast<T>(eps));
    for (std::size_t j = 0; j < d; ++j) o[j] = (in[j] - mean) * rstd * gamma[j] + beta[j];
  }
  return out;
}

template <typename R>
R gelu_impl(R x) {
  constexpr R k = R(0.7978845608028654);  // sqrt(2/pi)
  return R(0.5) * x * (R(1) + std::tanh(k * (x + R(0.044715) * x * x * x)));
}

template <typename R>
R gelu_derivative_impl(R x) {
  constexpr R k = R(0.7978845608028654);
  const R u = k * (x + R(0.044715) * x * x * x);
  const R t = std::tanh(u);
  const R du = k * (R(1) + R(3 * 0.044715) * x * x);
  return R(0.5) * (R(1) + t) + R(0.5) * x * (R(1) - t * t) * du;
}

double gelu(double x) { return gelu_impl(x); }
float gelu(float x) { return gelu_impl(x); }
double gelu_derivative(double x) { return gelu_derivative_impl(x); }
float gelu_derivative(float x) { return gelu_derivative_impl(x); }

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  Tensor<T> out(x.shape());
  const T* in = x.ptr();
  T* o = out.ptr();
  const std::size_t n = x.numel();
  switch (kind) {
    case Activation::gelu:
      for (std::size_t i = 0; i < n; ++i) o[i] = static_cast<T>(gelu(in[i]));
      break;
    case Activation::relu:
      for (std::size_t i = 0; i < n; ++i) o[i] = in[i] > T{0} ? in[i] : T{0};
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < n; ++i) o[i] = static_cast<T>(sigmoid(in[i]));
      break;
  }
  return out;
}

template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, std::size_t r) {
  if (x.rank() != 3 || r == 0 || x.dim(0) % (r * r) != 0) {
    throw DimensionError("pixel_shuffle needs channels divisible by r^2=" + std::to_string(r * r) +
                         ", got " + shape_str(x.shape()));
  }
  const std::size_t c = x.dim(0) / (r * r), h = x.dim(1), w = x.dim(2);
  Tensor<T> out(Shape{c, h * r, w * r});
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < r; ++j)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t xx = 0; xx < w; ++xx)
            out.at(ci, y * r + i, xx * r + j) = x.at(ci * r * r + i * r + j, y, xx);
  return out;
}

template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, std::size_t r) {
  if (x.rank() != 3 || r == 0 || x.dim(1) % r != 0 || x.dim(2) % r != 0) {
    throw DimensionError("pixel_unshuffle needs spatial extents divisible by r=" +
                         std::to_string(r) + ", got " + shape_str(x.shape()));
  }
  const std::size_t c = x.dim(0), h = x.dim(1) / r, w = x.dim(2) / r;
  Tensor<T> out(Shape{c * r * r, h, w});
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < r; ++j)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t xx = 0; xx < w; ++xx)
            out.at(ci * r * r + i * r + j, y, xx) = x.at(ci, y * r + i, xx * r + j);
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b[i];
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b[i];
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out = a;
  for (auto& v : out.data()) v *= s;
  return out;
}

#define GRL_INSTANTIATE_KERNELS(T)                                                              \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> matmul_tn(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> transpose(const Tensor<T>&);                                               \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                            \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t); \
  template Tensor<T> pool2d(const Tensor<T>&, std::size_t, std::size_t, PoolMode);              \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);  \
  template Tensor<T> activation(const Tensor<T>&, Activation);                                  \
  template Tensor<T> pixel_shuffle(const Tensor<T>&, std::size_t);                              \
  template Tensor<T> pixel_unshuffle(const Tensor<T>&, std::size_t);                            \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> scale(const Tensor<T>&, T);                                                \
  template Tensor<T> im2col(const Tensor<T>&, std::size_t, std::size_t, std::size_t);           \
  template Tensor<T> col2im(const Tensor<T>&, std::size_t, std::size_t, std::size_t,            \
                            std::size_t, std::size_t, std::size_t);                             \
  template void detail::gemm_accumulate(const T*, const T*, T*, std::size_t, std::size_t,       \
                                        std::size_t);                                           \
  template void detail::gemm_tn_accumulate(const T*, std::size_t, const T*, T*, std::size_t,    \
                                           std::size_t, std::size_t);                           \
  template void detail::gemm_nt_accumulate(const T*, const T*, T*, std::size_t, std::size_t,    \
                                           std::size_t);                                        \
  template Tensor<T> detail::matmul_uncounted(const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> detail::matmul_nt_uncounted(const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> detail::matmul_tn_uncounted(const Tensor<T>&, const Tensor<T>&);

GRL_INSTANTIATE_KERNELS(float)
GRL_INSTANTIATE_KERNELS(double)

#undef GRL_INSTANTIATE_KERNELS

}  // namespace grl::ops
