#pragma once

#include <cstddef>

#include "grl/tensor.hpp"

// Plain tensor operators. Every function here is pure: it reads its inputs
// and returns a freshly allocated result. Contractions and softmax report to
// the active FlopCounter.
namespace grl::ops {

enum class Activation { gelu, relu, sigmoid };
enum class PoolMode { avg, max };

// C = A·B for [m×k]·[k×n], or batched [b×m×k]·[b×k×n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// A·Bᵀ over the last two axes: [..×m×k]·[..×n×k] -> [..×m×n].
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);

// Aᵀ·B over the last two axes: [..×k×m]·[..×k×n] -> [..×m×n].
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b);

// Swaps the last two axes of a rank-2 or rank-3 tensor.
template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

// Softmax along the last axis with per-row max subtraction.
// Throws NumericError on non-finite input.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);

// X·W + b with X of shape [..×d_in], W [d_in×d_out], b [d_out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

// 2-D cross-correlation (no kernel flip), stride 1, zero padding.
// X [c_in×h×w], K [c_out×c_in×kh×kw], bias [c_out]; kh and kw odd.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t pad);

// Non-overlapping pooling of [c×h×w] by fy rows and fx columns.
template <typename T>
Tensor<T> pool2d(const Tensor<T>& x, std::size_t fy, std::size_t fx, PoolMode mode);

template <typename T>
Tensor<T> pool2d(const Tensor<T>& x, std::size_t s, PoolMode mode) {
  return pool2d(x, s, s, mode);
}

// Normalizes each row (last axis) to zero mean, unit variance, then applies
// gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = 1e-5);

// Elementwise. GELU is the tanh approximation.
template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind);

// [c·r²×h×w] -> [c×(h·r)×(w·r)], out(c, y·r+i, x·r+j) = in(c·r²+i·r+j, y, x).
template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, std::size_t r);

template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, std::size_t r);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s);

// Im2col for stride-1 convolutions: [c×h×w] -> [(c·kh·kw)×(h'·w')].
template <typename T>
Tensor<T> im2col(const Tensor<T>& x, std::size_t kh, std::size_t kw, std::size_t pad);

// Adjoint of im2col: scatters-adds columns back into a [c×h×w] map.
template <typename T>
Tensor<T> col2im(const Tensor<T>& cols, std::size_t c, std::size_t h, std::size_t w,
                 std::size_t kh, std::size_t kw, std::size_t pad);

double gelu(double x);
float gelu(float x);
double gelu_derivative(double x);
float gelu_derivative(float x);
double sigmoid(double x);
float sigmoid(float x);

void require_finite_values(std::span<const float> v, const char* where);
void require_finite_values(std::span<const double> v, const char* where);

namespace detail {

// C += A·B on raw row-major buffers; not counted.
template <typename T>
void gemm_accumulate(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);
// C[m×n] += Aᵀ·B where A is stored k×lda and its first m columns are used.
template <typename T>
void gemm_tn_accumulate(const T* a, std::size_t lda, const T* b, T* c, std::size_t m,
                        std::size_t k, std::size_t n);
// C[m×n] += A·Bᵀ with B stored n×k.
template <typename T>
void gemm_nt_accumulate(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);

// Uncounted variants used by backward passes.
template <typename T>
Tensor<T> matmul_uncounted(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> matmul_nt_uncounted(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> matmul_tn_uncounted(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace detail

}  // namespace grl::ops
