#pragma once

#include <cstddef>
#include <vector>

#include "grl/autodiff.hpp"
#include "grl/kernels.hpp"
#include "grl/partition.hpp"
#include "grl/similarity.hpp"
#include "grl/tensor.hpp"

namespace grl {

// Anchors summarize a stripe: pool by the down factor, then project linearly.
// The projection weights live with the attention parameters.
struct AnchorSpec {
  ops::PoolMode pool = ops::PoolMode::avg;
  std::size_t down_factor = 4;

  void validate() const;
};

// Per-axis pooling factors for a stripe grid of sh×sw cells. Thin stripes are
// never pooled below one cell: (min(s, sh), min(s, sw)).
struct PoolFactors {
  std::size_t fy;
  std::size_t fx;
};
PoolFactors anchor_pool_factors(std::size_t sh, std::size_t sw, std::size_t s);

// softmax(sim(Q, K)) · V. K and V must have equal row counts.
template <typename T>
Tensor<T> exact_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                          SimilarityMeasure measure = SimilarityMeasure::dot);

// Anchored attention Y = M_e · (M_d · V) with
//   M_d = softmax(sim(A, K))  [N_a×N]
//   M_e = softmax(sim(Q, A))  [N×N_a]
// evaluated right to left; no N×N array is ever formed.
// Throws ConfigError when A has more rows than K.
template <typename T>
Tensor<T> anchored_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                             const Tensor<T>& a,
                             SimilarityMeasure measure = SimilarityMeasure::dot);

// Pools a stripe feature map [c×h_s×w_s] by anchor_pool_factors, flattens to
// tokens and applies X·W + b. Returns [N_a×d].
template <typename T>
Tensor<T> compute_anchors(const Tensor<T>& stripe, const AnchorSpec& spec, const Tensor<T>& proj_w,
                          const Tensor<T>& proj_b);

// Learnable weights of window attention over c channels.
//   qkv_w [c×3c], qkv_b [3c], rel_bias [(2·size−1)²×heads]
template <typename T>
struct WindowAttentionWeights {
  ad::Var<T> qkv_w, qkv_b, rel_bias;
};

// Learnable weights of anchored stripe attention over c channels.
//   qkv_w [c×3c], qkv_b [3c], anchor_w [c×c], anchor_b [c], proj_w [c×c], proj_b [c]
template <typename T>
struct StripeAttentionWeights {
  ad::Var<T> qkv_w, qkv_b, anchor_w, anchor_b, proj_w, proj_b;
};

template <typename T>
struct WindowAttentionParams {
  Tensor<T> qkv_w, qkv_b, rel_bias;
};

template <typename T>
struct StripeAttentionParams {
  Tensor<T> qkv_w, qkv_b, anchor_w, anchor_b, proj_w, proj_b;
};

// Per (stripe, head) queries, keys and anchors captured during a forward pass.
struct StripeProbe {
  struct Entry {
    Tensor<double> q;  // [N×dh]
    Tensor<double> k;  // [N×dh]
    Tensor<double> a;  // [N_a×dh]
  };
  std::vector<Entry> entries;
  SimilarityMeasure measure = SimilarityMeasure::dot;
};

// Relative-position lookup: for window tokens i, j and head h, the flat index
// into a [(2·size−1)²×heads] table.
ad::Indices relative_position_index(std::size_t size, std::size_t heads);

// Additive logit mask [G×n×n] for a shifted partition: −1e4 between tokens
// whose rows or columns were wrapped differently by the roll.
template <typename T>
Tensor<T> shift_mask(const PartitionPlan& plan);

// Multi-head window attention on tokens [(h·w)×c] of an h×w map.
template <typename T>
ad::Var<T> window_attention(ad::Var<T> tokens, std::size_t h, std::size_t w,
                            const WindowSpec& spec, std::size_t heads,
                            const WindowAttentionWeights<T>& weights);

// Multi-head anchored stripe attention on tokens [(h·w)×c] of an h×w map.
// Anchors come from the stripe's input features, not from the projected keys.
template <typename T>
ad::Var<T> anchored_stripe_attention(ad::Var<T> tokens, std::size_t h, std::size_t w,
                                     const StripeSpec& stripe, const AnchorSpec& anchor,
                                     std::size_t heads, SimilarityMeasure measure,
                                     const StripeAttentionWeights<T>& weights,
                                     StripeProbe* probe = nullptr);

// Tensor-level conveniences over fmap [c×h×w]; no gradients are recorded.
template <typename T>
Tensor<T> window_attention(const Tensor<T>& fmap, const WindowSpec& spec, std::size_t heads,
                           const WindowAttentionParams<T>& params);

template <typename T>
Tensor<T> anchored_stripe_attention(const Tensor<T>& fmap, const StripeSpec& stripe,
                                    const AnchorSpec& anchor, std::size_t heads,
                                    SimilarityMeasure measure,
                                    const StripeAttentionParams<T>& params,
                                    StripeProbe* probe = nullptr);

}  // namespace grl
