#include "grl/attention.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "grl/flops.hpp"

namespace grl {

std::string to_string(SimilarityMeasure m) {
  return m == SimilarityMeasure::dot ? "dot" : "negative_sq_euclidean";
}

SimilarityMeasure parse_similarity(std::string_view s) {
  if (s == "dot") return SimilarityMeasure::dot;
  if (s == "negative_sq_euclidean" || s == "euclidean") return SimilarityMeasure::negative_sq_euclidean;
  throw ConfigError("unknown similarity measure '" + std::string(s) + "'");
}

template <typename T>
Tensor<T> similarity_logits(const Tensor<T>& q, const Tensor<T>& k, SimilarityMeasure measure) {
  if (q.rank() != k.rank() || (q.rank() != 2 && q.rank() != 3) ||
      q.dim(q.rank() - 1) != k.dim(k.rank() - 1) || (q.rank() == 3 && q.dim(0) != k.dim(0))) {
    throw DimensionError("similarity_logits shape mismatch: Q " + shape_str(q.shape()) + ", K " +
                         shape_str(k.shape()));
  }
  const std::size_t d = q.dim(q.rank() - 1);
  const T s = T{1} / std::sqrt(static_cast<T>(d));
  if (measure == SimilarityMeasure::dot) {
    Tensor<T> out = ops::matmul_nt(q, k);
    for (auto& v : out.data()) v *= s;
    return out;
  }
  const bool batched = q.rank() == 3;
  const std::size_t B = batched ? q.dim(0) : 1;
  const std::size_t n = q.dim(q.rank() - 2), m = k.dim(k.rank() - 2);
  FlopCounter::add_macs(static_cast<std::uint64_t>(B) * n * m * d);
  Tensor<T> out(batched ? Shape{B, n, m} : Shape{n, m});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < n; ++i) {
      const T* qi = q.ptr() + (b * n + i) * d;
      for (std::size_t j = 0; j < m; ++j) {
        const T* kj = k.ptr() + (b * m + j) * d;
        T acc = 0;
        for (std::size_t c = 0; c < d; ++c) {
          const T diff = qi[c] - kj[c];
          acc += diff * diff;
        }
        out[(b * n + i) * m + j] = -acc * s;
      }
    }
  return out;
}

void AnchorSpec::validate() const {
  if (down_factor < 1) throw ConfigError("anchor down factor must be >= 1");
}

PoolFactors anchor_pool_factors(std::size_t sh, std::size_t sw, std::size_t s) {
  return {std::min(s, sh), std::min(s, sw)};
}

template <typename T>
Tensor<T> exact_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                          SimilarityMeasure measure) {
  if (k.rank() != v.rank() || k.dim(k.rank() - 2) != v.dim(v.rank() - 2)) {
    throw DimensionError("exact_attention: K " + shape_str(k.shape()) + " and V " +
                         shape_str(v.shape()) + " row counts differ");
  }
  return ops::matmul(ops::softmax_rows(similarity_logits(q, k, measure)), v);
}

template <typename T>
Tensor<T> anchored_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                             const Tensor<T>& a, SimilarityMeasure measure) {
  if (k.rank() != v.rank() || k.dim(k.rank() - 2) != v.dim(v.rank() - 2)) {
    throw DimensionError("anchored_attention: K " + shape_str(k.shape()) + " and V " +
                         shape_str(v.shape()) + " row counts differ");
  }
  if (a.rank() != k.rank() || a.dim(a.rank() - 2) > k.dim(k.rank() - 2)) {
    throw ConfigError("anchored_attention: " + shape_str(a.shape()) +
                      " anchors must not outnumber the " + std::to_string(k.dim(k.rank() - 2)) +
                      " tokens");
  }
  Tensor<T> z = ops::matmul(ops::softmax_rows(similarity_logits(a, k, measure)), v);
  return ops::matmul(ops::softmax_rows(similarity_logits(q, a, measure)), z);
}

template <typename T>
Tensor<T> compute_anchors(const Tensor<T>& stripe, const AnchorSpec& spec, const Tensor<T>& proj_w,
                          const Tensor<T>& proj_b) {
  spec.validate();
  if (stripe.rank() != 3) {
    throw DimensionError("compute_anchors expects [c×h×w], got " + shape_str(stripe.shape()));
  }
  const PoolFactors f = anchor_pool_factors(stripe.dim(1), stripe.dim(2), spec.down_factor);
  Tensor<T> pooled = ops::pool2d(stripe, f.fy, f.fx, spec.pool);
  const std::size_t c = pooled.dim(0), na = pooled.dim(1) * pooled.dim(2);
  Tensor<T> tokens = ops::transpose(pooled.reshaped({c, na}));
  return ops::linear(tokens, proj_w, proj_b);
}

ad::Indices relative_position_index(std::size_t size, std::size_t heads) {
  const std::size_t n = size * size, span = 2 * size - 1;
  auto idx = std::make_shared<std::vector<std::uint32_t>>(heads * n * n);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t dy = i / size + size - 1 - j / size;
        const std::size_t dx = i % size + size - 1 - j % size;
        (*idx)[(h * n + i) * n + j] = static_cast<std::uint32_t>((dy * span + dx) * heads + h);
      }
  return idx;
}

template <typename T>
Tensor<T> shift_mask(const PartitionPlan& plan) {
  const std::size_t G = plan.groups(), n = plan.group_size();
  const auto& label = plan.wrap_label();
  Tensor<T> mask(Shape{G, n, n});
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (label[g * n + i] != label[g * n + j]) mask.at(g, i, j) = T{-1e4};
  return mask;
}

template <typename T>
ad::Var<T> window_attention(ad::Var<T> tokens, std::size_t h, std::size_t w,
                            const WindowSpec& spec, std::size_t heads,
                            const WindowAttentionWeights<T>& weights) {
  const std::size_t c = tokens.shape().back();
  if (heads == 0 || c % heads != 0) {
    throw ConfigError("window attention: " + std::to_string(heads) + " heads do not divide " +
                      std::to_string(c) + " channels");
  }
  PartitionPlan plan(h, w, spec);
  const std::size_t G = plan.groups(), n = plan.group_size();
  auto grouped = ad::gather_rows(tokens, plan.source_index(), {G, n, c});
  auto qkv = ad::linear(grouped, weights.qkv_w, weights.qkv_b);
  auto q = ad::split_heads(ad::slice_last(qkv, 0, c), heads);
  auto k = ad::split_heads(ad::slice_last(qkv, c, 2 * c), heads);
  auto v = ad::split_heads(ad::slice_last(qkv, 2 * c, 3 * c), heads);
  auto logits = ad::similarity(q, k, SimilarityMeasure::dot);
  auto bias = ad::gather_flat(weights.rel_bias, relative_position_index(spec.size, heads),
                              {heads, n, n});
  logits = ad::add_head_bias(logits, bias);
  if (spec.shift > 0) logits = ad::add_group_mask(logits, shift_mask<T>(plan), heads);
  auto out = ad::merge_heads(ad::matmul(ad::softmax_rows(logits), v), heads);
  return ad::gather_rows(out, plan.merge_index(), {h * w, c});
}

namespace {

Tensor<double> head_slice(const Tensor<double>& x, std::size_t b) {
  const std::size_t n = x.dim(1), d = x.dim(2);
  std::vector<double> data(x.ptr() + b * n * d, x.ptr() + (b + 1) * n * d);
  return Tensor<double>(Shape{n, d}, std::move(data));
}

}  // namespace

template <typename T>
ad::Var<T> anchored_stripe_attention(ad::Var<T> tokens, std::size_t h, std::size_t w,
                                     const StripeSpec& stripe, const AnchorSpec& anchor,
                                     std::size_t heads, SimilarityMeasure measure,
                                     const StripeAttentionWeights<T>& weights,
                                     StripeProbe* probe) {
  anchor.validate();
  const std::size_t c = tokens.shape().back();
  if (heads == 0 || c % heads != 0) {
    throw ConfigError("stripe attention: " + std::to_string(heads) + " heads do not divide " +
                      std::to_string(c) + " channels");
  }
  PartitionPlan plan(h, w, stripe, anchor.down_factor);
  const std::size_t G = plan.groups(), n = plan.group_size();
  const std::size_t sh = plan.grid_rows(), sw = plan.grid_cols();
  const PoolFactors f = anchor_pool_factors(sh, sw, anchor.down_factor);
  if (sh % f.fy != 0 || sw % f.fx != 0) {
    throw ConfigError("anchor pooling " + std::to_string(f.fy) + "x" + std::to_string(f.fx) +
                      " does not tile a " + std::to_string(sh) + "x" + std::to_string(sw) +
                      " stripe");
  }
  const std::size_t na = (sh / f.fy) * (sw / f.fx);

  auto grouped = ad::gather_rows(tokens, plan.source_index(), {G, n, c});
  auto anchors = ad::linear(ad::pool_tokens(grouped, sh, sw, f.fy, f.fx, anchor.pool),
                            weights.anchor_w, weights.anchor_b);
  auto qkv = ad::linear(grouped, weights.qkv_w, weights.qkv_b);
  auto q = ad::split_heads(ad::slice_last(qkv, 0, c), heads);
  auto k = ad::split_heads(ad::slice_last(qkv, c, 2 * c), heads);
  auto v = ad::split_heads(ad::slice_last(qkv, 2 * c, 3 * c), heads);
  auto a = ad::split_heads(anchors, heads);

  if (probe != nullptr) {
    probe->measure = measure;
    const Tensor<double> qd = q.value().template cast<double>();
    const Tensor<double> kd = k.value().template cast<double>();
    const Tensor<double> ad_ = a.value().template cast<double>();
    for (std::size_t b = 0; b < G * heads; ++b) {
      probe->entries.push_back({head_slice(qd, b), head_slice(kd, b), head_slice(ad_, b)});
    }
  }

  auto m_d = ad::softmax_rows(ad::similarity(a, k, measure));  // [G·h×na×n]
  auto z = ad::matmul(m_d, v);                                  // [G·h×na×dh]
  auto m_e = ad::softmax_rows(ad::similarity(q, a, measure));  // [G·h×n×na]
  auto y = ad::merge_heads(ad::matmul(m_e, z), heads);
  y = ad::linear(y, weights.proj_w, weights.proj_b);
  return ad::gather_rows(y, plan.merge_index(), {h * w, c});
}

namespace {

template <typename T>
ad::Var<T> fmap_tokens(ad::Tape<T>& tape, const Tensor<T>& fmap) {
  if (fmap.rank() != 3) throw DimensionError("expected [c×h×w], got " + shape_str(fmap.shape()));
  return ad::chw_to_tokens(tape.constant(fmap));
}

}  // namespace

template <typename T>
Tensor<T> window_attention(const Tensor<T>& fmap, const WindowSpec& spec, std::size_t heads,
                           const WindowAttentionParams<T>& params) {
  ad::Tape<T> tape(false);
  auto x = fmap_tokens(tape, fmap);
  WindowAttentionWeights<T> wts{tape.constant(params.qkv_w), tape.constant(params.qkv_b),
                                tape.constant(params.rel_bias)};
  auto y = window_attention(x, fmap.dim(1), fmap.dim(2), spec, heads, wts);
  return ad::tokens_to_chw(y, fmap.dim(1), fmap.dim(2)).value();
}

template <typename T>
Tensor<T> anchored_stripe_attention(const Tensor<T>& fmap, const StripeSpec& stripe,
                                    const AnchorSpec& anchor, std::size_t heads,
                                    SimilarityMeasure measure,
                                    const StripeAttentionParams<T>& params, StripeProbe* probe) {
  ad::Tape<T> tape(false);
  auto x = fmap_tokens(tape, fmap);
  StripeAttentionWeights<T> wts{tape.constant(params.qkv_w),    tape.constant(params.qkv_b),
                                tape.constant(params.anchor_w), tape.constant(params.anchor_b),
                                tape.constant(params.proj_w),   tape.constant(params.proj_b)};
  auto y = anchored_stripe_attention(x, fmap.dim(1), fmap.dim(2), stripe, anchor, heads, measure,
                                     wts, probe);
  return ad::tokens_to_chw(y, fmap.dim(1), fmap.dim(2)).value();
}

#define GRL_INSTANTIATE_ATTENTION(T)                                                              \
  template Tensor<T> similarity_logits(const Tensor<T>&, const Tensor<T>&, SimilarityMeasure);    \
  template Tensor<T> exact_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,        \
                                     SimilarityMeasure);                                          \
  template Tensor<T> anchored_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                        const Tensor<T>&, SimilarityMeasure);                     \
  template Tensor<T> compute_anchors(const Tensor<T>&, const AnchorSpec&, const Tensor<T>&,       \
                                     const Tensor<T>&);                                           \
  template Tensor<T> shift_mask(const PartitionPlan&);                                            \
  template ad::Var<T> window_attention(ad::Var<T>, std::size_t, std::size_t, const WindowSpec&,   \
                                       std::size_t, const WindowAttentionWeights<T>&);            \
  template ad::Var<T> anchored_stripe_attention(ad::Var<T>, std::size_t, std::size_t,             \
                                                const StripeSpec&, const AnchorSpec&, std::size_t, \
                                                SimilarityMeasure,                                \
                                                const StripeAttentionWeights<T>&, StripeProbe*);  \
  template Tensor<T> window_attention(const Tensor<T>&, const WindowSpec&, std::size_t,           \
                                      const WindowAttentionParams<T>&);                           \
  template Tensor<T> anchored_stripe_attention(const Tensor<T>&, const StripeSpec&,               \
                                               const AnchorSpec&, std::size_t, SimilarityMeasure, \
                                               const StripeAttentionParams<T>&, StripeProbe*);

GRL_INSTANTIATE_ATTENTION(float)
GRL_INSTANTIATE_ATTENTION(double)

#undef GRL_INSTANTIATE_ATTENTION

}  // namespace grl
