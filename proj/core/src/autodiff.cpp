#include "grl/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace grl::ad {

namespace {

template <typename T>
void require_same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw ConsistencyError("operands recorded on different tapes");
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.ptr();
  const T* s = src.ptr();
  for (std::size_t i = 0; i < dst.numel(); ++i) d[i] += s[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Var<T> Tape<T>::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var<T>{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::variable(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = recording_;
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::parameter(const Tensor<T>& value, std::size_t slot) {
  if (auto it = slots_.find(slot); it != slots_.end()) return Var<T>{this, it->second};
  Node n;
  n.external = &value;
  n.requires_grad = recording_;
  n.slot = slot;
  Var<T> v = push(std::move(n));
  slots_.emplace(slot, v.id);
  return v;
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn,
                       std::vector<Tensor<T>> saved) {
  Node n;
  n.value = std::move(value);
  if (recording_) {
    for (const Var<T>& in : inputs) {
      if (in.tape != this) throw ConsistencyError("input recorded on a different tape");
      n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
    }
  }
  if (n.requires_grad) {
    n.fn = std::move(fn);
    n.saved = std::move(saved);
  }
  return push(std::move(n));
}

template <typename T>
Tensor<T>& Tape<T>::grad(std::uint32_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor<T>(value(id).shape());
    n.has_grad = true;
  }
  return n.grad;
}

template <typename T>
void Tape<T>::accumulate(std::uint32_t id, const Tensor<T>& g) {
  if (!nodes_[id].requires_grad) return;
  accumulate(id, Tensor<T>(g));
}

template <typename T>
void Tape<T>::accumulate(std::uint32_t id, Tensor<T>&& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  const Tensor<T>& v = value(id);
  if (v.numel() != g.numel()) {
    throw ConsistencyError("gradient of size " + std::to_string(g.numel()) +
                           " for node of shape " + shape_str(v.shape()));
  }
  if (!n.has_grad) {
    // First contribution: adopt the buffer instead of adding into zeros.
    g.reshape(v.shape());
    n.grad = std::move(g);
    n.has_grad = true;
    return;
  }
  add_into(n.grad, g);
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (loss.tape != this) throw ConsistencyError("loss recorded on a different tape");
  if (value(loss.id).numel() != 1) {
    throw DimensionError("backward needs a scalar loss, got " + shape_str(value(loss.id).shape()));
  }
  if (!nodes_[loss.id].requires_grad) return;
  grad(loss.id).fill(T{1});
  for (std::uint32_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.has_grad && n.fn) n.fn(*this, id);
  }
}

template <typename T>
std::vector<std::pair<std::size_t, const Tensor<T>*>> Tape<T>::parameter_grads() const {
  std::vector<std::pair<std::size_t, const Tensor<T>*>> out;
  for (const Node& n : nodes_) {
    if (n.slot != static_cast<std::size_t>(-1) && n.has_grad) out.emplace_back(n.slot, &n.grad);
  }
  return out;
}

template <typename T>
Tensor<T> Tape<T>::grad_of(Var<T> v) const {
  const Node& n = nodes_[v.id];
  return n.has_grad ? n.grad : Tensor<T>(value(v.id).shape());
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  Tensor<T> out = ops::add(a.value(), b.value());
  const auto ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad(self);
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  Tensor<T> out = ops::sub(a.value(), b.value());
  const auto ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad(self);
    t.accumulate(ia, g);
    if (t.requires_grad(ib)) t.accumulate(ib, ops::scale(g, T{-1}));
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.shape() != bv.shape()) {
    throw DimensionError("mul shape mismatch: " + shape_str(av.shape()) + " vs " +
                         shape_str(bv.shape()));
  }
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
  const auto ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& x = t.value(ia);
    const Tensor<T>& y = t.value(ib);
    if (t.requires_grad(ia)) {
      Tensor<T>& ga = t.grad(ia);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * y[i];
    }
    if (t.requires_grad(ib)) {
      Tensor<T>& gb = t.grad(ib);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * x[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  const auto ia = a.id;
  return a.tape->record(ops::scale(a.value(), s), {a}, [ia, s](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * s;
  });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  const auto ia = a.id;
  return a.tape->record(a.value().reshaped(std::move(shape)), {a},
                        [ia](Tape<T>& t, std::uint32_t self) { t.accumulate(ia, t.grad(self)); });
}

// ---------------------------------------------------------------------------
// Contractions

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  const auto ia = a.id, ib = b.id;
  return a.tape->record(ops::matmul(a.value(), b.value()), {a, b},
                        [ia, ib](Tape<T>& t, std::uint32_t self) {
                          const Tensor<T>& g = t.grad(self);
                          if (t.requires_grad(ia))
                            t.accumulate(ia, ops::detail::matmul_nt_uncounted(g, t.value(ib)));
                          if (t.requires_grad(ib))
                            t.accumulate(ib, ops::detail::matmul_tn_uncounted(t.value(ia), g));
                        });
}

template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  const auto ia = a.id, ib = b.id;
  return a.tape->record(ops::matmul_nt(a.value(), b.value()), {a, b},
                        [ia, ib](Tape<T>& t, std::uint32_t self) {
                          const Tensor<T>& g = t.grad(self);
                          if (t.requires_grad(ia))
                            t.accumulate(ia, ops::detail::matmul_uncounted(g, t.value(ib)));
                          if (t.requires_grad(ib))
                            t.accumulate(ib, ops::detail::matmul_tn_uncounted(g, t.value(ia)));
                        });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  require_same_tape(x, w);
  require_same_tape(x, b);
  const auto ix = x.id, iw = w.id, ib = b.id;
  return x.tape->record(
      ops::linear(x.value(), w.value(), b.value()), {x, w, b},
      [ix, iw, ib](Tape<T>& t, std::uint32_t self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& xv = t.value(ix);
        const Tensor<T>& wv = t.value(iw);
        const std::size_t k = wv.dim(0), n = wv.dim(1);
        const std::size_t rows = xv.numel() / k;
        const Tensor<T> g2 = g.reshaped({rows, n});
        if (t.requires_grad(ix)) {
          t.accumulate(ix, ops::detail::matmul_nt_uncounted(g2, wv));
        }
        if (t.requires_grad(iw)) {
          t.accumulate(iw, ops::detail::matmul_tn_uncounted(xv.reshaped({rows, k}), g2));
        }
        if (t.requires_grad(ib)) {
          Tensor<T>& gb = t.grad(ib);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) gb[j] += g2[r * n + j];
        }
      });
}

template <typename T>
Var<T> softmax_rows(Var<T> x) {
  const auto ix = x.id;
  return x.tape->record(ops::softmax_rows(x.value()), {x}, [ix](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& y = t.value(self);
    Tensor<T>& gx = t.grad(ix);
    const std::size_t n = y.dim(y.rank() - 1);
    const std::size_t rows = y.numel() / n;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yr = y.ptr() + r * n;
      const T* gr = g.ptr() + r * n;
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
      T* o = gx.ptr() + r * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += yr[j] * (gr[j] - dot);
    }
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, double eps) {
  require_same_tape(x, gamma);
  require_same_tape(x, beta);
  const Tensor<T>& xv = x.value();
  const std::size_t d = xv.dim(xv.rank() - 1);
  const std::size_t rows = xv.numel() / d;
  Tensor<T> out = ops::layer_norm(xv, gamma.value(), beta.value(), eps);
  Tensor<T> xhat(xv.shape());
  Tensor<T> rstd(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.ptr() + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<T>(d);
    rstd[r] = T{1} / std::sqrt(var + static_cast<T>(eps));
    for (std::size_t j = 0; j < d; ++j) xhat[r * d + j] = (in[j] - mu) * rstd[r];
  }
  std::vector<Tensor<T>> saved;
  saved.push_back(std::move(xhat));
  saved.push_back(std::move(rstd));
  const auto ix = x.id, ig = gamma.id, ib = beta.id;
  return x.tape->record(
      std::move(out), {x, gamma, beta},
      [ix, ig, ib, d, rows](Tape<T>& t, std::uint32_t self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& xh = t.saved(self, 0);
        const Tensor<T>& rs = t.saved(self, 1);
        const Tensor<T>& gm = t.value(ig);
        if (t.requires_grad(ig)) {
          Tensor<T>& gg = t.grad(ig);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xh[r * d + j];
        }
        if (t.requires_grad(ib)) {
          Tensor<T>& gb = t.grad(ib);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
        }
        if (t.requires_grad(ix)) {
          Tensor<T>& gx = t.grad(ix);
          for (std::size_t r = 0; r < rows; ++r) {
            T m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < d; ++j) {
              const T dxh = g[r * d + j] * gm[j];
              m1 += dxh;
              m2 += dxh * xh[r * d + j];
            }
            m1 /= static_cast<T>(d);
            m2 /= static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const T dxh = g[r * d + j] * gm[j];
              gx[r * d + j] += rs[r] * (dxh - m1 - xh[r * d + j] * m2);
            }
          }
        }
      },
      std::move(saved));
}

template <typename T>
Var<T> activation(Var<T> x, ops::Activation kind) {
  const auto ix = x.id;
  return x.tape->record(
      ops::activation(x.value(), kind), {x}, [ix, kind](Tape<T>& t, std::uint32_t self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& xv = t.value(ix);
        const Tensor<T>& y = t.value(self);
        Tensor<T>& gx = t.grad(ix);
        const std::size_t n = g.numel();
        switch (kind) {
          case ops::Activation::gelu:
            for (std::size_t i = 0; i < n; ++i)
              gx[i] += g[i] * static_cast<T>(ops::gelu_derivative(xv[i]));
            break;
          case ops::Activation::relu:
            for (std::size_t i = 0; i < n; ++i) gx[i] += xv[i] > T{0} ? g[i] : T{0};
            break;
          case ops::Activation::sigmoid:
            for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * y[i] * (T{1} - y[i]);
            break;
        }
      });
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> kernel, Var<T> bias, std::size_t pad) {
  require_same_tape(x, kernel);
  require_same_tape(x, bias);
  const Tensor<T>& xv = x.value();
  const Tensor<T>& kv = kernel.value();
  Tensor<T> out = ops::conv2d(xv, kv, bias.value(), pad);
  std::vector<Tensor<T>> saved;
  if (x.tape->recording()) saved.push_back(ops::im2col(xv, kv.dim(2), kv.dim(3), pad));
  const auto ix = x.id, ik = kernel.id, ib = bias.id;
  return x.tape->record(
      std::move(out), {x, kernel, bias},
      [ix, ik, ib, pad](Tape<T>& t, std::uint32_t self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& cols = t.saved(self, 0);
        const Tensor<T>& kv = t.value(ik);
        const std::size_t c_out = kv.dim(0), kh = kv.dim(2), kw = kv.dim(3);
        const std::size_t n = g.dim(1) * g.dim(2);
        const Tensor<T> g2 = g.reshaped({c_out, n});
        if (t.requires_grad(ik)) {
          t.accumulate(ik, ops::detail::matmul_nt_uncounted(g2, cols));
        }
        if (t.requires_grad(ib)) {
          Tensor<T>& gb = t.grad(ib);
          for (std::size_t co = 0; co < c_out; ++co) {
            T s = 0;
            for (std::size_t j = 0; j < n; ++j) s += g2[co * n + j];
            gb[co] += s;
          }
        }
        if (t.requires_grad(ix)) {
          const Tensor<T>& xv = t.value(ix);
          const Tensor<T> k2 = kv.reshaped({c_out, kv.numel() / c_out});
          const Tensor<T> dcols = ops::detail::matmul_tn_uncounted(k2, g2);
          t.accumulate(ix, ops::col2im(dcols, xv.dim(0), xv.dim(1), xv.dim(2), kh, kw, pad));
        }
      },
      std::move(saved));
}

template <typename T>
Var<T> pixel_shuffle(Var<T> x, std::size_t r) {
  const auto ix = x.id;
  return x.tape->record(ops::pixel_shuffle(x.value(), r), {x},
                        [ix, r](Tape<T>& t, std::uint32_t self) {
                          t.accumulate(ix, ops::pixel_unshuffle(t.grad(self), r));
                        });
}

template <typename T>
Var<T> similarity(Var<T> q, Var<T> k, SimilarityMeasure measure) {
  require_same_tape(q, k);
  const auto iq = q.id, ik = k.id;
  return q.tape->record(
      similarity_logits(q.value(), k.value(), measure), {q, k},
      [iq, ik, measure](Tape<T>& t, std::uint32_t self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& qv = t.value(iq);
        const Tensor<T>& kv = t.value(ik);
        const std::size_t d = qv.dim(qv.rank() - 1);
        const T s = T{1} / std::sqrt(static_cast<T>(d));
        if (measure == SimilarityMeasure::dot) {
          if (t.requires_grad(iq))
            t.accumulate(iq, ops::scale(ops::detail::matmul_uncounted(g, kv), s));
          if (t.requires_grad(ik))
            t.accumulate(ik, ops::scale(ops::detail::matmul_tn_uncounted(g, qv), s));
          return;
        }
        // L_ij = -s * |q_i - k_j|^2
        const bool batched = qv.rank() == 3;
        const std::size_t B = batched ? qv.dim(0) : 1;
        const std::size_t n = qv.dim(qv.rank() - 2), m = kv.dim(kv.rank() - 2);
        if (t.requires_grad(iq)) {
          Tensor<T> gq = ops::detail::matmul_uncounted(g, kv);  // G·K
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < n; ++i) {
              T rs = 0;
              for (std::size_t j = 0; j < m; ++j) rs += g[(b * n + i) * m + j];
              for (std::size_t c = 0; c < d; ++c) {
                const std::size_t o = (b * n + i) * d + c;
                gq[o] = T{-2} * s * (rs * qv[o] - gq[o]);
              }
            }
          t.accumulate(iq, gq);
        }
        if (t.requires_grad(ik)) {
          Tensor<T> gk = ops::detail::matmul_tn_uncounted(g, qv);  // Gᵀ·Q
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < m; ++j) {
              T cs = 0;
              for (std::size_t i = 0; i < n; ++i) cs += g[(b * n + i) * m + j];
              for (std::size_t c = 0; c < d; ++c) {
                const std::size_t o = (b * m + j) * d + c;
                gk[o] = T{2} * s * (gk[o] - cs * kv[o]);
              }
            }
          t.accumulate(ik, gk);
        }
      });
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Var<T> chw_to_tokens(Var<T> x) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 3) throw DimensionError("chw_to_tokens expects [C×H×W], got " + shape_str(xv.shape()));
  const std::size_t c = xv.dim(0), hw = xv.dim(1) * xv.dim(2);
  Tensor<T> out = ops::transpose(xv.reshaped({c, hw}));
  const auto ix = x.id;
  return x.tape->record(std::move(out), {x}, [ix](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad(self);
    t.accumulate(ix, ops::transpose(g));
  });
}

template <typename T>
Var<T> tokens_to_chw(Var<T> x, std::size_t h, std::size_t w) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 2 || xv.dim(0) != h * w) {
    throw DimensionError("tokens_to_chw: " + shape_str(xv.shape()) + " is not [" +
                         std::to_string(h * w) + "×C]");
  }
  const std::size_t c = xv.dim(1);
  Tensor<T> out = ops::transpose(xv).reshaped({c, h, w});
  const auto ix = x.id;
  return x.tape->record(std::move(out), {x}, [ix, c, h, w](Tape<T>& t, std::uint32_t self) {
    t.accumulate(ix, ops::transpose(t.grad(self).reshaped({c, h * w})));
  });
}

template <typename T>
Var<T> slice_last(Var<T> x, std::size_t begin, std::size_t end) {
  const Tensor<T>& xv = x.value();
  const std::size_t d = xv.dim(xv.rank() - 1);
  if (begin >= end || end > d) {
    throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of range for last extent " + std::to_string(d));
  }
  const std::size_t rows = xv.numel() / d, w = end - begin;
  Shape os = xv.shape();
  os.back() = w;
  Tensor<T> out(os);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy(xv.ptr() + r * d + begin, xv.ptr() + r * d + end, out.ptr() + r * w);
  const auto ix = x.id;
  return x.tape->record(std::move(out), {x},
                        [ix, rows, d, w, begin](Tape<T>& t, std::uint32_t self) {
                          const Tensor<T>& g = t.grad(self);
                          Tensor<T>& gx = t.grad(ix);
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < w; ++j) gx[r * d + begin + j] += g[r * w + j];
                        });
}

template <typename T>
Var<T> concat_last(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const std::size_t da = av.dim(av.rank() - 1), db = bv.dim(bv.rank() - 1);
  if (av.rank() != bv.rank() || av.numel() / da != bv.numel() / db) {
    throw DimensionError("concat_last row mismatch: " + shape_str(av.shape()) + " and " +
                         shape_str(bv.shape()));
  }
  const std::size_t rows = av.numel() / da, d = da + db;
  Shape os = av.shape();
  os.back() = d;
  Tensor<T> out(os);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(av.ptr() + r * da, av.ptr() + (r + 1) * da, out.ptr() + r * d);
    std::copy(bv.ptr() + r * db, bv.ptr() + (r + 1) * db, out.ptr() + r * d + da);
  }
  const auto ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b},
                        [ia, ib, rows, da, db, d](Tape<T>& t, std::uint32_t self) {
                          const Tensor<T>& g = t.grad(self);
                          if (t.requires_grad(ia)) {
                            Tensor<T>& ga = t.grad(ia);
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t j = 0; j < da; ++j) ga[r * da + j] += g[r * d + j];
                          }
                          if (t.requires_grad(ib)) {
                            Tensor<T>& gb = t.grad(ib);
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t j = 0; j < db; ++j)
                                gb[r * db + j] += g[r * d + da + j];
                          }
                        });
}

template <typename T>
Var<T> gather_rows(Var<T> x, Indices indices, Shape out_shape) {
  const Tensor<T>& xv = x.value();
  const std::size_t c = xv.dim(xv.rank() - 1);
  const std::size_t src_rows = xv.numel() / c;
  const auto& idx = *indices;
  if (numel_of(out_shape) != idx.size() * c || out_shape.back() != c) {
    throw DimensionError("gather_rows: output " + shape_str(out_shape) + " does not hold " +
                         std::to_string(idx.size()) + " rows of width " + std::to_string(c));
  }
  Tensor<T> out(std::move(out_shape));
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= src_rows) throw ConsistencyError("gather_rows index out of range");
    std::copy(xv.ptr() + idx[r] * c, xv.ptr() + (idx[r] + 1) * c, out.ptr() + r * c);
  }
  const auto ix = x.id;
  return x.tape->record(std::move(out), {x}, [ix, indices, c](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gx = t.grad(ix);
    const auto& id = *indices;
    for (std::size_t r = 0; r < id.size(); ++r) {
      T* dst = gx.ptr() + id[r] * c;
      const T* src = g.ptr() + r * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
}

template <typename T>
Var<T> gather_flat(Var<T> x, Indices indices, Shape out_shape) {
  const Tensor<T>& xv = x.value();
  const auto& idx = *indices;
  if (numel_of(out_shape) != idx.size()) {
    throw DimensionError("gather_flat: output " + shape_str(out_shape) + " does not hold " +
                         std::to_string(idx.size()) + " elements");
  }
  Tensor<T> out(std::move(out_shape));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= xv.numel()) throw ConsistencyError("gather_flat index out of range");
    out[i] = xv[idx[i]];
  }
  const auto ix = x.id;
  return x.tape->record(std::move(out), {x}, [ix, indices](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gx = t.grad(ix);
    const auto& id = *indices;
    for (std::size_t i = 0; i < id.size(); ++i) gx[id[i]] += g[i];
  });
}

namespace {

// [G×n×(h·dh)] -> [(G·h)×n×dh]
template <typename T>
Tensor<T> split_heads_raw(const Tensor<T>& x, std::size_t heads) {
  const std::size_t G = x.dim(0), n = x.dim(1), c = x.dim(2), dh = c / heads;
  Tensor<T> out(Shape{G * heads, n, dh});
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < n; ++i)
        std::copy(x.ptr() + (g * n + i) * c + h * dh, x.ptr() + (g * n + i) * c + (h + 1) * dh,
                  out.ptr() + ((g * heads + h) * n + i) * dh);
  return out;
}

template <typename T>
Tensor<T> merge_heads_raw(const Tensor<T>& x, std::size_t heads) {
  const std::size_t G = x.dim(0) / heads, n = x.dim(1), dh = x.dim(2), c = dh * heads;
  Tensor<T> out(Shape{G, n, c});
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < n; ++i)
        std::copy(x.ptr() + ((g * heads + h) * n + i) * dh,
                  x.ptr() + ((g * heads + h) * n + i + 1) * dh, out.ptr() + (g * n + i) * c + h * dh);
  return out;
}

}  // namespace

template <typename T>
Var<T> split_heads(Var<T> x, std::size_t heads) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 3 || heads == 0 || xv.dim(2) % heads != 0) {
    throw DimensionError("split_heads: " + std::to_string(heads) + " heads do not divide " +
                         shape_str(xv.shape()));
  }
  const auto ix = x.id;
  return x.tape->record(split_heads_raw(xv, heads), {x}, [ix, heads](Tape<T>& t, std::uint32_t self) {
    t.accumulate(ix, merge_heads_raw(t.grad(self), heads));
  });
}

template <typename T>
Var<T> merge_heads(Var<T> x, std::size_t heads) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 3 || heads == 0 || xv.dim(0) % heads != 0) {
    throw DimensionError("merge_heads: " + std::to_string(heads) + " heads do not divide " +
                         shape_str(xv.shape()));
  }
  const auto ix = x.id;
  return x.tape->record(merge_heads_raw(xv, heads), {x}, [ix, heads](Tape<T>& t, std::uint32_t self) {
    t.accumulate(ix, split_heads_raw(t.grad(self), heads));
  });
}

template <typename T>
Var<T> pool_tokens(Var<T> x, std::size_t sh, std::size_t sw, std::size_t fy, std::size_t fx,
                   ops::PoolMode mode) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 3 || xv.dim(1) != sh * sw) {
    throw DimensionError("pool_tokens: " + shape_str(xv.shape()) + " is not [G×" +
                         std::to_string(sh * sw) + "×c]");
  }
  if (fy == 0 || fx == 0 || sh % fy != 0 || sw % fx != 0) {
    throw DimensionError("pool_tokens: factors " + std::to_string(fy) + "x" + std::to_string(fx) +
                         " do not divide stripe grid " + std::to_string(sh) + "x" +
                         std::to_string(sw));
  }
  const std::size_t G = xv.dim(0), c = xv.dim(2), oh = sh / fy, ow = sw / fx, na = oh * ow;
  Tensor<T> out(Shape{G, na, c});
  std::vector<std::uint32_t> argmax;
  if (mode == ops::PoolMode::max) argmax.resize(G * na * c);
  const T inv = T{1} / static_cast<T>(fy * fx);
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t o = (g * na + oy * ow + ox) * c + ch;
          T acc = 0;
          std::size_t best = 0;
          bool first = true;
          for (std::size_t dy = 0; dy < fy; ++dy)
            for (std::size_t dx = 0; dx < fx; ++dx) {
              const std::size_t src = (g * sh * sw + (oy * fy + dy) * sw + ox * fx + dx) * c + ch;
              const T v = xv[src];
              if (mode == ops::PoolMode::avg) {
                acc += v;
              } else if (first || v > acc) {
                acc = v;
                best = src;
              }
              first = false;
            }
          if (mode == ops::PoolMode::avg) {
            out[o] = acc * inv;
          } else {
            out[o] = acc;
            argmax[o] = static_cast<std::uint32_t>(best);
          }
        }
  const auto ix = x.id;
  return x.tape->record(
      std::move(out), {x},
      [ix, sh, sw, fy, fx, mode, argmax = std::move(argmax), inv](Tape<T>& t, std::uint32_t self) {
        const Tensor<T>& g = t.grad(self);
        Tensor<T>& gx = t.grad(ix);
        if (mode == ops::PoolMode::max) {
          for (std::size_t o = 0; o < g.numel(); ++o) gx[argmax[o]] += g[o];
          return;
        }
        const std::size_t G = g.dim(0), c = g.dim(2), ow = sw / fx, oh = sh / fy, na = oh * ow;
        for (std::size_t gi = 0; gi < G; ++gi)
          for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox)
              for (std::size_t dy = 0; dy < fy; ++dy)
                for (std::size_t dx = 0; dx < fx; ++dx) {
                  T* dst = gx.ptr() + (gi * sh * sw + (oy * fy + dy) * sw + ox * fx + dx) * c;
                  const T* src = g.ptr() + (gi * na + oy * ow + ox) * c;
                  for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch] * inv;
                }
      });
}

template <typename T>
Var<T> add_head_bias(Var<T> logits, Var<T> bias) {
  require_same_tape(logits, bias);
  const Tensor<T>& lv = logits.value();
  const Tensor<T>& bv = bias.value();
  if (lv.rank() != 3 || bv.rank() != 3 || lv.dim(1) != bv.dim(1) || lv.dim(2) != bv.dim(2) ||
      lv.dim(0) % bv.dim(0) != 0) {
    throw DimensionError("add_head_bias: logits " + shape_str(lv.shape()) + ", bias " +
                         shape_str(bv.shape()));
  }
  const std::size_t per = bv.numel();
  const std::size_t reps = lv.numel() / per;
  Tensor<T> out = lv;
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t i = 0; i < per; ++i) out[r * per + i] += bv[i];
  const auto il = logits.id, ib = bias.id;
  return logits.tape->record(std::move(out), {logits, bias},
                             [il, ib, per, reps](Tape<T>& t, std::uint32_t self) {
                               const Tensor<T>& g = t.grad(self);
                               t.accumulate(il, g);
                               if (t.requires_grad(ib)) {
                                 Tensor<T>& gb = t.grad(ib);
                                 for (std::size_t r = 0; r < reps; ++r)
                                   for (std::size_t i = 0; i < per; ++i) gb[i] += g[r * per + i];
                               }
                             });
}

template <typename T>
Var<T> add_group_mask(Var<T> logits, const Tensor<T>& mask, std::size_t heads) {
  const Tensor<T>& lv = logits.value();
  if (lv.rank() != 3 || mask.rank() != 3 || lv.dim(0) != mask.dim(0) * heads ||
      lv.dim(1) != mask.dim(1) || lv.dim(2) != mask.dim(2)) {
    throw DimensionError("add_group_mask: logits " + shape_str(lv.shape()) + ", mask " +
                         shape_str(mask.shape()) + ", heads " + std::to_string(heads));
  }
  const std::size_t per = mask.dim(1) * mask.dim(2);
  Tensor<T> out = lv;
  for (std::size_t g = 0; g < mask.dim(0); ++g)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < per; ++i) out[(g * heads + h) * per + i] += mask[g * per + i];
  const auto il = logits.id;
  return logits.tape->record(std::move(out), {logits}, [il](Tape<T>& t, std::uint32_t self) {
    t.accumulate(il, t.grad(self));
  });
}

template <typename T>
Var<T> global_avg_pool(Var<T> x) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 3) throw DimensionError("global_avg_pool expects [C×H×W], got " + shape_str(xv.shape()));
  const std::size_t c = xv.dim(0), hw = xv.dim(1) * xv.dim(2);
  Tensor<T> out(Shape{1, c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    T s = 0;
    for (std::size_t i = 0; i < hw; ++i) s += xv[ch * hw + i];
    out[ch] = s / static_cast<T>(hw);
  }
  const auto ix = x.id;
  return x.tape->record(std::move(out), {x}, [ix, c, hw](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gx = t.grad(ix);
    const T inv = T{1} / static_cast<T>(hw);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < hw; ++i) gx[ch * hw + i] += g[ch] * inv;
  });
}

template <typename T>
Var<T> channel_scale(Var<T> x, Var<T> g) {
  require_same_tape(x, g);
  const Tensor<T>& xv = x.value();
  const Tensor<T>& gv = g.value();
  if (xv.rank() != 3 || gv.numel() != xv.dim(0)) {
    throw DimensionError("channel_scale: map " + shape_str(xv.shape()) + ", gate " +
                         shape_str(gv.shape()));
  }
  const std::size_t c = xv.dim(0), hw = xv.dim(1) * xv.dim(2);
  Tensor<T> out(xv.shape());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] = xv[ch * hw + i] * gv[ch];
  const auto ix = x.id, ig = g.id;
  return x.tape->record(std::move(out), {x, g}, [ix, ig, c, hw](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& gr = t.grad(self);
    const Tensor<T>& xv = t.value(ix);
    const Tensor<T>& gv = t.value(ig);
    if (t.requires_grad(ix)) {
      Tensor<T>& gx = t.grad(ix);
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < hw; ++i) gx[ch * hw + i] += gr[ch * hw + i] * gv[ch];
    }
    if (t.requires_grad(ig)) {
      Tensor<T>& gg = t.grad(ig);
      for (std::size_t ch = 0; ch < c; ++ch) {
        T s = 0;
        for (std::size_t i = 0; i < hw; ++i) s += gr[ch * hw + i] * xv[ch * hw + i];
        gg[ch] += s;
      }
    }
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  T s = 0;
  for (T v : x.value().data()) s += v;
  const auto ix = x.id;
  return x.tape->record(Tensor<T>::scalar(s), {x}, [ix](Tape<T>& t, std::uint32_t self) {
    const T g = t.grad(self)[0];
    Tensor<T>& gx = t.grad(ix);
    for (auto& v : gx.data()) v += g;
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  return scale(sum(x), T{1} / static_cast<T>(x.value().numel()));
}

template <typename T>
Var<T> l1_loss(Var<T> pred, const Tensor<T>& target) {
  const Tensor<T>& pv = pred.value();
  if (pv.shape() != target.shape()) {
    throw DimensionError("l1_loss shape mismatch: " + shape_str(pv.shape()) + " vs " +
                         shape_str(target.shape()));
  }
  const std::size_t n = pv.numel();
  T s = 0;
  Tensor<T> sign(pv.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T d = pv[i] - target[i];
    s += std::abs(d);
    sign[i] = d > T{0} ? T{1} : (d < T{0} ? T{-1} : T{0});
  }
  std::vector<Tensor<T>> saved;
  saved.push_back(std::move(sign));
  const auto ip = pred.id;
  return pred.tape->record(
      Tensor<T>::scalar(s / static_cast<T>(n)), {pred},
      [ip, n](Tape<T>& t, std::uint32_t self) {
        const T g = t.grad(self)[0] / static_cast<T>(n);
        const Tensor<T>& sg = t.saved(self, 0);
        Tensor<T>& gp = t.grad(ip);
        for (std::size_t i = 0; i < n; ++i) gp[i] += g * sg[i];
      },
      std::move(saved));
}

#define GRL_INSTANTIATE_AD(T)                                                                  \
  template class Tape<T>;                                                                      \
  template Var<T> add(Var<T>, Var<T>);                                                         \
  template Var<T> sub(Var<T>, Var<T>);                                                         \
  template Var<T> mul(Var<T>, Var<T>);                                                         \
  template Var<T> scale(Var<T>, T);                                                            \
  template Var<T> reshape(Var<T>, Shape);                                                      \
  template Var<T> matmul(Var<T>, Var<T>);                                                      \
  template Var<T> matmul_nt(Var<T>, Var<T>);                                                   \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                                              \
  template Var<T> softmax_rows(Var<T>);                                                        \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, double);                                  \
  template Var<T> activation(Var<T>, ops::Activation);                                         \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>, std::size_t);                                 \
  template Var<T> pixel_shuffle(Var<T>, std::size_t);                                          \
  template Var<T> similarity(Var<T>, Var<T>, SimilarityMeasure);                               \
  template Var<T> chw_to_tokens(Var<T>);                                                       \
  template Var<T> tokens_to_chw(Var<T>, std::size_t, std::size_t);                             \
  template Var<T> slice_last(Var<T>, std::size_t, std::size_t);                                \
  template Var<T> concat_last(Var<T>, Var<T>);                                                 \
  template Var<T> gather_rows(Var<T>, Indices, Shape);                                         \
  template Var<T> gather_flat(Var<T>, Indices, Shape);                                         \
  template Var<T> split_heads(Var<T>, std::size_t);                                            \
  template Var<T> merge_heads(Var<T>, std::size_t);                                            \
  template Var<T> pool_tokens(Var<T>, std::size_t, std::size_t, std::size_t, std::size_t,      \
                              ops::PoolMode);                                                  \
  template Var<T> add_head_bias(Var<T>, Var<T>);                                               \
  template Var<T> add_group_mask(Var<T>, const Tensor<T>&, std::size_t);                       \
  template Var<T> global_avg_pool(Var<T>);                                                     \
  template Var<T> channel_scale(Var<T>, Var<T>);                                               \
  template Var<T> sum(Var<T>);                                                                 \
  template Var<T> mean(Var<T>);                                                                \
  template Var<T> l1_loss(Var<T>, const Tensor<T>&);

GRL_INSTANTIATE_AD(float)
GRL_INSTANTIATE_AD(double)

#undef GRL_INSTANTIATE_AD

}  // namespace grl::ad
