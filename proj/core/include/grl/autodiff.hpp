#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "grl/kernels.hpp"
#include "grl/similarity.hpp"
#include "grl/tensor.hpp"

// Reverse-mode automatic differentiation over the operator set in kernels.hpp.
//
// A Tape records every op in creation order, which is already a topological
// order, so backward() simply walks the records in reverse. Each record keeps
// its value, the ids of its inputs (captured by its backward closure) and any
// activations the backward pass needs. Parameters enter as leaves that
// reference external storage; after backward() their gradients are read with
// parameter_grads(). A parameter that does not reach the loss keeps a zero
// gradient.
namespace grl::ad {

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
};

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(T{0}); }
};

using Indices = std::shared_ptr<const std::vector<std::uint32_t>>;

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::uint32_t)>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  Var<T> constant(Tensor<T> value);
  // A leaf that receives a gradient; used for direct differentiation in tests.
  Var<T> variable(Tensor<T> value);
  // A leaf referencing external parameter storage, identified by slot. Repeat
  // calls with the same slot return the same node.
  Var<T> parameter(const Tensor<T>& value, std::size_t slot);

  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn,
                std::vector<Tensor<T>> saved = {});

  const Tensor<T>& value(std::uint32_t id) const {
    const Node& n = nodes_[id];
    return n.external != nullptr ? *n.external : n.value;
  }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  bool has_grad(std::uint32_t id) const { return nodes_[id].has_grad; }
  // Gradient buffer of a node, zero-filled on first access.
  Tensor<T>& grad(std::uint32_t id);
  const Tensor<T>& saved(std::uint32_t id, std::size_t k) const { return nodes_[id].saved[k]; }

  // Adds g into the gradient of id if that node requires one.
  void accumulate(std::uint32_t id, const Tensor<T>& g);
  void accumulate(std::uint32_t id, Tensor<T>&& g);

  // Seeds d(loss)/d(loss) = 1 and propagates. Loss must hold one element.
  void backward(Var<T> loss);

  // (slot, gradient) for every parameter leaf touched by backward().
  std::vector<std::pair<std::size_t, const Tensor<T>*>> parameter_grads() const;

  // Gradient of a leaf after backward(); zeros if it was unreachable.
  Tensor<T> grad_of(Var<T> v) const;

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn fn;
    std::vector<Tensor<T>> saved;
    std::size_t slot = static_cast<std::size_t>(-1);
  };

  Var<T> push(Node node);

  bool recording_;
  std::vector<Node> nodes_;
  std::unordered_map<std::size_t, std::uint32_t> slots_;
};

template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, T s);
template <typename T>
Var<T> reshape(Var<T> a, Shape shape);

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b);
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b);
template <typename T>
Var<T> softmax_rows(Var<T> x);
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, double eps = 1e-5);
template <typename T>
Var<T> activation(Var<T> x, ops::Activation kind);
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> kernel, Var<T> bias, std::size_t pad);
template <typename T>
Var<T> pixel_shuffle(Var<T> x, std::size_t r);

// Scaled similarity logits for batched token sets [B×n×d], [B×m×d] -> [B×n×m].
template <typename T>
Var<T> similarity(Var<T> q, Var<T> k, SimilarityMeasure measure);

// [C×H×W] <-> [(H·W)×C]
template <typename T>
Var<T> chw_to_tokens(Var<T> x);
template <typename T>
Var<T> tokens_to_chw(Var<T> x, std::size_t h, std::size_t w);

// Slices/concatenates along the last axis.
template <typename T>
Var<T> slice_last(Var<T> x, std::size_t begin, std::size_t end);
template <typename T>
Var<T> concat_last(Var<T> a, Var<T> b);

// Treats x as rows of its last-axis length and picks rows by index; rows may
// repeat (backward scatter-adds). out_shape must hold indices.size() rows.
template <typename T>
Var<T> gather_rows(Var<T> x, Indices indices, Shape out_shape);
// Elementwise gather from the flattened tensor.
template <typename T>
Var<T> gather_flat(Var<T> x, Indices indices, Shape out_shape);

// [G×n×(h·dh)] -> [(G·h)×n×dh] and back.
template <typename T>
Var<T> split_heads(Var<T> x, std::size_t heads);
template <typename T>
Var<T> merge_heads(Var<T> x, std::size_t heads);

// Pools each group's (sh×sw) token grid by (fy×fx): [G×(sh·sw)×c] -> [G×(sh/fy·sw/fx)×c].
template <typename T>
Var<T> pool_tokens(Var<T> x, std::size_t sh, std::size_t sw, std::size_t fy, std::size_t fx,
                   ops::PoolMode mode);

// logits [(G·h)×n×m] + bias [h×n×m] broadcast over G.
template <typename T>
Var<T> add_head_bias(Var<T> logits, Var<T> bias);
// logits [(G·h)×n×m] + constant mask [G×n×m] broadcast over heads.
template <typename T>
Var<T> add_group_mask(Var<T> logits, const Tensor<T>& mask, std::size_t heads);

// [C×H×W] -> [1×C]
template <typename T>
Var<T> global_avg_pool(Var<T> x);
// [C×H×W] scaled per channel by g [1×C].
template <typename T>
Var<T> channel_scale(Var<T> x, Var<T> g);

template <typename T>
Var<T> sum(Var<T> x);
template <typename T>
Var<T> mean(Var<T> x);
// Mean absolute error against a constant target.
template <typename T>
Var<T> l1_loss(Var<T> pred, const Tensor<T>& target);

}  // namespace grl::ad
