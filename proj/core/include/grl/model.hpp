#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "grl/attention.hpp"
#include "grl/autodiff.hpp"
#include "grl/serialize.hpp"
#include "grl/similarity.hpp"
#include "grl/tensor.hpp"

namespace grl {

enum class Task { denoise, sr_x2, sr_x4 };

std::string to_string(Task t);
Task parse_task(std::string_view s);
std::string to_string(ops::PoolMode m);
ops::PoolMode parse_pool(std::string_view s);

// Network hyperparameters. The window/stripe shift fields give the offset
// used on the shifted layers of the schedule (see layer_geometry).
struct GRLConfig {
  std::size_t embed_dim = 16;
  std::size_t stages = 2;
  std::size_t layers_per_stage = 2;
  WindowSpec window{8, 4};
  StripeSpec stripe{StripeDirection::horizontal, 4, 2};
  AnchorSpec anchor{ops::PoolMode::avg, 4};
  std::size_t heads = 2;
  double mlp_ratio = 2.0;
  SimilarityMeasure measure = SimilarityMeasure::dot;
  Task task = Task::denoise;
  std::size_t channels_in = 1;
  std::size_t ca_squeeze = 4;

  void validate() const;
  std::size_t upscale() const;
  std::size_t mlp_hidden() const;
  std::size_t layer_count() const { return stages * layers_per_stage; }

  std::string to_json() const;
  static GRLConfig from_json(std::string_view text);

  friend bool operator==(const GRLConfig&, const GRLConfig&);
};

// Attention geometry of the layer at a global index. Layers alternate the
// window shift and the stripe direction; the stripe shift flips every second
// layer, so four consecutive layers visit all four stripe modes.
struct LayerGeometry {
  WindowSpec window;
  StripeSpec stripe;
};
LayerGeometry layer_geometry(const GRLConfig& cfg, std::size_t layer_index);

// Parameter slots of one transformer layer.
struct LayerParams {
  std::size_t norm1_gamma, norm1_beta;
  std::size_t win_qkv_w, win_qkv_b, win_rel_bias;
  std::size_t str_qkv_w, str_qkv_b, str_anchor_w, str_anchor_b, str_proj_w, str_proj_b;
  std::size_t attn_proj_w, attn_proj_b;
  std::size_t conv1_w, conv1_b, conv2_w, conv2_b;
  std::size_t ca_fc1_w, ca_fc1_b, ca_fc2_w, ca_fc2_b;
  std::size_t norm2_gamma, norm2_beta;
  std::size_t mlp_fc1_w, mlp_fc1_b, mlp_fc2_w, mlp_fc2_b;
};

struct StageParams {
  std::vector<LayerParams> layers;
  std::size_t conv_w, conv_b;
};

// Collects stripe-attention internals per layer during a forward pass.
struct ForwardProbe {
  std::vector<StripeProbe> layers;
};

template <typename T>
class Model {
 public:
  // All parameters zero.
  explicit Model(GRLConfig cfg);

  // Truncated-normal (std 0.02) linear weights, Kaiming-uniform conv
  // kernels, zero biases, zero final reconstruction conv.
  static Model initialized(const GRLConfig& cfg, std::uint64_t seed);

  const GRLConfig& config() const { return cfg_; }

  std::vector<ad::Parameter<T>>& parameters() { return params_; }
  const std::vector<ad::Parameter<T>>& parameters() const { return params_; }
  ad::Parameter<T>& param(std::string_view name);
  const ad::Parameter<T>& param(std::string_view name) const;
  bool has_param(std::string_view name) const;

  // Total number of learnable scalars.
  std::size_t parameter_count() const;

  void zero_grad();
  // Adds the parameter gradients recorded on tape into Parameter::grad.
  void accumulate_gradients(const ad::Tape<T>& tape);

  io::NamedTensors<T> state() const;
  void load_state(const io::NamedTensors<T>& state);

  template <typename U>
  Model<U> converted() const {
    Model<U> out(cfg_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      out.parameters()[i].value = params_[i].value.template cast<U>();
    }
    return out;
  }

  // Slot layout
  std::size_t embed_w, embed_b;
  std::vector<StageParams> stage_params;
  std::size_t body_w, body_b;
  std::vector<std::size_t> up_w, up_b;
  std::size_t head_w, head_b;

 private:
  std::size_t add(std::string name, Shape shape);

  GRLConfig cfg_;
  std::vector<ad::Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Binds model parameters to a tape.
template <typename T>
struct Bound {
  ad::Tape<T>& tape;
  const Model<T>& model;

  ad::Var<T> operator()(std::size_t slot) const {
    return tape.parameter(model.parameters()[slot].value, slot);
  }
};

// conv3×3 → GELU → conv3×3, scaled per channel by
// sigmoid(fc2(relu(fc1(global_avg_pool(·))))).
template <typename T>
ad::Var<T> channel_attention_conv(const Bound<T>& p, const LayerParams& lp, ad::Var<T> x);

// x [C×H×W] -> [C×H×W]
template <typename T>
ad::Var<T> transformer_layer(const Bound<T>& p, const LayerParams& lp, std::size_t layer_index,
                             ad::Var<T> x, StripeProbe* probe = nullptr);

// x + conv3×3(layers(x))
template <typename T>
ad::Var<T> stage(const Bound<T>& p, std::size_t stage_index, ad::Var<T> x,
                 ForwardProbe* probe = nullptr);

// img [c_in×h×w] -> restored image; h, w >= 8.
template <typename T>
ad::Var<T> forward(const Bound<T>& p, ad::Var<T> img, ForwardProbe* probe = nullptr);

// Inference without gradient recording.
template <typename T>
Tensor<T> forward(const Model<T>& model, const Tensor<T>& img, ForwardProbe* probe = nullptr);

}  // namespace grl
