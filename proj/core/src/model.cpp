#include "grl/model.hpp"

#include <cmath>
#include <random>
#include <string>

#include "json.hpp"

namespace grl {

using json = nlohmann::json;

std::string to_string(Task t) {
  switch (t) {
    case Task::denoise:
      return "denoise";
    case Task::sr_x2:
      return "sr_x2";
    case Task::sr_x4:
      return "sr_x4";
  }
  return "denoise";
}

Task parse_task(std::string_view s) {
  if (s == "denoise") return Task::denoise;
  if (s == "sr_x2") return Task::sr_x2;
  if (s == "sr_x4") return Task::sr_x4;
  throw ConfigError("unknown task '" + std::string(s) + "'");
}

std::string to_string(ops::PoolMode m) { return m == ops::PoolMode::avg ? "avg" : "max"; }

ops::PoolMode parse_pool(std::string_view s) {
  if (s == "avg") return ops::PoolMode::avg;
  if (s == "max") return ops::PoolMode::max;
  throw ConfigError("unknown pooling '" + std::string(s) + "'");
}

void GRLConfig::validate() const {
  if (embed_dim < 2 || embed_dim % 2 != 0) {
    throw ConfigError("embed_dim must be even and >= 2, got " + std::to_string(embed_dim));
  }
  if (stages < 1 || layers_per_stage < 1) throw ConfigError("need at least one stage and layer");
  if (heads == 0 || (embed_dim / 2) % heads != 0) {
    throw ConfigError("heads " + std::to_string(heads) + " must divide embed_dim/2 = " +
                      std::to_string(embed_dim / 2));
  }
  window.validate();
  stripe.validate();
  anchor.validate();
  const std::size_t fy = std::min(anchor.down_factor, stripe.width);
  if (stripe.width % fy != 0) {
    throw ConfigError("anchor down factor " + std::to_string(anchor.down_factor) +
                      " cannot pool stripes of width " + std::to_string(stripe.width));
  }
  if (channels_in != 1 && channels_in != 3) throw ConfigError("channels_in must be 1 or 3");
  if (!(mlp_ratio > 0.0) || mlp_hidden() == 0) throw ConfigError("mlp_ratio must be positive");
  if (ca_squeeze == 0 || embed_dim / ca_squeeze == 0) {
    throw ConfigError("channel-attention squeeze ratio too large for embed_dim");
  }
}

std::size_t GRLConfig::upscale() const {
  switch (task) {
    case Task::denoise:
      return 1;
    case Task::sr_x2:
      return 2;
    case Task::sr_x4:
      return 4;
  }
  return 1;
}

std::size_t GRLConfig::mlp_hidden() const {
  return static_cast<std::size_t>(std::lround(mlp_ratio * static_cast<double>(embed_dim)));
}

std::string GRLConfig::to_json() const {
  json j = {
      {"embed_dim", embed_dim},
      {"stages", stages},
      {"layers_per_stage", layers_per_stage},
      {"window", {{"size", window.size}, {"shift", window.shift}}},
      {"stripe", {{"width", stripe.width}, {"shift", stripe.shift}}},
      {"anchor", {{"pool", to_string(anchor.pool)}, {"down_factor", anchor.down_factor}}},
      {"heads", heads},
      {"mlp_ratio", mlp_ratio},
      {"measure", grl::to_string(measure)},
      {"task", grl::to_string(task)},
      {"channels_in", channels_in},
      {"ca_squeeze", ca_squeeze},
  };
  return j.dump(2);
}

GRLConfig GRLConfig::from_json(std::string_view text) {
  GRLConfig c;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config is not valid JSON: ") + e.what());
  }
  try {
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.stages = j.value("stages", c.stages);
    c.layers_per_stage = j.value("layers_per_stage", c.layers_per_stage);
    if (j.contains("window")) {
      c.window.size = j["window"].value("size", c.window.size);
      c.window.shift = j["window"].value("shift", c.window.size / 2);
    }
    if (j.contains("stripe")) {
      c.stripe.width = j["stripe"].value("width", c.stripe.width);
      c.stripe.shift = j["stripe"].value("shift", c.stripe.width / 2);
    }
    if (j.contains("anchor")) {
      c.anchor.pool = parse_pool(j["anchor"].value("pool", std::string("avg")));
      c.anchor.down_factor = j["anchor"].value("down_factor", c.anchor.down_factor);
    }
    c.heads = j.value("heads", c.heads);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.measure = parse_similarity(j.value("measure", std::string("dot")));
    c.task = parse_task(j.value("task", std::string("denoise")));
    c.channels_in = j.value("channels_in", c.channels_in);
    c.ca_squeeze = j.value("ca_squeeze", c.ca_squeeze);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad model config field: ") + e.what());
  }
  c.validate();
  return c;
}

bool operator==(const GRLConfig& a, const GRLConfig& b) { return a.to_json() == b.to_json(); }

LayerGeometry layer_geometry(const GRLConfig& cfg, std::size_t layer_index) {
  LayerGeometry g;
  g.window = WindowSpec{cfg.window.size, layer_index % 2 == 1 ? cfg.window.shift : 0};
  g.stripe.width = cfg.stripe.width;
  g.stripe.direction =
      layer_index % 2 == 0 ? StripeDirection::horizontal : StripeDirection::vertical;
  g.stripe.shift = (layer_index / 2) % 2 == 1 ? cfg.stripe.shift : 0;
  return g;
}

// ---------------------------------------------------------------------------
// Model

template <typename T>
std::size_t Model<T>::add(std::string name, Shape shape) {
  if (index_.count(name)) throw ConsistencyError("duplicate parameter name " + name);
  index_.emplace(name, params_.size());
  params_.emplace_back(std::move(name), Tensor<T>(std::move(shape)));
  return params_.size() - 1;
}

template <typename T>
Model<T>::Model(GRLConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const std::size_t C = cfg_.embed_dim, c = C / 2, cin = cfg_.channels_in;
  const std::size_t span = 2 * cfg_.window.size - 1;
  const std::size_t hidden = cfg_.mlp_hidden(), squeeze = C / cfg_.ca_squeeze;

  embed_w = add("embed.conv_w", {C, cin, 3, 3});
  embed_b = add("embed.conv_b", {C});
  for (std::size_t s = 0; s < cfg_.stages; ++s) {
    StageParams sp;
    for (std::size_t l = 0; l < cfg_.layers_per_stage; ++l) {
      const std::string pre = "stage" + std::to_string(s) + ".layer" + std::to_string(l) + ".";
      LayerParams lp;
      lp.norm1_gamma = add(pre + "norm1.gamma", {C});
      lp.norm1_beta = add(pre + "norm1.beta", {C});
      lp.win_qkv_w = add(pre + "window.qkv_w", {c, 3 * c});
      lp.win_qkv_b = add(pre + "window.qkv_b", {3 * c});
      lp.win_rel_bias = add(pre + "window.rel_bias", {span * span, cfg_.heads});
      lp.str_qkv_w = add(pre + "stripe.qkv_w", {c, 3 * c});
      lp.str_qkv_b = add(pre + "stripe.qkv_b", {3 * c});
      lp.str_anchor_w = add(pre + "stripe.anchor_w", {c, c});
      lp.str_anchor_b = add(pre + "stripe.anchor_b", {c});
      lp.str_proj_w = add(pre + "stripe.proj_w", {c, c});
      lp.str_proj_b = add(pre + "stripe.proj_b", {c});
      lp.attn_proj_w = add(pre + "attn.proj_w", {C, C});
      lp.attn_proj_b = add(pre + "attn.proj_b", {C});
      lp.conv1_w = add(pre + "conv.conv1_w", {C, C, 3, 3});
      lp.conv1_b = add(pre + "conv.conv1_b", {C});
      lp.conv2_w = add(pre + "conv.conv2_w", {C, C, 3, 3});
      lp.conv2_b = add(pre + "conv.conv2_b", {C});
      lp.ca_fc1_w = add(pre + "conv.ca_fc1_w", {C, squeeze});
      lp.ca_fc1_b = add(pre + "conv.ca_fc1_b", {squeeze});
      lp.ca_fc2_w = add(pre + "conv.ca_fc2_w", {squeeze, C});
      lp.ca_fc2_b = add(pre + "conv.ca_fc2_b", {C});
      lp.norm2_gamma = add(pre + "norm2.gamma", {C});
      lp.norm2_beta = add(pre + "norm2.beta", {C});
      lp.mlp_fc1_w = add(pre + "mlp.fc1_w", {C, hidden});
      lp.mlp_fc1_b = add(pre + "mlp.fc1_b", {hidden});
      lp.mlp_fc2_w = add(pre + "mlp.fc2_w", {hidden, C});
      lp.mlp_fc2_b = add(pre + "mlp.fc2_b", {C});
      sp.layers.push_back(lp);
    }
    sp.conv_w = add("stage" + std::to_string(s) + ".conv_w", {C, C, 3, 3});
    sp.conv_b = add("stage" + std::to_string(s) + ".conv_b", {C});
    stage_params.push_back(std::move(sp));
  }
  body_w = add("body.conv_w", {C, C, 3, 3});
  body_b = add("body.conv_b", {C});
  const std::size_t ups = cfg_.task == Task::sr_x2 ? 1 : (cfg_.task == Task::sr_x4 ? 2 : 0);
  for (std::size_t u = 0; u < ups; ++u) {
    up_w.push_back(add("head.up" + std::to_string(u) + "_w", {4 * C, C, 3, 3}));
    up_b.push_back(add("head.up" + std::to_string(u) + "_b", {4 * C}));
  }
  head_w = add("head.conv_w", {cin, C, 3, 3});
  head_b = add("head.conv_b", {cin});
}

template <typename T>
Model<T> Model<T>::initialized(const GRLConfig& cfg, std::uint64_t seed) {
  Model<T> m(cfg);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto trunc_normal = [&](Tensor<T>& t, double std) {
    for (auto& v : t.data()) {
      double z;
      do {
        z = normal(rng);
      } while (std::abs(z) > 2.0);
      v = static_cast<T>(z * std);
    }
  };
  auto kaiming_uniform = [&](Tensor<T>& t) {
    // a = sqrt(5) leaky-ReLU gain: bound = sqrt(6 / ((1 + a^2) fan_in)) = 1/sqrt(fan_in)
    const std::size_t fan_in = t.numel() / t.dim(0);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& v : t.data()) v = static_cast<T>(u(rng));
  };
  for (auto& p : m.params_) {
    const std::string& n = p.name;
    auto ends_with = [&](std::string_view suffix) {
      return n.size() >= suffix.size() && n.compare(n.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    if (n == "head.conv_w" || n == "head.conv_b") continue;
    if (ends_with(".gamma")) {
      p.value.fill(T{1});
    } else if (ends_with("_b") || ends_with(".beta")) {
      continue;
    } else if (p.value.rank() == 4) {
      kaiming_uniform(p.value);
    } else {
      trunc_normal(p.value, 0.02);
    }
  }
  return m;
}

template <typename T>
ad::Parameter<T>& Model<T>::param(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ConfigError("no parameter named " + std::string(name));
  return params_[it->second];
}

template <typename T>
const ad::Parameter<T>& Model<T>::param(std::string_view name) const {
  return const_cast<Model*>(this)->param(name);
}

template <typename T>
bool Model<T>::has_param(std::string_view name) const {
  return index_.count(std::string(name)) > 0;
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename T>
void Model<T>::accumulate_gradients(const ad::Tape<T>& tape) {
  for (const auto& [slot, g] : tape.parameter_grads()) {
    Tensor<T>& dst = params_.at(slot).grad;
    for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += (*g)[i];
  }
}

template <typename T>
io::NamedTensors<T> Model<T>::state() const {
  io::NamedTensors<T> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.emplace_back(p.name, p.value);
  return out;
}

template <typename T>
void Model<T>::load_state(const io::NamedTensors<T>& state) {
  if (state.size() != params_.size()) {
    throw ConfigError("checkpoint holds " + std::to_string(state.size()) +
                      " parameters, model expects " + std::to_string(params_.size()));
  }
  for (const auto& [name, t] : state) {
    auto& p = param(name);
    if (p.value.shape() != t.shape()) {
      throw ConfigError("parameter " + name + " has shape " + shape_str(t.shape()) +
                        ", model expects " + shape_str(p.value.shape()));
    }
    p.value = t;
  }
}

// ---------------------------------------------------------------------------
// Forward

template <typename T>
ad::Var<T> channel_attention_conv(const Bound<T>& p, const LayerParams& lp, ad::Var<T> x) {
  auto y = ad::conv2d(x, p(lp.conv1_w), p(lp.conv1_b), 1);
  y = ad::activation(y, ops::Activation::gelu);
  y = ad::conv2d(y, p(lp.conv2_w), p(lp.conv2_b), 1);
  auto g = ad::global_avg_pool(y);
  g = ad::activation(ad::linear(g, p(lp.ca_fc1_w), p(lp.ca_fc1_b)), ops::Activation::relu);
  g = ad::activation(ad::linear(g, p(lp.ca_fc2_w), p(lp.ca_fc2_b)), ops::Activation::sigmoid);
  return ad::channel_scale(y, g);
}

template <typename T>
ad::Var<T> transformer_layer(const Bound<T>& p, const LayerParams& lp, std::size_t layer_index,
                             ad::Var<T> x, StripeProbe* probe) {
  const GRLConfig& cfg = p.model.config();
  const Shape& s = x.shape();
  if (s.size() != 3 || s[0] != cfg.embed_dim) {
    throw DimensionError("transformer_layer expects [" + std::to_string(cfg.embed_dim) +
                         "×h×w], got " + shape_str(s));
  }
  const std::size_t C = s[0], h = s[1], w = s[2], half = C / 2;
  const LayerGeometry geo = layer_geometry(cfg, layer_index);

  auto tokens = ad::chw_to_tokens(x);
  auto xn = ad::layer_norm(tokens, p(lp.norm1_gamma), p(lp.norm1_beta));
  auto win = window_attention(ad::slice_last(xn, 0, half), h, w, geo.window, cfg.heads,
                              WindowAttentionWeights<T>{p(lp.win_qkv_w), p(lp.win_qkv_b),
                                                        p(lp.win_rel_bias)});
  auto str = anchored_stripe_attention(
      ad::slice_last(xn, half, C), h, w, geo.stripe, cfg.anchor, cfg.heads, cfg.measure,
      StripeAttentionWeights<T>{p(lp.str_qkv_w), p(lp.str_qkv_b), p(lp.str_anchor_w),
                                p(lp.str_anchor_b), p(lp.str_proj_w), p(lp.str_proj_b)},
      probe);
  auto attn = ad::linear(ad::concat_last(win, str), p(lp.attn_proj_w), p(lp.attn_proj_b));
  auto conv = ad::chw_to_tokens(channel_attention_conv(p, lp, x));
  auto y1 = ad::add(ad::add(tokens, attn), conv);
  auto hidden = ad::linear(ad::layer_norm(y1, p(lp.norm2_gamma), p(lp.norm2_beta)),
                           p(lp.mlp_fc1_w), p(lp.mlp_fc1_b));
  auto mlp = ad::linear(ad::activation(hidden, ops::Activation::gelu), p(lp.mlp_fc2_w),
                        p(lp.mlp_fc2_b));
  return ad::tokens_to_chw(ad::add(y1, mlp), h, w);
}

template <typename T>
ad::Var<T> stage(const Bound<T>& p, std::size_t stage_index, ad::Var<T> x, ForwardProbe* probe) {
  const GRLConfig& cfg = p.model.config();
  const StageParams& sp = p.model.stage_params.at(stage_index);
  auto y = x;
  for (std::size_t l = 0; l < sp.layers.size(); ++l) {
    const std::size_t global = stage_index * cfg.layers_per_stage + l;
    StripeProbe* sprobe = nullptr;
    if (probe != nullptr) {
      if (probe->layers.size() <= global) probe->layers.resize(cfg.layer_count());
      sprobe = &probe->layers[global];
    }
    y = transformer_layer(p, sp.layers[l], global, y, sprobe);
  }
  return ad::add(x, ad::conv2d(y, p(sp.conv_w), p(sp.conv_b), 1));
}

template <typename T>
ad::Var<T> forward(const Bound<T>& p, ad::Var<T> img, ForwardProbe* probe) {
  const Model<T>& m = p.model;
  const GRLConfig& cfg = m.config();
  const Shape& s = img.shape();
  if (s.size() != 3 || s[0] != cfg.channels_in) {
    throw DimensionError("forward expects [" + std::to_string(cfg.channels_in) +
                         "×h×w], got " + shape_str(s));
  }
  if (s[1] < 8 || s[2] < 8) {
    throw DimensionError("input " + shape_str(s) + " is smaller than the 8×8 minimum");
  }
  auto f0 = ad::conv2d(img, p(m.embed_w), p(m.embed_b), 1);
  auto f = f0;
  for (std::size_t st = 0; st < cfg.stages; ++st) f = stage(p, st, f, probe);
  f = ad::add(f0, ad::conv2d(f, p(m.body_w), p(m.body_b), 1));
  if (cfg.task == Task::denoise) {
    return ad::add(img, ad::conv2d(f, p(m.head_w), p(m.head_b), 1));
  }
  for (std::size_t u = 0; u < m.up_w.size(); ++u) {
    f = ad::pixel_shuffle(ad::conv2d(f, p(m.up_w[u]), p(m.up_b[u]), 1), 2);
  }
  return ad::conv2d(f, p(m.head_w), p(m.head_b), 1);
}

template <typename T>
Tensor<T> forward(const Model<T>& model, const Tensor<T>& img, ForwardProbe* probe) {
  ad::Tape<T> tape(false);
  Bound<T> p{tape, model};
  return forward(p, tape.constant(img), probe).value();
}

#define GRL_INSTANTIATE_MODEL(T)                                                                \
  template class Model<T>;                                                                      \
  template ad::Var<T> channel_attention_conv(const Bound<T>&, const LayerParams&, ad::Var<T>);  \
  template ad::Var<T> transformer_layer(const Bound<T>&, const LayerParams&, std::size_t,       \
                                        ad::Var<T>, StripeProbe*);                              \
  template ad::Var<T> stage(const Bound<T>&, std::size_t, ad::Var<T>, ForwardProbe*);           \
  template ad::Var<T> forward(const Bound<T>&, ad::Var<T>, ForwardProbe*);                      \
  template Tensor<T> forward(const Model<T>&, const Tensor<T>&, ForwardProbe*);

GRL_INSTANTIATE_MODEL(float)
GRL_INSTANTIATE_MODEL(double)

#undef GRL_INSTANTIATE_MODEL

}  // namespace grl
