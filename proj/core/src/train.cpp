#include "grl/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "grl/errors.hpp"
#include "grl/parallel.hpp"
#include "grl/serialize.hpp"
#include "json.hpp"

namespace grl {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Losses, metrics, optimizer

template <typename T>
double l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("l1_loss of " + shape_str(pred.shape()) + " and " +
                         shape_str(target.shape()));
  }
  long double s = 0;
  for (std::size_t i = 0; i < pred.numel(); ++i) s += std::abs(static_cast<long double>(pred[i]) - target[i]);
  return static_cast<double>(s / static_cast<long double>(pred.numel()));
}

template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double peak) {
  if (a.shape() != b.shape()) {
    throw DimensionError("psnr of " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  long double se = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const long double d = static_cast<long double>(a[i]) - b[i];
    se += d * d;
  }
  const double mse = static_cast<double>(se / static_cast<long double>(a.numel()));
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

double capped_psnr(double db) { return std::min(db, kPsnrCap); }

template <typename T>
void adam_step(std::vector<ad::Parameter<T>>& params, AdamState<T>& state, const AdamConfig& cfg) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.value.shape());
      state.v.emplace_back(p.value.shape());
    }
  }
  if (state.m.size() != params.size()) throw ConsistencyError("Adam state does not match parameters");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t), c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      const double g = p.grad[i];
      const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double upd = cfg.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps);
      p.value[i] = static_cast<T>(p.value[i] - upd);
    }
  }
}

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  if (patch < 8) throw ConfigError("patch must be >= 8");
  if (task != Task::denoise && patch % model.upscale() != 0) {
    throw ConfigError("patch must be divisible by the upscale factor");
  }
  if (patch / model.upscale() < 8) throw ConfigError("low-resolution input would be below 8×8");
  if (sigma < 0.0) throw ConfigError("sigma must be >= 0");
  if (batch == 0) throw ConfigError("batch must be >= 1");
  if (eval_every == 0) throw ConfigError("eval_every must be >= 1");
  if (val_patches == 0) throw ConfigError("val_patches must be >= 1");
  if (!(adam.lr > 0.0) || !(adam.eps > 0.0)) throw ConfigError("lr and eps must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (model.task != task) throw ConfigError("model task differs from training task");
  model.validate();
}

std::string TrainConfig::to_json() const {
  json j = {
      {"lr", adam.lr},
      {"betas", {adam.beta1, adam.beta2}},
      {"eps", adam.eps},
      {"batch", batch},
      {"iters", iters},
      {"patch", patch},
      {"sigma", sigma},
      {"seed", seed},
      {"task", to_string(task)},
      {"eval_every", eval_every},
      {"val_patches", val_patches},
      {"model", json::parse(model.to_json())},
  };
  return j.dump(2);
}

TrainConfig TrainConfig::from_json(std::string_view text) {
  TrainConfig c;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("training config is not valid JSON: ") + e.what());
  }
  try {
    c.adam.lr = j.value("lr", c.adam.lr);
    if (j.contains("betas")) {
      c.adam.beta1 = j["betas"].at(0).get<double>();
      c.adam.beta2 = j["betas"].at(1).get<double>();
    }
    c.adam.eps = j.value("eps", c.adam.eps);
    c.batch = j.value("batch", c.batch);
    c.iters = j.value("iters", c.iters);
    c.patch = j.value("patch", c.patch);
    c.sigma = j.value("sigma", c.sigma);
    c.seed = j.value("seed", c.seed);
    c.task = parse_task(j.value("task", std::string("denoise")));
    c.eval_every = j.value("eval_every", c.eval_every);
    c.val_patches = j.value("val_patches", c.val_patches);
    if (j.contains("model")) {
      json m = j["model"];
      if (!m.contains("task")) m["task"] = to_string(c.task);
      c.model = GRLConfig::from_json(m.dump());
    } else {
      c.model.task = c.task;
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad training config field: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

template <typename T>
Tensor<T> clamp01(Tensor<T> t) {
  for (auto& v : t.data()) v = std::clamp(v, T{0}, T{1});
  return t;
}

template <typename T>
Tensor<T> replicate(const Tensor<T>& x, std::size_t r) {
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor<T> out(Shape{c, h * r, w * r});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h * r; ++y)
      for (std::size_t xx = 0; xx < w * r; ++xx)
        out[(ch * h * r + y) * w * r + xx] = x[(ch * h + y / r) * w + xx / r];
  return out;
}

struct Moments {
  double mean, std;
};

Moments moments(const std::vector<double>& xs) {
  long double s = 0;
  for (double x : xs) s += x;
  const long double m = s / xs.size();
  long double v = 0;
  for (double x : xs) v += (x - m) * (x - m);
  return {static_cast<double>(m), static_cast<double>(std::sqrt(v / xs.size()))};
}

}  // namespace

template <typename T>
EvalReport evaluate(const Model<T>& model, std::size_t n_patches, std::uint64_t seed,
                    std::size_t patch, double sigma) {
  if (n_patches == 0) throw ConfigError("evaluation needs at least one patch");
  const Task task = model.config().task;
  const std::size_t r = model.config().upscale();
  std::vector<double> ours(n_patches), base(n_patches), raw(n_patches);
  parallel_for(n_patches, 1, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto s = make_sample<T>(task, sample_seed(Stream::validation, seed, i), patch, sigma);
      const auto out = clamp01(forward(model, s.input));
      ours[i] = capped_psnr(psnr(out, s.target));
      const auto degraded = r == 1 ? s.input : replicate(s.input, r);
      base[i] = capped_psnr(psnr(clamp01(degraded), s.target));
      raw[i] = capped_psnr(psnr(degraded, s.target));
    }
  });
  EvalReport rep;
  rep.patches = n_patches;
  const auto m = moments(ours);
  rep.mean_psnr = m.mean;
  rep.std_psnr = m.std;
  rep.baseline_psnr = moments(base).mean;
  rep.baseline_raw_psnr = moments(raw).mean;
  return rep;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

// Mean L1 over one batch; accumulates parameter gradients of loss/batch when
// `learn` is set.
double run_batch(Model<float>& model, const TrainConfig& cfg, std::size_t iter, bool learn) {
  double total = 0.0;
  for (std::size_t b = 0; b < cfg.batch; ++b) {
    const std::uint64_t idx = static_cast<std::uint64_t>(iter) * cfg.batch + b;
    const auto s =
        make_sample<float>(cfg.task, sample_seed(Stream::train, cfg.seed, idx), cfg.patch, cfg.sigma);
    ad::Tape<float> tape(learn);
    Bound<float> p{tape, model};
    auto loss = ad::l1_loss(forward(p, tape.constant(s.input)), s.target);
    total += static_cast<double>(loss.value().item());
    if (learn) {
      tape.backward(ad::scale(loss, 1.0f / static_cast<float>(cfg.batch)));
      model.accumulate_gradients(tape);
    }
  }
  return total / static_cast<double>(cfg.batch);
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const ProgressFn& progress) {
  cfg.validate();
  Model<float> model = Model<float>::initialized(cfg.model, cfg.seed);
  AdamState<float> adam;

  auto validate_now = [&] {
    return evaluate(model, cfg.val_patches, cfg.seed, cfg.patch, cfg.sigma).mean_psnr;
  };

  TrainResult res{model, {}, validate_now(), 0};
  {
    const Metric m0{0, run_batch(model, cfg, 0, false), res.best_psnr};
    res.metrics.push_back(m0);
    if (progress) progress(m0);
  }
  for (std::size_t it = 1; it <= cfg.iters; ++it) {
    model.zero_grad();
    const double loss = run_batch(model, cfg, it - 1, true);
    if (!std::isfinite(loss)) {
      throw NumericError("training diverged at iteration " + std::to_string(it) +
                         " (loss = " + std::to_string(loss) + ")");
    }
    adam_step(model.parameters(), adam, cfg.adam);
    if (it % cfg.eval_every == 0 || it == cfg.iters) {
      const Metric m{it, loss, validate_now()};
      res.metrics.push_back(m);
      if (progress) progress(m);
      if (m.psnr > res.best_psnr) {
        res.best_psnr = m.psnr;
        res.best_iter = it;
        res.best = model;
      }
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Artifacts

std::string metrics_csv(const std::vector<Metric>& metrics) {
  std::ostringstream os;
  os.precision(10);
  os << "iter,loss,psnr\n";
  for (const auto& m : metrics) os << m.iter << ',' << m.loss << ',' << capped_psnr(m.psnr) << '\n';
  return os.str();
}

namespace {

std::filesystem::path sidecar(const std::filesystem::path& p) {
  auto s = p;
  s.replace_extension(".json");
  return s;
}

}  // namespace

void save_checkpoint(const Model<float>& model, const std::filesystem::path& path) {
  std::ostringstream os(std::ios::binary);
  io::write_checkpoint(os, model.state());
  io::atomic_write(path, os.str());
  io::atomic_write(sidecar(path), model.config().to_json() + "\n");
}

Model<float> load_checkpoint(const std::filesystem::path& path) {
  const auto cfg = GRLConfig::from_json(io::read_file(sidecar(path)));
  std::istringstream is(io::read_file(path), std::ios::binary);
  Model<float> m(cfg);
  m.load_state(io::read_checkpoint<float>(is));
  return m;
}

void save_run(const std::filesystem::path& dir, const TrainConfig& cfg, const TrainResult& result) {
  std::filesystem::create_directories(dir);
  save_checkpoint(result.best, dir / "checkpoint.grlw");
  io::atomic_write(dir / "metrics.csv", metrics_csv(result.metrics));
  io::atomic_write(dir / "train_config.json", cfg.to_json() + "\n");
}

// ---------------------------------------------------------------------------
// Ablations

std::vector<std::string> ablation_options(std::string_view axis) {
  if (axis == "measure") return {"dot", "negative_sq_euclidean"};
  if (axis == "anchor-proj") return {"avg+linear", "max+linear"};
  throw ConfigError("unknown ablation axis '" + std::string(axis) +
                    "' (expected measure or anchor-proj)");
}

TrainConfig ablation_config(const TrainConfig& base, std::string_view axis, std::string_view option) {
  const auto opts = ablation_options(axis);
  if (std::find(opts.begin(), opts.end(), option) == opts.end())
    throw ConfigError("unknown option '" + std::string(option) + "' for axis " + std::string(axis));
  TrainConfig cfg = base;
  if (axis == "measure") {
    cfg.model.measure = parse_similarity(option);
  } else {
    cfg.model.anchor.pool = parse_pool(option.substr(0, option.find('+')));
  }
  cfg.validate();
  return cfg;
}

std::vector<AblationRow> run_ablation(std::string_view axis, const TrainConfig& base) {
  std::vector<AblationRow> rows;
  for (const auto& opt : ablation_options(axis)) {
    const TrainConfig cfg = ablation_config(base, axis, opt);
    const TrainResult res = train(cfg);
    rows.push_back({opt, res.metrics.back().psnr, res.best.parameter_count()});
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os.precision(10);
  os << "option,final_psnr,params\n";
  for (const auto& r : rows) os << r.option << ',' << capped_psnr(r.final_psnr) << ',' << r.params << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Stripe-block diagnostics

std::vector<BlockDiagnostics> stripe_block_diagnostics(const Model<float>& model,
                                                       const Tensor<float>& img) {
  ForwardProbe probe;
  forward(model.converted<double>(), img.cast<double>(), &probe);
  std::vector<BlockDiagnostics> out;
  for (std::size_t l = 0; l < probe.layers.size(); ++l) {
    const auto& lp = probe.layers[l];
    for (std::size_t b = 0; b < lp.entries.size(); ++b) {
      const auto& e = lp.entries[b];
      out.push_back({l, b, attention_maps(e.q, e.k, e.a, lp.measure)});
    }
  }
  return out;
}

template double l1_loss(const Tensor<float>&, const Tensor<float>&);
template double l1_loss(const Tensor<double>&, const Tensor<double>&);
template double psnr(const Tensor<float>&, const Tensor<float>&, double);
template double psnr(const Tensor<double>&, const Tensor<double>&, double);
template void adam_step(std::vector<ad::Parameter<float>>&, AdamState<float>&, const AdamConfig&);
template void adam_step(std::vector<ad::Parameter<double>>&, AdamState<double>&, const AdamConfig&);
template EvalReport evaluate(const Model<float>&, std::size_t, std::uint64_t, std::size_t, double);
template EvalReport evaluate(const Model<double>&, std::size_t, std::uint64_t, std::size_t, double);

}  // namespace grl
