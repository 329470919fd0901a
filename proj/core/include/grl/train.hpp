#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "grl/analysis.hpp"
#include "grl/autodiff.hpp"
#include "grl/model.hpp"
#include "grl/tensor.hpp"

namespace grl {

// ---------------------------------------------------------------------------
// Synthetic data

// Grayscale [1×h×w] image in [0,1] with self-similar structure across scales:
// a shaded background, sinusoidal gratings at three octaves, nested
// rectangles and a motif stamped at several affine scales.
template <typename T>
Tensor<T> synth_image(std::uint64_t seed, std::size_t h, std::size_t w);

// img + sigma/255 · N(0,1); not clamped.
template <typename T>
Tensor<T> add_noise(const Tensor<T>& img, double sigma, std::uint64_t seed);

// Seed of image `index` in a sample stream. Streams with different tags never
// share seeds; only the low 20 bits of run_seed and 40 bits of index are used.
enum class Stream : std::uint64_t { train = 1, validation = 2 };
std::uint64_t sample_seed(Stream stream, std::uint64_t run_seed, std::uint64_t index);

template <typename T>
struct Sample {
  Tensor<T> input;   // noisy (denoise) or 2× average-pooled (sr_x2)
  Tensor<T> target;  // clean
};

template <typename T>
Sample<T> make_sample(Task task, std::uint64_t seed, std::size_t patch, double sigma);

// ---------------------------------------------------------------------------
// Optimization

template <typename T>
struct AdamState {
  std::uint64_t step = 0;
  std::vector<Tensor<T>> m, v;
};

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam update of every parameter from its grad.
template <typename T>
void adam_step(std::vector<ad::Parameter<T>>& params, AdamState<T>& state, const AdamConfig& cfg);

// Mean absolute error.
template <typename T>
double l1_loss(const Tensor<T>& pred, const Tensor<T>& target);

// 10·log10(peak²/MSE); +inf when the images are identical.
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double peak = 1.0);

inline constexpr double kPsnrCap = 100.0;
double capped_psnr(double db);

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  AdamConfig adam;
  std::size_t batch = 4;
  std::size_t iters = 2000;
  std::size_t patch = 32;
  double sigma = 25.0;
  std::uint64_t seed = 0;
  Task task = Task::denoise;
  std::size_t eval_every = 100;
  std::size_t val_patches = 8;
  GRLConfig model;  // model.task always equals task

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(std::string_view text);
};

struct Metric {
  std::size_t iter;
  double loss;
  double psnr;
};

struct TrainResult {
  Model<float> best;
  std::vector<Metric> metrics;
  double best_psnr;
  std::size_t best_iter;
};

// Called after every evaluation point.
using ProgressFn = std::function<void(const Metric&)>;

// Deterministic given cfg. Evaluates on the validation stream at iteration 0,
// every eval_every iterations and at the end; keeps the best-PSNR weights.
// Throws NumericError when the loss stops being finite.
TrainResult train(const TrainConfig& cfg, const ProgressFn& progress = {});

struct EvalReport {
  double mean_psnr = 0.0;
  double std_psnr = 0.0;
  double baseline_psnr = 0.0;      // clamped degraded input vs. clean
  double baseline_raw_psnr = 0.0;  // unclamped degraded input vs. clean
  std::size_t patches = 0;
};

// PSNR of the model output (clamped to [0,1]) over n validation-stream
// patches of the given run seed. The baseline for SR is pixel replication.
template <typename T>
EvalReport evaluate(const Model<T>& model, std::size_t n_patches, std::uint64_t seed,
                    std::size_t patch, double sigma);

// ---------------------------------------------------------------------------
// Run artifacts: <dir>/checkpoint.grlw, checkpoint.json (model config),
// metrics.csv and train_config.json. All writes are atomic.

std::string metrics_csv(const std::vector<Metric>& metrics);
void save_checkpoint(const Model<float>& model, const std::filesystem::path& path);
// Reads <path> and its .json sidecar.
Model<float> load_checkpoint(const std::filesystem::path& path);
void save_run(const std::filesystem::path& dir, const TrainConfig& cfg, const TrainResult& result);

// ---------------------------------------------------------------------------
// Ablations: one training run per option value of an axis.
//   measure      dot, negative_sq_euclidean
//   anchor-proj  avg+linear, max+linear

struct AblationRow {
  std::string option;
  double final_psnr;  // validation PSNR at the last evaluation point
  std::size_t params;
};

std::vector<std::string> ablation_options(std::string_view axis);
TrainConfig ablation_config(const TrainConfig& base, std::string_view axis, std::string_view option);
std::vector<AblationRow> run_ablation(std::string_view axis, const TrainConfig& base);
// `option,final_psnr,params`
std::string ablation_csv(const std::vector<AblationRow>& rows);

// ---------------------------------------------------------------------------
// Exact vs. anchored maps of every stripe block (one stripe, one head) of a
// model evaluated on one image.

struct BlockDiagnostics {
  std::size_t layer;
  std::size_t block;
  AttentionDiagnostics diag;
};

std::vector<BlockDiagnostics> stripe_block_diagnostics(const Model<float>& model,
                                                       const Tensor<float>& img);

}  // namespace grl
