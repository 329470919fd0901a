// grl: batch front end for benchmarks, oracle diagnostics, training,
// evaluation, attention-map dumps and ablations.
//
// Exit codes: 0 ok, 2 usage or invalid input, 3 numeric failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "grl/analysis.hpp"
#include "grl/attention.hpp"
#include "grl/errors.hpp"
#include "grl/flops.hpp"
#include "grl/serialize.hpp"
#include "grl/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using grl::Tensor;

namespace {

constexpr int kUsage = 2;
constexpr int kNumeric = 3;

// Thrown for bad flag combinations that CLI11 cannot express.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void emit(const std::string& text, const std::string& out) {
  if (out.empty() || out == "-") {
    std::cout << text;
  } else {
    grl::io::atomic_write(out, text);
  }
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// bench

struct BenchArgs {
  std::size_t n = 1024, na = 64, d = 32, repeats = 5;
  std::uint64_t seed = 0;
  std::string measure = "dot";
  std::string out;
};

double median(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const std::size_t m = xs.size() / 2;
  return xs.size() % 2 ? xs[m] : 0.5 * (xs[m - 1] + xs[m]);
}

template <typename F>
double time_ms(F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  f();
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

int run_bench(const BenchArgs& a) {
  if (a.na < 1 || a.na > a.n) throw UsageError("bench needs n >= na >= 1");
  if (a.d < 1 || a.repeats < 1) throw UsageError("bench needs d >= 1 and repeats >= 1");
  const auto m = grl::parse_similarity(a.measure);
  std::mt19937_64 rng(a.seed);
  const auto q = Tensor<float>::randn({a.n, a.d}, rng);
  const auto k = Tensor<float>::randn({a.n, a.d}, rng);
  const auto v = Tensor<float>::randn({a.n, a.d}, rng);
  const auto an = Tensor<float>::randn({a.na, a.d}, rng);

  std::uint64_t fe = 0, fa = 0;
  std::vector<double> we, wa;
  for (std::size_t r = 0; r < a.repeats; ++r) {
    {
      grl::FlopCounter c;
      we.push_back(time_ms([&] { grl::exact_attention(q, k, v, m); }));
      fe = c.counts().total();
    }
    {
      grl::FlopCounter c;
      wa.push_back(time_ms([&] { grl::anchored_attention(q, k, v, an, m); }));
      fa = c.counts().total();
    }
  }
  std::ostringstream os;
  os << "n,na,d,flops_exact,flops_anchored,wall_exact_ms,wall_anchored_ms\n"
     << a.n << ',' << a.na << ',' << a.d << ',' << fe << ',' << fa << ',' << median(we) << ','
     << median(wa) << '\n';
  emit(os.str(), a.out);
  return 0;
}

// ---------------------------------------------------------------------------
// oracle

struct OracleArgs {
  std::size_t n = 64, na = 8, d = 16;
  std::uint64_t seed = 0;
  std::string measure = "dot";
  std::string anchors = "random";
  bool constant = false;
  std::string heatmap_dir;
  std::string out;
};

int run_oracle(const OracleArgs& a) {
  if (a.na < 1 || a.na > a.n || a.d < 1) throw UsageError("oracle needs n >= na >= 1 and d >= 1");
  const auto m = grl::parse_similarity(a.measure);
  std::mt19937_64 rng(a.seed);
  Tensor<double> q, k, an;
  if (a.constant) {
    q = Tensor<double>({a.n, a.d}, 0.5);
    k = Tensor<double>({a.n, a.d}, 0.5);
    an = Tensor<double>({a.na, a.d}, 0.5);
  } else {
    q = Tensor<double>::randn({a.n, a.d}, rng);
    k = Tensor<double>::randn({a.n, a.d}, rng);
    if (a.anchors == "keys") {
      // First na keys serve as anchors.
      an = Tensor<double>({a.na, a.d});
      std::copy_n(k.data().begin(), a.na * a.d, an.data().begin());
    } else if (a.anchors == "random") {
      an = Tensor<double>::randn({a.na, a.d}, rng);
    } else {
      throw UsageError("--anchors must be random or keys");
    }
  }
  const auto diag = grl::attention_maps(q, k, an, m);
  const auto cx = grl::complexity_report(a.n, a.na, a.d);
  if (!a.heatmap_dir.empty()) {
    fs::create_directories(a.heatmap_dir);
    grl::dump_heatmap(diag.exact_map, fs::path(a.heatmap_dir) / "exact.pgm");
    grl::dump_heatmap(diag.approx_map, fs::path(a.heatmap_dir) / "approx.pgm");
  }
  const std::string csv =
      grl::diagnostics_csv_header() + "\n" + grl::diagnostics_csv_row(diag, cx) + "\n";
  emit(csv, a.out);
  std::cout << "pearson=" << (diag.pearson.degenerate ? "nan" : fmt(diag.pearson.value))
            << ",flag=" << (diag.pearson.degenerate ? "degenerate" : "ok") << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// train / eval

struct TrainArgs {
  std::string config;
  std::string out;
  std::optional<std::size_t> iters;
  bool quiet = false;
};

grl::TrainConfig read_train_config(const std::string& path) {
  if (!fs::is_regular_file(path)) throw UsageError("config file not found: " + path);
  return grl::TrainConfig::from_json(grl::io::read_file(path));
}

int run_train(const TrainArgs& a) {
  auto cfg = read_train_config(a.config);
  if (a.iters) cfg.iters = *a.iters;
  cfg.validate();
  const auto res = grl::train(cfg, [&](const grl::Metric& m) {
    if (!a.quiet)
      std::cerr << "iter " << m.iter << " loss " << m.loss << " psnr " << m.psnr << '\n';
  });
  grl::save_run(a.out, cfg, res);
  json summary = {{"best_psnr", res.best_psnr},
                  {"best_iter", res.best_iter},
                  {"params", res.best.parameter_count()},
                  {"checkpoint", (fs::path(a.out) / "checkpoint.grlw").string()}};
  std::cout << summary.dump() << '\n';
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> n, patch;
  std::optional<double> sigma;
  std::string task;
  std::string out;
};

// Missing flags default to the training run that produced the checkpoint,
// when its train_config.json sits next to it.
int run_eval(const EvalArgs& a) {
  if (!fs::is_regular_file(a.checkpoint)) throw UsageError("checkpoint not found: " + a.checkpoint);
  const auto model = grl::load_checkpoint(a.checkpoint);
  if (!a.task.empty() && grl::parse_task(a.task) != model.config().task) {
    throw grl::ConfigError("checkpoint task is " + grl::to_string(model.config().task) +
                           ", requested " + a.task);
  }
  grl::TrainConfig run;
  run.val_patches = 8;
  const auto sidecar = fs::path(a.checkpoint).parent_path() / "train_config.json";
  if (fs::is_regular_file(sidecar)) run = grl::TrainConfig::from_json(grl::io::read_file(sidecar));
  const auto rep = grl::evaluate(model, a.n.value_or(run.val_patches), a.seed.value_or(run.seed),
                                 a.patch.value_or(run.patch), a.sigma.value_or(run.sigma));
  json j = {{"mean_psnr", rep.mean_psnr},
            {"std_psnr", rep.std_psnr},
            {"baseline_psnr", rep.baseline_psnr},
            {"baseline_raw_psnr", rep.baseline_raw_psnr},
            {"patches", rep.patches}};
  emit(j.dump() + "\n", a.out);
  return 0;
}

// ---------------------------------------------------------------------------
// dump-attn

struct DumpArgs {
  std::string checkpoint;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t patch = 32;
  double sigma = 25.0;
  std::size_t max_heatmaps = 8;
};

int run_dump(const DumpArgs& a) {
  if (!fs::is_regular_file(a.checkpoint)) throw UsageError("checkpoint not found: " + a.checkpoint);
  const auto model = grl::load_checkpoint(a.checkpoint);
  const auto s = grl::make_sample<float>(
      model.config().task, grl::sample_seed(grl::Stream::validation, a.seed, 0), a.patch, a.sigma);
  const auto blocks = grl::stripe_block_diagnostics(model, s.input);

  fs::create_directories(a.out);
  std::ostringstream csv;
  csv << "layer,block," << grl::diagnostics_csv_header() << '\n';
  double sum = 0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    const auto cx = grl::complexity_report(b.diag.n, b.diag.n_anchors, b.diag.d);
    csv << b.layer << ',' << b.block << ',' << grl::diagnostics_csv_row(b.diag, cx) << '\n';
    if (!b.diag.pearson.degenerate) {
      sum += b.diag.pearson.value;
      ++counted;
    }
    if (i < a.max_heatmaps) {
      const std::string stem = "layer" + std::to_string(b.layer) + "_block" + std::to_string(b.block);
      grl::dump_heatmap(b.diag.exact_map, fs::path(a.out) / (stem + "_exact.pgm"));
      grl::dump_heatmap(b.diag.approx_map, fs::path(a.out) / (stem + "_approx.pgm"));
    }
  }
  grl::io::atomic_write(fs::path(a.out) / "diagnostics.csv", csv.str());
  json j = {{"blocks", blocks.size()},
            {"mean_pearson", counted ? sum / counted : std::nan("")},
            {"degenerate_blocks", blocks.size() - counted}};
  std::cout << j.dump() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// ablate

struct AblateArgs {
  std::string axis;
  std::string out;
  std::string config;
  std::optional<std::size_t> iters;
};

int run_ablate(const AblateArgs& a) {
  grl::TrainConfig base;
  if (!a.config.empty()) base = read_train_config(a.config);
  if (a.iters) base.iters = *a.iters;
  grl::ablation_options(a.axis);  // reject unknown axes before any training
  emit(grl::ablation_csv(grl::run_ablation(a.axis, base)), a.out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Activations are allocated and freed at the same sizes every step; keep
  // them on the heap instead of round-tripping through mmap.
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
  CLI::App app{"Anchored stripe attention and GRL-micro restoration toolkit"};
  app.require_subcommand(1, 1);

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "Exact vs. anchored attention: flops and wall time");
  bench->add_option("--n", ba.n, "Tokens")->check(CLI::PositiveNumber);
  bench->add_option("--na", ba.na, "Anchors")->check(CLI::PositiveNumber);
  bench->add_option("--d", ba.d, "Head dimension")->check(CLI::PositiveNumber);
  bench->add_option("--repeats", ba.repeats, "Timed repetitions (median reported)")
      ->check(CLI::PositiveNumber);
  bench->add_option("--seed", ba.seed, "Input seed");
  bench->add_option("--measure", ba.measure, "dot | negative_sq_euclidean");
  bench->add_option("--out", ba.out, "CSV path (default stdout)");

  OracleArgs oa;
  auto* oracle = app.add_subcommand("oracle", "Compare exact and anchored attention maps");
  oracle->add_option("--n", oa.n, "Tokens")->check(CLI::PositiveNumber);
  oracle->add_option("--na", oa.na, "Anchors")->check(CLI::PositiveNumber);
  oracle->add_option("--d", oa.d, "Head dimension")->check(CLI::PositiveNumber);
  oracle->add_option("--seed", oa.seed, "Input seed");
  oracle->add_option("--measure", oa.measure, "dot | negative_sq_euclidean");
  oracle->add_option("--anchors", oa.anchors, "random | keys");
  oracle->add_flag("--constant", oa.constant, "Use constant Q, K and anchors");
  oracle->add_option("--heatmap-dir", oa.heatmap_dir, "Write exact.pgm and approx.pgm here");
  oracle->add_option("--out", oa.out, "CSV path (default stdout)");

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "Train GRL-micro from a JSON config");
  trn->add_option("--config", ta.config, "TrainConfig JSON")->required();
  trn->add_option("--out", ta.out, "Run directory")->required();
  trn->add_option("--iters", ta.iters, "Override iteration count");
  trn->add_flag("--quiet", ta.quiet, "No progress on stderr");

  EvalArgs ea;
  auto* evl = app.add_subcommand("eval", "Held-out PSNR of a checkpoint");
  evl->add_option("--checkpoint", ea.checkpoint, "checkpoint.grlw")->required();
  evl->add_option("--seed", ea.seed, "Run seed of the validation stream");
  evl->add_option("--n", ea.n, "Patches")->check(CLI::PositiveNumber);
  evl->add_option("--patch", ea.patch, "Patch size")->check(CLI::PositiveNumber);
  evl->add_option("--sigma", ea.sigma, "Noise std on the 0-255 scale");
  evl->add_option("--task", ea.task, "Expected task of the checkpoint");
  evl->add_option("--out", ea.out, "JSON path (default stdout)");

  DumpArgs da;
  auto* dump = app.add_subcommand("dump-attn", "Per-block attention maps of a checkpoint");
  dump->add_option("--checkpoint", da.checkpoint, "checkpoint.grlw")->required();
  dump->add_option("--out", da.out, "Output directory")->required();
  dump->add_option("--seed", da.seed, "Validation-stream seed of the input patch");
  dump->add_option("--patch", da.patch, "Patch size")->check(CLI::PositiveNumber);
  dump->add_option("--sigma", da.sigma, "Noise std on the 0-255 scale");
  dump->add_option("--max-heatmaps", da.max_heatmaps, "Blocks written as PGM pairs");

  AblateArgs aa;
  auto* abl = app.add_subcommand("ablate", "Train once per option of an ablation axis");
  abl->add_option("--axis", aa.axis, "measure | anchor-proj")
      ->required()
      ->check(CLI::IsMember({"measure", "anchor-proj"}));
  abl->add_option("--out", aa.out, "CSV path (default stdout)");
  abl->add_option("--config", aa.config, "Base TrainConfig JSON (default: built-in defaults)");
  abl->add_option("--iters", aa.iters, "Override iteration count");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*bench) return run_bench(ba);
    if (*oracle) return run_oracle(oa);
    if (*trn) return run_train(ta);
    if (*evl) return run_eval(ea);
    if (*dump) return run_dump(da);
    if (*abl) return run_ablate(aa);
  } catch (const grl::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const grl::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: invalid JSON: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}
