#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "grl/parallel.hpp"
#include "grl/serialize.hpp"
#include "grl/train.hpp"

using namespace grl;
using T64 = Tensor<double>;

namespace {

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.iters = 6;
  cfg.batch = 2;
  cfg.patch = 16;
  cfg.eval_every = 3;
  cfg.val_patches = 2;
  cfg.seed = 5;
  return cfg;
}

double linf(const Tensor<float>& t) {
  double m = 0;
  for (float v : t.data()) m = std::max(m, std::abs(double(v)));
  return m;
}

}  // namespace

TEST(Synth, DeterministicPerSeed) {
  EXPECT_EQ(synth_image<float>(3, 32, 32), synth_image<float>(3, 32, 32));
  EXPECT_NE(synth_image<float>(3, 32, 32), synth_image<float>(4, 32, 32));
  EXPECT_EQ(synth_image<float>(9, 20, 13).shape(), (Shape{1, 20, 13}));
}

TEST(Synth, RangeMeanAndStructure) {
  long double total = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    auto img = synth_image<double>(s, 32, 32);
    long double mean = 0, var = 0;
    for (double v : img.data()) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
      mean += v;
    }
    mean /= img.numel();
    for (double v : img.data()) var += (v - mean) * (v - mean);
    EXPECT_GT(std::sqrt(var / img.numel()), 0.03) << "seed " << s;  // never flat
    total += mean;
  }
  const double m = static_cast<double>(total / 100);
  EXPECT_GE(m, 0.2);
  EXPECT_LE(m, 0.8);
}

TEST(Noise, ZeroSigmaIsIdentityAndSeeded) {
  auto img = synth_image<double>(1, 16, 16);
  EXPECT_EQ(add_noise(img, 0.0, 7), img);
  EXPECT_EQ(add_noise(img, 25.0, 7), add_noise(img, 25.0, 7));
  EXPECT_NE(add_noise(img, 25.0, 7), add_noise(img, 25.0, 8));
}

TEST(Noise, EmpiricalStdMatchesSigma) {
  T64 zero({1, 1000, 1000});
  auto noisy = add_noise(zero, 25.0, 11);
  long double s = 0, ss = 0;
  for (double v : noisy.data()) {
    s += v;
    ss += static_cast<long double>(v) * v;
  }
  const long double n = noisy.numel(), mean = s / n;
  const double std = static_cast<double>(std::sqrt(ss / n - mean * mean));
  EXPECT_NEAR(std, 25.0 / 255.0, 0.01 * 25.0 / 255.0);
}

TEST(Samples, SeedLayoutSeparatesStreams) {
  EXPECT_EQ(sample_seed(Stream::train, 0, 0), 1ull << 60);
  EXPECT_EQ(sample_seed(Stream::validation, 3, 5), (2ull << 60) | (3ull << 40) | 5);
  EXPECT_NE(sample_seed(Stream::train, 7, 9), sample_seed(Stream::validation, 7, 9));
  EXPECT_NE(sample_seed(Stream::train, 1, 0), sample_seed(Stream::train, 0, 0));
}

TEST(Samples, TaskInputs) {
  auto dn = make_sample<double>(Task::denoise, 42, 16, 25.0);
  EXPECT_EQ(dn.target, synth_image<double>(42, 16, 16));
  EXPECT_EQ(dn.input.shape(), dn.target.shape());
  EXPECT_NE(dn.input, dn.target);
  auto sr = make_sample<double>(Task::sr_x2, 42, 16, 25.0);
  ASSERT_EQ(sr.input.shape(), (Shape{1, 8, 8}));
  const auto& t = sr.target;
  EXPECT_NEAR(sr.input.at(0, 2, 3),
              (t.at(0, 4, 6) + t.at(0, 4, 7) + t.at(0, 5, 6) + t.at(0, 5, 7)) / 4, 1e-15);
}

TEST(L1, ValuesAndErrors) {
  T64 a({2, 3}, 0.25);
  EXPECT_EQ(l1_loss(a, a), 0.0);
  EXPECT_EQ(l1_loss(T64({2, 3}, 1.25), a), 1.0);
  EXPECT_THROW(l1_loss(a, T64({3, 2})), DimensionError);
}

TEST(L1, GradientIsSignOverCount) {
  T64 pred({4}, std::vector<double>{0.5, -1.0, 2.0, 0.0});
  T64 target({4}, std::vector<double>{0.0, 0.0, 3.0, 1.0});
  ad::Tape<double> tape;
  auto p = tape.variable(pred);
  auto loss = ad::l1_loss(p, target);
  EXPECT_NEAR(loss.value().item(), (0.5 + 1.0 + 1.0 + 1.0) / 4, 1e-15);
  tape.backward(loss);
  auto g = tape.grad_of(p);
  const double want[] = {0.25, -0.25, -0.25, -0.25};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(g[i], want[i]);
    const double h = 1e-6;
    T64 up = pred, dn = pred;
    up[i] += h;
    dn[i] -= h;
    EXPECT_NEAR((l1_loss(up, target) - l1_loss(dn, target)) / (2 * h), want[i], 1e-8);
  }
}

TEST(Adam, ZeroGradientLeavesFreshParametersUnchanged) {
  std::vector<ad::Parameter<double>> ps;
  ps.emplace_back("w", T64({3}, 1.5));
  AdamState<double> st;
  adam_step(ps, st, AdamConfig{});
  EXPECT_EQ(ps[0].value, T64({3}, 1.5));
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, MomentsDecayUnderZeroGradient) {
  std::vector<ad::Parameter<double>> ps;
  ps.emplace_back("w", T64({1}, 0.0));
  AdamState<double> st;
  ps[0].grad.fill(2.0);
  adam_step(ps, st, AdamConfig{});
  const double m1 = st.m[0][0], v1 = st.v[0][0];
  ps[0].grad.fill(0.0);
  adam_step(ps, st, AdamConfig{});
  EXPECT_DOUBLE_EQ(st.m[0][0], 0.9 * m1);
  EXPECT_DOUBLE_EQ(st.v[0][0], 0.999 * v1);
}

TEST(Adam, HandComputedSequence) {
  // g = 1 on every step: m_t = 1 − β1^t, v_t = 1 − β2^t, so both corrected
  // moments are exactly 1 and each step moves by lr / (1 + eps).
  std::vector<ad::Parameter<double>> ps;
  ps.emplace_back("w", T64({1}, 0.5));
  AdamState<double> st;
  AdamConfig cfg;
  cfg.lr = 0.1;
  double want = 0.5;
  for (int t = 1; t <= 3; ++t) {
    ps[0].grad.fill(1.0);
    adam_step(ps, st, cfg);
    want -= 0.1 / (1.0 + 1e-8);
    EXPECT_NEAR(ps[0].value[0], want, 1e-15) << "step " << t;
    EXPECT_NEAR(st.m[0][0], 1.0 - std::pow(0.9, t), 1e-15);
    EXPECT_NEAR(st.v[0][0], 1.0 - std::pow(0.999, t), 1e-15);
  }
}

TEST(Adam, VaryingGradientsMatchFormula) {
  const double gs[] = {1.0, -2.0, 0.5};
  std::vector<ad::Parameter<double>> ps;
  ps.emplace_back("w", T64({1}, 0.0));
  AdamState<double> st;
  AdamConfig cfg;
  cfg.lr = 0.01;
  // m3 = 0.1·(0.81·1 + 0.9·(−2) + 0.5), v3 = 0.001·(0.998001·1 + 0.999·4 + 0.25)
  double p = 0.0;
  long double m = 0, v = 0;
  for (int t = 1; t <= 3; ++t) {
    m = 0.9L * m + 0.1L * gs[t - 1];
    v = 0.999L * v + 0.001L * gs[t - 1] * gs[t - 1];
    p -= static_cast<double>(0.01L * (m / (1 - std::pow(0.9L, t))) /
                             (std::sqrt(v / (1 - std::pow(0.999L, t))) + 1e-8L));
    ps[0].grad.fill(gs[t - 1]);
    adam_step(ps, st, cfg);
  }
  EXPECT_NEAR(static_cast<double>(m), 0.1 * (0.81 - 1.8 + 0.5), 1e-15);
  EXPECT_NEAR(ps[0].value[0], p, 1e-14);
}

TEST(Adam, ParametersAreIndependent) {
  std::vector<ad::Parameter<double>> ps;
  ps.emplace_back("a", T64({2}, 1.0));
  ps.emplace_back("b", T64({2}, 1.0));
  ps[0].grad.fill(3.0);
  AdamState<double> st;
  adam_step(ps, st, AdamConfig{});
  EXPECT_EQ(ps[1].value, T64({2}, 1.0));
  EXPECT_LT(ps[0].value[0], 1.0);
}

TEST(Psnr, Formula) {
  T64 a({1, 10, 10}, 0.5);
  EXPECT_TRUE(std::isinf(psnr(a, a)));
  EXPECT_EQ(capped_psnr(psnr(a, a)), 100.0);
  EXPECT_NEAR(psnr(T64({1, 10, 10}, 0.6), a), 20.0, 1e-9);
  EXPECT_THROW(psnr(a, T64({1, 10, 9})), DimensionError);
}

TEST(Psnr, NoisyInputNearClosedForm) {
  long double sum = 0;
  for (std::uint64_t i = 0; i < 64; ++i) {
    auto s = make_sample<double>(Task::denoise, sample_seed(Stream::validation, 0, i), 32, 25.0);
    sum += psnr(s.input, s.target);
  }
  EXPECT_NEAR(static_cast<double>(sum / 64), 20.0 * std::log10(255.0 / 25.0), 0.2);
}

TEST(TrainConfig, JsonRoundTripAndValidation) {
  auto cfg = tiny_config();
  cfg.adam.lr = 1e-3;
  cfg.sigma = 15.0;
  auto back = TrainConfig::from_json(cfg.to_json());
  EXPECT_EQ(back.to_json(), cfg.to_json());
  EXPECT_EQ(back.model, cfg.model);
  EXPECT_EQ(TrainConfig::from_json("{}").to_json(), TrainConfig{}.to_json());
  EXPECT_THROW(TrainConfig::from_json("[1,"), ConfigError);
  EXPECT_THROW(TrainConfig::from_json(R"({"task": "sr_x2", "model": {"task": "denoise"}})"), ConfigError);

  auto bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  bad([](TrainConfig& c) { c.patch = 7; });
  bad([](TrainConfig& c) { c.sigma = -1; });
  bad([](TrainConfig& c) { c.batch = 0; });
  bad([](TrainConfig& c) { c.adam.beta1 = 1.0; });
  bad([](TrainConfig& c) {
    c.task = Task::sr_x2;
    c.model.task = Task::sr_x2;
    c.patch = 15;
  });
}

TEST(Train, ZeroItersReturnsInitialization) {
  auto cfg = tiny_config();
  cfg.iters = 0;
  auto res = train(cfg);
  EXPECT_EQ(res.best.state(), Model<float>::initialized(cfg.model, cfg.seed).state());
  ASSERT_EQ(res.metrics.size(), 1u);
  EXPECT_EQ(res.metrics[0].iter, 0u);
  EXPECT_EQ(res.best_iter, 0u);
  EXPECT_TRUE(std::isfinite(res.metrics[0].loss));
}

TEST(Train, ShortRunIsDeterministic) {
  auto cfg = tiny_config();
  std::vector<std::size_t> seen;
  auto a = train(cfg, [&](const Metric& m) { seen.push_back(m.iter); });
  EXPECT_EQ(seen, (std::vector<std::size_t>{0, 3, 6}));
  const auto saved = thread_budget();
  set_thread_budget(1);
  auto b = train(cfg);
  set_thread_budget(saved);
  EXPECT_EQ(a.best.state(), b.best.state());
  ASSERT_EQ(a.metrics.size(), b.metrics.size());
  for (std::size_t i = 0; i < a.metrics.size(); ++i) {
    EXPECT_EQ(a.metrics[i].loss, b.metrics[i].loss);
    EXPECT_EQ(a.metrics[i].psnr, b.metrics[i].psnr);
  }
  EXPECT_GE(a.best_psnr, a.metrics[0].psnr);
}

TEST(Train, DivergenceIsNumericError) {
  auto cfg = tiny_config();
  cfg.adam.lr = 1e30;
  EXPECT_THROW(train(cfg), NumericError);
}

TEST(Train, GradientFlowReachesEveryParameter) {
  // The reconstruction conv starts at zero, so on the first step it blocks
  // every upstream gradient and is the only tensor that learns. After one
  // update every parameter receives gradient.
  TrainConfig cfg;
  auto model = Model<float>::initialized(cfg.model, 0);
  auto step_grads = [&] {
    model.zero_grad();
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      auto s = make_sample<float>(Task::denoise, sample_seed(Stream::train, 0, b), cfg.patch, cfg.sigma);
      ad::Tape<float> tape;
      Bound<float> p{tape, model};
      tape.backward(ad::l1_loss(forward(p, tape.constant(s.input)), s.target));
      model.accumulate_gradients(tape);
    }
  };
  step_grads();
  for (const auto& p : model.parameters()) {
    const bool head = p.name.rfind("head.conv", 0) == 0;
    if (head)
      EXPECT_GT(linf(p.grad), 0.0) << p.name;
    else
      EXPECT_EQ(linf(p.grad), 0.0) << p.name;
  }
  AdamState<float> st;
  adam_step(model.parameters(), st, cfg.adam);
  step_grads();
  for (const auto& p : model.parameters()) EXPECT_GT(linf(p.grad), 0.0) << p.name;
}

TEST(Evaluate, IdentityModelScoresTheNoisyInput) {
  auto m = Model<float>::initialized(GRLConfig{}, 0);
  auto rep = evaluate(m, 4, 1, 16, 25.0);
  EXPECT_EQ(rep.patches, 4u);
  EXPECT_DOUBLE_EQ(rep.mean_psnr, rep.baseline_psnr);
  EXPECT_GE(rep.baseline_psnr, rep.baseline_raw_psnr);
  auto again = evaluate(m, 4, 1, 16, 25.0);
  EXPECT_EQ(again.mean_psnr, rep.mean_psnr);
  EXPECT_EQ(again.std_psnr, rep.std_psnr);
  EXPECT_THROW(evaluate(m, 0, 1, 16, 25.0), ConfigError);
}

TEST(Evaluate, SuperResolutionBaselineIsReplication) {
  GRLConfig cfg;
  cfg.task = Task::sr_x2;
  auto rep = evaluate(Model<float>(cfg), 2, 0, 16, 0.0);
  EXPECT_GT(rep.baseline_psnr, 10.0);
  EXPECT_EQ(rep.baseline_psnr, rep.baseline_raw_psnr);  // replication stays in [0,1]
  EXPECT_LT(rep.mean_psnr, rep.baseline_psnr);          // an all-zero model outputs black
}

TEST(Artifacts, RunDirectoryRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "grl_run_test";
  std::filesystem::remove_all(dir);
  auto cfg = tiny_config();
  cfg.iters = 3;
  auto res = train(cfg);
  save_run(dir, cfg, res);
  for (const char* f : {"checkpoint.grlw", "checkpoint.json", "metrics.csv", "train_config.json"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  auto loaded = load_checkpoint(dir / "checkpoint.grlw");
  EXPECT_EQ(loaded.state(), res.best.state());
  EXPECT_EQ(loaded.config(), cfg.model);
  const auto rep = evaluate(loaded, cfg.val_patches, cfg.seed, cfg.patch, cfg.sigma);
  EXPECT_NEAR(rep.mean_psnr, res.best_psnr, 1e-6);
  const std::string csv = io::read_file(dir / "metrics.csv");
  EXPECT_EQ(csv.rfind("iter,loss,psnr\n0,", 0), 0u);
  EXPECT_EQ(TrainConfig::from_json(io::read_file(dir / "train_config.json")).to_json(), cfg.to_json());
  std::filesystem::remove_all(dir);
}

TEST(Artifacts, MetricsCsvCapsInfinitePsnr) {
  const std::string csv = metrics_csv({{0, 0.5, INFINITY}, {10, 0.25, 21.5}});
  EXPECT_EQ(csv, "iter,loss,psnr\n0,0.5,100\n10,0.25,21.5\n");
}

TEST(Ablation, OptionsAndConfigs) {
  EXPECT_EQ(ablation_options("measure"), (std::vector<std::string>{"dot", "negative_sq_euclidean"}));
  EXPECT_EQ(ablation_options("anchor-proj"), (std::vector<std::string>{"avg+linear", "max+linear"}));
  EXPECT_THROW(ablation_options("depth"), ConfigError);

  const auto base = tiny_config();
  EXPECT_THROW(ablation_config(base, "measure", "cosine"), ConfigError);
  auto e = ablation_config(base, "measure", "negative_sq_euclidean");
  EXPECT_EQ(e.model.measure, SimilarityMeasure::negative_sq_euclidean);
  e.model.measure = base.model.measure;
  EXPECT_EQ(e.to_json(), base.to_json());
  auto mx = ablation_config(base, "anchor-proj", "max+linear");
  EXPECT_EQ(mx.model.anchor.pool, ops::PoolMode::max);
  mx.model.anchor.pool = base.model.anchor.pool;
  EXPECT_EQ(mx.to_json(), base.to_json());
}

TEST(Ablation, OptionsShareTheParameterLayout) {
  // Switching either axis changes ops only; names, shapes and init agree.
  const auto base = tiny_config();
  for (const std::string axis : {"measure", "anchor-proj"}) {
    const auto opts = ablation_options(axis);
    auto a = Model<float>::initialized(ablation_config(base, axis, opts[0]).model, 3);
    auto b = Model<float>::initialized(ablation_config(base, axis, opts[1]).model, 3);
    EXPECT_EQ(a.parameter_count(), b.parameter_count());
    const auto sa = a.state(), sb = b.state();
    ASSERT_EQ(sa.size(), sb.size());
    for (std::size_t i = 0; i < sa.size(); ++i) {
      EXPECT_EQ(sa[i].first, sb[i].first);
      EXPECT_EQ(sa[i].second, sb[i].second);
    }
  }
}

TEST(Ablation, ShortRunRowsAndCsv) {
  auto base = tiny_config();
  base.iters = 2;
  const auto rows = run_ablation("anchor-proj", base);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].option, "avg+linear");
  EXPECT_EQ(rows[1].option, "max+linear");
  EXPECT_EQ(rows[0].params, rows[1].params);
  for (const auto& r : rows) EXPECT_TRUE(std::isfinite(r.final_psnr));
  const auto again = run_ablation("anchor-proj", base);
  EXPECT_EQ(again[1].final_psnr, rows[1].final_psnr);

  const std::string csv = ablation_csv({{"dot", 25.5, 10}, {"x", INFINITY, 10}});
  EXPECT_EQ(csv, "option,final_psnr,params\ndot,25.5,10\nx,100,10\n");
}

TEST(BlockDiagnostics, CoversEveryStripeAndHead) {
  const auto cfg = tiny_config();
  const auto m = Model<float>::initialized(cfg.model, 2);
  const auto img = synth_image<float>(9, 16, 16);
  const auto blocks = stripe_block_diagnostics(m, img);
  // 16×16 map, stripe width 4 → 4 stripes per layer, 2 heads, 4 layers.
  ASSERT_EQ(blocks.size(), 4u * 4 * 2);
  for (const auto& b : blocks) {
    EXPECT_LT(b.layer, 4u);
    EXPECT_EQ(b.diag.n, 64u);
    EXPECT_EQ(b.diag.n_anchors, 4u);
    EXPECT_TRUE(b.diag.rank_bound_ok);
    EXPECT_LT(b.diag.max_row_sum_err, 1e-12);
  }
}
