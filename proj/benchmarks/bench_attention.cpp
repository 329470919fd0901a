#include <benchmark/benchmark.h>

#include <random>

#include "grl/attention.hpp"
#include "grl/flops.hpp"
#include "grl/kernels.hpp"
#include "grl/model.hpp"

namespace {

using grl::Tensor;

struct Inputs {
  Tensor<float> q, k, v, a;
};

Inputs make_inputs(std::size_t n, std::size_t na, std::size_t d) {
  std::mt19937_64 rng(n * 131 + na);
  return {Tensor<float>::randn({n, d}, rng), Tensor<float>::randn({n, d}, rng),
          Tensor<float>::randn({n, d}, rng), Tensor<float>::randn({na, d}, rng)};
}

// Args: n, na, d
void BM_ExactAttention(benchmark::State& st) {
  const auto in = make_inputs(st.range(0), st.range(1), st.range(2));
  std::uint64_t flops = 0;
  for (auto _ : st) {
    grl::FlopCounter c;
    benchmark::DoNotOptimize(grl::exact_attention(in.q, in.k, in.v));
    flops = c.counts().total();
  }
  st.counters["flops"] = static_cast<double>(flops);
  st.counters["map_elems"] = static_cast<double>(st.range(0) * st.range(0));
}

void BM_AnchoredAttention(benchmark::State& st) {
  const auto in = make_inputs(st.range(0), st.range(1), st.range(2));
  std::uint64_t flops = 0;
  for (auto _ : st) {
    grl::FlopCounter c;
    benchmark::DoNotOptimize(grl::anchored_attention(in.q, in.k, in.v, in.a));
    flops = c.counts().total();
  }
  st.counters["flops"] = static_cast<double>(flops);
  st.counters["map_elems"] = static_cast<double>(2 * st.range(0) * st.range(1));
}

void attention_sizes(benchmark::internal::Benchmark* b) {
  for (long n : {256, 1024, 2048, 4096}) b->Args({n, n / 16, 32});
  b->Unit(benchmark::kMillisecond);
}

BENCHMARK(BM_ExactAttention)->Apply(attention_sizes);
BENCHMARK(BM_AnchoredAttention)->Apply(attention_sizes);

void BM_Matmul(benchmark::State& st) {
  const std::size_t n = st.range(0);
  std::mt19937_64 rng(1);
  const auto a = Tensor<float>::randn({n, n}, rng), b = Tensor<float>::randn({n, n}, rng);
  for (auto _ : st) benchmark::DoNotOptimize(grl::ops::matmul(a, b));
  st.SetItemsProcessed(st.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256)->Arg(512)->Unit(benchmark::kMicrosecond);

// Forward pass of the default network on a square grayscale patch.
void BM_ModelForward(benchmark::State& st) {
  const std::size_t s = st.range(0);
  const auto model = grl::Model<float>::initialized(grl::GRLConfig{}, 0);
  std::mt19937_64 rng(2);
  const auto img = Tensor<float>::randn({1, s, s}, rng);
  for (auto _ : st) benchmark::DoNotOptimize(grl::forward(model, img));
}
BENCHMARK(BM_ModelForward)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
