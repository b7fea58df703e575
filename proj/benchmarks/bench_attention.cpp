#include <benchmark/benchmark.h>

#include <random>

#include "masklab/rng.hpp"
#include "masklab/streamed.hpp"

namespace {

using namespace masklab;

constexpr int kHeadDim = 64;
constexpr double kGamma = 0.5;

Tensor random_matrix(int n, int d, std::mt19937_64& rng) {
  Tensor t = Tensor::zeros({n, d});
  auto& v = t.raw_f64();
  for (auto& x : v) x = normal(rng);
  return t;
}

struct Inputs {
  Tensor q, k, v;
};

Inputs make_inputs(int n) {
  std::mt19937_64 rng(1234);
  return {random_matrix(n, kHeadDim, rng), random_matrix(n, kHeadDim, rng),
          random_matrix(n, kHeadDim, rng)};
}

void BM_NaiveHead(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const Inputs in = make_inputs(n);
  const double scale = 1.0 / 8.0;
  for (auto _ : state) {
    auto r = naive_head_attention(in.q, in.k, in.v, MaskKind::stablemask,
                                  kGamma, scale);
    benchmark::DoNotOptimize(r.o);
  }
  state.SetComplexityN(n);
}
BENCHMARK(BM_NaiveHead)->Arg(64)->Arg(128)->Arg(256)->Arg(512)->Complexity();

void BM_StreamedHead(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const BlockPlan plan{static_cast<int>(state.range(1)),
                       static_cast<int>(state.range(2))};
  const Inputs in = make_inputs(n);
  const double scale = 1.0 / 8.0;
  for (auto _ : state) {
    auto r = streamed_attention(in.q, in.k, in.v, MaskKind::stablemask, kGamma,
                                scale, plan);
    benchmark::DoNotOptimize(r.o);
  }
}
BENCHMARK(BM_StreamedHead)
    ->Args({256, 8, 8})
    ->Args({256, 16, 16})
    ->Args({256, 32, 32})
    ->Args({256, 64, 64})
    ->Args({512, 16, 16})
    ->Args({512, 32, 32})
    ->Args({512, 64, 64});

void BM_StreamedThreads(benchmark::State& state) {
  const int n = 512;
  const int threads = static_cast<int>(state.range(0));
  const Inputs in = make_inputs(n);
  const BlockPlan plan{32, 32};
  for (auto _ : state) {
    auto r = streamed_attention(in.q, in.k, in.v, MaskKind::stablemask, kGamma,
                                1.0 / 8.0, plan, nullptr, threads);
    benchmark::DoNotOptimize(r.o);
  }
}
BENCHMARK(BM_StreamedThreads)->Arg(1)->Arg(2)->Arg(4)->Arg(8);

}  // namespace

BENCHMARK_MAIN();
