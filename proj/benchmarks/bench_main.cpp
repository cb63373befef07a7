#include <benchmark/benchmark.h>

#include <vector>

#include "dsnet/decoder.hpp"
#include "dsnet/gemm.hpp"
#include "dsnet/losses.hpp"
#include "dsnet/ops.hpp"

using namespace dsnet;

namespace {

Tensor<float> uniform(const Shape& shape, Rng& rng) {
  Tensor<float> t(shape);
  for (auto& v : t.mutable_values()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return t;
}

void BM_Gemm(benchmark::State& state) {
  const auto n = state.range(0);
  Rng rng(0);
  auto a = uniform({n, n}, rng), b = uniform({n, n}, rng);
  Tensor<float> c(Shape{n, n});
  for (auto _ : state) {
    gemm<float>(false, false, n, n, n, 1.0f, a.data(), n, b.data(), n, 0.0f, c.mutable_data(), n);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOP/s"] = benchmark::Counter(2.0 * n * n * n, benchmark::Counter::kIsIterationInvariantRate,
                                                 benchmark::Counter::kIs1000);
}
BENCHMARK(BM_Gemm)->Arg(64)->Arg(256)->Arg(512);

// args: channels, spatial extent, algorithm (0 direct, 1 im2col)
void BM_Conv3x3(benchmark::State& state) {
  const auto c = state.range(0), hw = state.range(1);
  const auto algo = state.range(2) ? ConvAlgo::kIm2col : ConvAlgo::kDirect;
  Rng rng(1);
  ConvParams<float> p;
  p.in_channels = p.out_channels = c;
  p.kernel_h = p.kernel_w = 3;
  p.padding = 1;
  p.weight = uniform({c, c, 3, 3}, rng);
  p.bias = uniform({c}, rng);
  auto x = uniform({1, c, hw, hw}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, p, algo));
  state.counters["MAC/s"] = benchmark::Counter(static_cast<double>(c * c * 9 * hw * hw),
                                               benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_Conv3x3)->Args({32, 88, 0})->Args({32, 88, 1})->Args({64, 44, 0})->Args({64, 44, 1});

void BM_Attention(benchmark::State& state) {
  const auto l = state.range(0), lk = state.range(1);
  Rng rng(2);
  auto q = uniform({1, 1, l, 32}, rng), k = uniform({1, 1, lk, 32}, rng), v = uniform({1, 1, lk, 32}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(attention(q, k, v));
}
BENCHMARK(BM_Attention)->Args({7744, 121})->Args({1936, 121});

// DSNet-T forward (eval) and forward+backward (train) on 64x64 batches of 8.
void BM_DSNetT(benchmark::State& state) {
  const bool train = state.range(0) != 0;
  Rng rng(3);
  DSNet<float> model(ModelConfig::for_scale(Scale::kTiny), rng);
  auto x = uniform({8, 3, 64, 64}, rng);
  Tensor<float> masks(Shape{8, 1, 64, 64});
  for (std::int64_t i = 0; i < masks.numel(); i += 3) masks.mutable_data()[i] = 1.0f;
  model.train();
  model.forward(x);
  if (!train) model.eval();
  for (auto _ : state) {
    if (!train) {
      benchmark::DoNotOptimize(model.forward(x));
      continue;
    }
    Tape<float> tape;
    Tensor<float> loss;
    {
      TapeScope<float> scope(tape);
      loss = combined_loss(model.forward(x), masks);
    }
    model.zero_grad();
    tape.backward(loss);
  }
}
BENCHMARK(BM_DSNetT)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
