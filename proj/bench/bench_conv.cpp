// Serial reference kernels against the OpenMP/GEMM kernels at the model's
// equilibrium-layer shape, plus one full update-map application.

#include <benchmark/benchmark.h>

#include <random>

#include "deqnca/model.hpp"
#include "deqnca/ops.hpp"
#include "deqnca/reference.hpp"

using namespace deqnca;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

struct ConvCase {
  Tensor input, weight, bias, grad_out;
  explicit ConvCase(std::size_t batch)
      : input(random_tensor({batch, 40, 28, 28}, 1)),
        weight(random_tensor({32, 40, 3, 3}, 2)),
        bias(random_tensor({32}, 3)),
        grad_out(random_tensor({batch, 32, 28, 28}, 4)) {}
};

void BM_ConvReference(benchmark::State& state) {
  const ConvCase c(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(reference::conv2d(c.input, c.weight, c.bias));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_ConvParallel(benchmark::State& state) {
  const ConvCase c(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d(c.input, c.weight, c.bias));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_ConvVjpReference(benchmark::State& state) {
  const ConvCase c(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(reference::conv2d_vjp(c.input, c.weight, c.grad_out));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_ConvVjpParallel(benchmark::State& state) {
  const ConvCase c(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d_vjp(c.input, c.weight, c.grad_out));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_UpdateMap(benchmark::State& state) {
  const auto params = model::init_params({}, 1);
  const model::EquilibriumMap map(params);
  const auto ctx = map.make_context(random_tensor({1, 8, 28, 28}, 5), {});
  const Tensor z = random_tensor({1, 32, 28, 28}, 6);
  for (auto _ : state) benchmark::DoNotOptimize(map.apply(z, ctx));
}

}  // namespace

BENCHMARK(BM_ConvReference)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvParallel)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvVjpReference)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvVjpParallel)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_UpdateMap)->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
