// Serial reference kernels against their OpenMP counterparts.
//   ./textmamba_bench --benchmark_filter=Scan

#include <benchmark/benchmark.h>

#include <vector>

#include "textmamba/kernels.hpp"
#include "textmamba/rng.hpp"
#include "textmamba/s6.hpp"

namespace tx = textmamba;

namespace {

constexpr std::size_t kState = 16;
constexpr std::size_t kChannels = 32;

template <tx::ScanKernel K>
void BM_SelectiveScan(benchmark::State& state) {
  const auto len = static_cast<std::size_t>(state.range(0));
  tx::Rng rng(7);
  const auto params = tx::S6Params<float>::init(kChannels, kState, rng);
  const auto x = rng.normal_array<float>({len, kChannels});
  for (auto _ : state) benchmark::DoNotOptimize(tx::selective_scan(x, params, K));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(len));
  state.counters["threads"] = tx::kernels::max_threads();
}

template <bool Parallel>
void BM_Recurrence(benchmark::State& state) {
  const auto steps = static_cast<std::size_t>(state.range(0));
  const std::size_t lanes = kChannels * kState;
  tx::Rng rng(8);
  const auto a = rng.uniform_array<double>({steps, lanes}, 0.0, 1.0);
  const auto b = rng.normal_array<double>({steps, lanes});
  std::vector<double> h(steps * lanes);
  for (auto _ : state) {
    if constexpr (Parallel) {
      tx::kernels::linear_recurrence_parallel<double>(a.vec(), b.vec(), h, steps, lanes);
    } else {
      tx::kernels::linear_recurrence_serial<double>(a.vec(), b.vec(), h, steps, lanes);
    }
    benchmark::DoNotOptimize(h.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(steps));
}

template <bool Parallel>
void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  tx::Rng rng(9);
  const auto a = rng.normal_array<double>({n, n});
  const auto b = rng.normal_array<double>({n, n});
  std::vector<double> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      tx::kernels::matmul_parallel<double>(a.vec(), b.vec(), c, n, n, n);
    } else {
      tx::kernels::matmul_serial<double>(a.vec(), b.vec(), c, n, n, n);
    }
    benchmark::DoNotOptimize(c.data());
  }
}

}  // namespace

BENCHMARK(BM_SelectiveScan<tx::ScanKernel::sequential>)->RangeMultiplier(4)->Range(256, 4096);
BENCHMARK(BM_SelectiveScan<tx::ScanKernel::parallel>)->RangeMultiplier(4)->Range(256, 4096);
BENCHMARK(BM_Recurrence<false>)->RangeMultiplier(4)->Range(256, 4096);
BENCHMARK(BM_Recurrence<true>)->RangeMultiplier(4)->Range(256, 4096);
BENCHMARK(BM_Matmul<false>)->Arg(64)->Arg(256);
BENCHMARK(BM_Matmul<true>)->Arg(64)->Arg(256);

BENCHMARK_MAIN();
