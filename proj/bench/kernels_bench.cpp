#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "iau/iau_blocks.hpp"
#include "iau/kernels.hpp"

using namespace iau;
using namespace iau::kernels;

namespace {

std::vector<float> random_values(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto a = random_values(n * n, 1), b = random_values(n * n, 2);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel)
      parallel::gemm<float>(n, n, n, a, Trans::kNo, b, Trans::kNo, c, false);
    else
      reference::gemm<float>(n, n, n, a, Trans::kNo, b, Trans::kNo, c, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["MAC/s"] = benchmark::Counter(static_cast<double>(n * n * n) * state.iterations(), benchmark::Counter::kIsRate);
}

template <bool Parallel>
void BM_Im2col(benchmark::State& state) {
  PatchGeometry g{64, 32, 16, static_cast<std::size_t>(state.range(0)), 3, 1, 1};
  auto image = random_values(g.images * g.height * g.width * g.channels, 3);
  std::vector<float> cols(g.rows() * g.cols());
  for (auto _ : state) {
    if constexpr (Parallel)
      parallel::im2col<float>(g, image, cols);
    else
      reference::im2col<float>(g, image, cols);
    benchmark::DoNotOptimize(cols.data());
  }
}

template <bool Parallel>
void BM_Col2im(benchmark::State& state) {
  PatchGeometry g{64, 32, 16, static_cast<std::size_t>(state.range(0)), 3, 1, 1};
  auto cols = random_values(g.rows() * g.cols(), 4);
  std::vector<float> image(g.images * g.height * g.width * g.channels);
  for (auto _ : state) {
    std::fill(image.begin(), image.end(), 0.0f);
    if constexpr (Parallel)
      parallel::col2im<float>(g, cols, image);
    else
      reference::col2im<float>(g, cols, image);
    benchmark::DoNotOptimize(image.data());
  }
}

// One IAU block forward at a video stage size (parallel kernels only).
void BM_IauBlockForward(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  IauBlockOptions options;
  std::mt19937_64 rng(5);
  auto weights = IauBlockWeights<float>::make(d, options, rng);
  TensorF x({8, 16, 8, d}, random_values(8 * 16 * 8 * d, 6));
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(iau_block_forward(x, 4, weights, options).output.data().data());
}

}  // namespace

BENCHMARK(BM_Gemm<true>)->Name("gemm/parallel")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_Gemm<false>)->Name("gemm/reference")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_Im2col<true>)->Name("im2col/parallel")->Arg(8)->Arg(32);
BENCHMARK(BM_Im2col<false>)->Name("im2col/reference")->Arg(8)->Arg(32);
BENCHMARK(BM_Col2im<true>)->Name("col2im/parallel")->Arg(8)->Arg(32);
BENCHMARK(BM_Col2im<false>)->Name("col2im/reference")->Arg(8)->Arg(32);
BENCHMARK(BM_IauBlockForward)->Name("iau_block_forward")->Arg(16)->Arg(32);

BENCHMARK_MAIN();
