#include <benchmark/benchmark.h>

#include "hypercd/cdnet.hpp"
#include "hypercd/downstream.hpp"
#include "hypercd/selfsup.hpp"

using namespace hypercd;

namespace {

Tensor4<float> random_input(std::size_t n, std::size_t c, std::size_t side, std::uint64_t seed) {
  Rng rng(seed);
  Tensor4<float> x(n, c, side, side);
  for (auto& v : x.values) v = static_cast<float>(standard_normal(rng));
  return x;
}

void BM_Conv5x5(benchmark::State& state) {
  const std::size_t c = static_cast<std::size_t>(state.range(0));
  const Tensor4<float> x = random_input(64, c, 5, 1);
  std::vector<float> w(128 * c * 25, 0.01f), b(128, 0.0f);
  for (auto _ : state) {
    benchmark::DoNotOptimize(conv2d_forward<float>(x, w, b, 128, 5, 0, nullptr));
  }
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_Conv5x5)->Arg(50)->Arg(200);

void BM_Conv1x1(benchmark::State& state) {
  const Tensor4<float> x = random_input(1, 128, static_cast<std::size_t>(state.range(0)), 2);
  std::vector<float> w(128 * 128, 0.01f), b(128, 0.0f);
  for (auto _ : state) {
    benchmark::DoNotOptimize(conv2d_forward<float>(x, w, b, 128, 1, 0, nullptr));
  }
}
BENCHMARK(BM_Conv1x1)->Arg(32)->Arg(64);

void BM_InfoNce(benchmark::State& state) {
  const std::size_t domains = static_cast<std::size_t>(state.range(0));
  const std::size_t rows = domains * 36;
  Rng rng(3);
  Matrix<float> e(rows, 128);
  for (auto& v : e.values) v = static_cast<float>(standard_normal(rng));
  e = l2_normalize_forward(e, 1e-12f);
  std::vector<std::size_t> groups(rows);
  for (std::size_t i = 0; i < rows; ++i) groups[i] = i / 36;
  for (auto _ : state) {
    benchmark::DoNotOptimize(infonce_multi<float>(e, groups, 0.07f));
  }
}
BENCHMARK(BM_InfoNce)->Arg(3)->Arg(8);

void BM_FinetuneIteration(benchmark::State& state) {
  SynthConfig sc;
  sc.bands = {50};
  sc.classes = {4};
  sc.size = 32;
  sc.seed = 4;
  sc.tile = 8;
  const HyperCube cube = normalize_cube(synth_domains(sc)[0]);
  const Split split = make_split(cube, {1, 50, 0, false});
  const std::vector<DomainSpec> spec{{cube.domain_id, cube.bands, cube.num_classes}};
  auto params = init_params<float>(ArchConfig::modified(static_cast<std::size_t>(state.range(0))), spec, 5);
  Schedule s;
  s.iterations = 1;
  s.sgd.milestones = {};
  for (auto _ : state) {
    benchmark::DoNotOptimize(train_supervised(params, cube, split.train, s));
  }
  state.SetLabel("50 labels x8 augmentation");
}
BENCHMARK(BM_FinetuneIteration)->Arg(1)->Arg(5)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
