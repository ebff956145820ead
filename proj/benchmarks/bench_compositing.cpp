#include <benchmark/benchmark.h>

#include <vector>

#include "layercake/bundle.hpp"
#include "layercake/image.hpp"
#include "layercake/rng.hpp"

using namespace layercake;

namespace {

RgbaImage random_image(Rng& rng, int size) {
  RgbaImage img(size, size);
  for (auto& v : img.px) v = static_cast<float>(rng.uniform());
  return img;
}

}  // namespace

static void OverPair(benchmark::State& state) {
  const int size = static_cast<int>(state.range(0));
  Rng rng(1);
  const RgbaImage fg = random_image(rng, size);
  const RgbaImage bg = random_image(rng, size);
  for (auto _ : state) {
    RgbaImage out = over(fg, bg);
    benchmark::DoNotOptimize(out.px.data());
  }
  state.SetBytesProcessed(state.iterations() * 2 *
                          static_cast<std::int64_t>(fg.px.size()) *
                          sizeof(float));
}
BENCHMARK(OverPair)->RangeMultiplier(4)->Range(16, 1024);

static void FlattenStack(benchmark::State& state) {
  const int depth = static_cast<int>(state.range(0));
  Rng rng(2);
  std::vector<RgbaImage> stack;
  for (int i = 0; i < depth; ++i) stack.push_back(random_image(rng, 256));
  for (auto _ : state) {
    RgbaImage out = flatten(stack);
    benchmark::DoNotOptimize(out.px.data());
  }
  state.SetComplexityN(depth);
}
BENCHMARK(FlattenStack)->RangeMultiplier(2)->Range(2, 64)->Complexity();

static void GridRoundtrip(benchmark::State& state) {
  const int size = static_cast<int>(state.range(0));
  Rng rng(3);
  const RgbaImage a = random_image(rng, size);
  const RgbaImage b = random_image(rng, size);
  const RgbaImage c = random_image(rng, size);
  const RgbaImage d = random_image(rng, size);
  for (auto _ : state) {
    GridSample grid = assemble_grid(a, b, c, d);
    auto parts = split_grid(grid.grid);
    benchmark::DoNotOptimize(parts[3].px.data());
  }
}
BENCHMARK(GridRoundtrip)->RangeMultiplier(4)->Range(16, 256);

static void CheckerboardPreview(benchmark::State& state) {
  Rng rng(4);
  const RgbaImage img = random_image(rng, 256);
  for (auto _ : state) {
    RgbaImage out = checkerboard_preview(img);
    benchmark::DoNotOptimize(out.px.data());
  }
}
BENCHMARK(CheckerboardPreview);

static void SynthDocument(benchmark::State& state) {
  const int size = static_cast<int>(state.range(0));
  std::uint64_t seed = 0;
  for (auto _ : state) {
    LayerDocument doc = synth_poster(seed++, size);
    benchmark::DoNotOptimize(doc.composite.px.data());
  }
}
BENCHMARK(SynthDocument)->Arg(16)->Arg(32)->Arg(64);

BENCHMARK_MAIN();
