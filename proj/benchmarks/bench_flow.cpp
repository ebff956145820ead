#include <benchmark/benchmark.h>

#include "layercake/flow.hpp"
#include "layercake/image.hpp"
#include "layercake/rng.hpp"
#include "layercake/tensor.hpp"
#include "layercake/vae.hpp"

using namespace layercake;

namespace {

FlowCondition edit_condition(Rng& rng, int grid, int channels) {
  FlowCondition cond;
  cond.cond_tokens = Tensor::randn({grid * grid, channels}, rng);
  cond.mask_tokens = Tensor::randn({grid * grid, 1}, rng);
  cond.prompt = embed_prompt({"promo poster", "round badge", "", "plain field"});
  cond.task = FlowTask::fg_extract;
  cond.target_grid = grid;
  return cond;
}

}  // namespace

static void VelocityForward(benchmark::State& state) {
  FlowConfig cfg;
  cfg.d_model = static_cast<int>(state.range(0));
  cfg.n_heads = 4;
  cfg.n_blocks = 4;
  FlowModel model(cfg, 11);
  Rng rng(12);
  const FlowCondition cond = edit_condition(rng, 4, cfg.latent_channels);
  const Tensor zt = Tensor::randn({16, cfg.latent_channels}, rng);
  for (auto _ : state) {
    Tensor v = model.predict_velocity(zt, 0.5, cond);
    benchmark::DoNotOptimize(v.v.data());
  }
}
BENCHMARK(VelocityForward)->Arg(32)->Arg(64)->Arg(128);

static void VelocityForwardWithAdapter(benchmark::State& state) {
  FlowConfig cfg;
  cfg.d_model = 64;
  cfg.n_heads = 4;
  cfg.n_blocks = 4;
  FlowModel model(cfg, 13);
  LoraSet lora = model.make_lora_set(14);
  Rng rng(15);
  const FlowCondition cond = edit_condition(rng, 4, cfg.latent_channels);
  const Tensor zt = Tensor::randn({16, cfg.latent_channels}, rng);
  for (auto _ : state) {
    Tensor v = model.predict_velocity(zt, 0.5, cond, &lora);
    benchmark::DoNotOptimize(v.v.data());
  }
}
BENCHMARK(VelocityForwardWithAdapter);

static void EditSampler(benchmark::State& state) {
  const int steps = static_cast<int>(state.range(0));
  FlowConfig cfg;
  cfg.d_model = 64;
  cfg.n_heads = 4;
  cfg.n_blocks = 4;
  FlowModel model(cfg, 21);
  Rng rng(22);
  const FlowCondition cond = edit_condition(rng, 4, cfg.latent_channels);
  for (auto _ : state) {
    Tensor z1 = sample_edit(model, cond, steps);
    benchmark::DoNotOptimize(z1.v.data());
  }
  state.SetComplexityN(steps);
}
BENCHMARK(EditSampler)->RangeMultiplier(2)->Range(1, 32)->Complexity();

static void AutoencoderEncode(benchmark::State& state) {
  const int size = static_cast<int>(state.range(0));
  VaeConfig cfg;
  cfg.image_size = size;
  cfg.latent_grid = size / 4;
  cfg.hidden = 16;
  VaeModel model(cfg, 31);
  Rng rng(32);
  RgbaImage img(size, size);
  for (auto& v : img.px) v = static_cast<float>(rng.uniform());
  for (auto _ : state) {
    LatentPair lat = model.encode_mean(img);
    benchmark::DoNotOptimize(lat.z_rgb.v.data());
  }
}
BENCHMARK(AutoencoderEncode)->Arg(16)->Arg(32)->Arg(64);

static void AutoencoderDecode(benchmark::State& state) {
  const int size = static_cast<int>(state.range(0));
  VaeConfig cfg;
  cfg.image_size = size;
  cfg.latent_grid = size / 4;
  cfg.hidden = 16;
  VaeModel model(cfg, 33);
  Rng rng(34);
  RgbaImage img(size, size);
  for (auto& v : img.px) v = static_cast<float>(rng.uniform());
  const LatentPair lat = model.encode_mean(img);
  for (auto _ : state) {
    RgbaImage out = model.decode(lat);
    benchmark::DoNotOptimize(out.px.data());
  }
}
BENCHMARK(AutoencoderDecode)->Arg(16)->Arg(32)->Arg(64);

BENCHMARK_MAIN();
