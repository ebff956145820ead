#include "layercake/selfcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "layercake/bundle.hpp"
#include "layercake/commands.hpp"
#include "layercake/config.hpp"
#include "layercake/decompose.hpp"
#include "layercake/flow.hpp"
#include "layercake/image.hpp"
#include "layercake/judge.hpp"
#include "layercake/metrics.hpp"
#include "layercake/rng.hpp"
#include "layercake/vae.hpp"

namespace layercake {
namespace fs = std::filesystem;
namespace {

std::string fmt(const char* format, ...) {
  char buf[512];
  va_list args;
  va_start(args, format);
  std::vsnprintf(buf, sizeof(buf), format, args);
  va_end(args);
  return buf;
}

RgbaImage random_pixel(Rng& rng, bool opaque) {
  RgbaImage img(1, 1);
  for (int c = 0; c < 3; ++c) img.px[static_cast<std::size_t>(c)] = static_cast<float>(rng.uniform());
  img.px[3] = opaque ? 1.0f : static_cast<float>(rng.uniform());
  return img;
}

RgbaImage random_image(int size, Rng& rng) {
  RgbaImage img(size, size);
  for (float& v : img.px) v = static_cast<float>(rng.uniform());
  return img;
}

double max_channel_dev(const RgbaImage& a, const RgbaImage& b) {
  double dev = 0.0;
  for (std::size_t i = 0; i < a.px.size(); ++i) {
    dev = std::max(dev, std::fabs(static_cast<double>(a.px[i]) - b.px[i]));
  }
  return dev;
}

// --- check 1: over() associativity and flatten-fold equivalence ------------

CheckResult check_compositing_algebra() {
  CheckResult r{1, "compositing algebra", false, ""};
  Rng rng(2001);
  const int trials = 10000;
  double max_dev = 0.0, max_alpha_dev = 0.0;
  for (int trial = 0; trial < trials; ++trial) {
    const int depth = rng.uniform_int(3, 6);
    const bool opaque_bottom = (trial % 2) == 0;
    std::vector<RgbaImage> stack;
    for (int i = 0; i < depth; ++i) {
      stack.push_back(random_pixel(rng, opaque_bottom && i == 0));
    }
    const RgbaImage flat = flatten(stack);
    // Bottom-first left fold, the documented flatten order.
    RgbaImage left = stack[0];
    for (int i = 1; i < depth; ++i) left = over(stack[i], left);
    // Top-first right fold; equality is the associativity property.
    RgbaImage right = stack[static_cast<std::size_t>(depth) - 1];
    for (int i = depth - 2; i >= 0; --i) right = over(right, stack[static_cast<std::size_t>(i)]);

    max_dev = std::max({max_dev, max_channel_dev(flat, left),
                        max_channel_dev(left, right)});
    if (opaque_bottom) {
      max_alpha_dev = std::max(
          max_alpha_dev, std::fabs(static_cast<double>(flat.px[3]) - 1.0));
    }
  }
  r.pass = max_dev < 1e-6 && max_alpha_dev < 1e-6;
  r.detail = fmt("%d stacks, max fold deviation %.3g, opaque-bottom alpha deviation %.3g",
                 trials, max_dev, max_alpha_dev);
  return r;
}

// --- check 2: grid split/assemble roundtrip --------------------------------

CheckResult check_grid_roundtrip() {
  CheckResult r{2, "grid roundtrip", false, ""};
  Rng rng(2002);
  int exact = 0;
  const int trials = 100;
  for (int trial = 0; trial < trials; ++trial) {
    const int size = 2 * rng.uniform_int(1, 8);
    std::array<RgbaImage, 4> quads = {
        random_image(size, rng), random_image(size, rng),
        random_image(size, rng), random_image(size, rng)};
    const GridSample grid =
        assemble_grid(quads[0], quads[1], quads[2], quads[3]);
    const std::array<RgbaImage, 4> back = split_grid(grid.grid);
    bool ok = true;
    for (int q = 0; q < 4; ++q) {
      ok = ok && back[static_cast<std::size_t>(q)].px == quads[static_cast<std::size_t>(q)].px;
    }
    exact += ok;
  }
  r.pass = exact == trials;
  r.detail = fmt("%d/%d quadruples bit-exact", exact, trials);
  return r;
}

// --- check 3: autoencoder loss oracles --------------------------------------

CheckResult check_vae_loss_oracle() {
  CheckResult r{3, "autoencoder loss oracle", false, ""};
  VaeConfig cfg;
  cfg.image_size = 16;
  cfg.latent_grid = 4;
  cfg.hidden = 4;
  Rng rng(2003);
  const RgbaImage img = random_image(16, rng);

  auto stats = [&](double mu, double logvar) {
    LatentPair lat;
    lat.mu_rgb = Tensor::full({cfg.channels_rgb, 4, 4}, mu);
    lat.logvar_rgb = Tensor::full({cfg.channels_rgb, 4, 4}, logvar);
    lat.mu_a = Tensor::full({cfg.channels_a, 4, 4}, mu);
    lat.logvar_a = Tensor::full({cfg.channels_a, 4, 4}, logvar);
    return lat;
  };

  // Identical reconstruction and a unit-Gaussian posterior: every component 0.
  const VaeLossBreakdown zero = vae_loss(img, img, stats(0.0, 0.0), cfg);
  const bool zeros_exact = zero.pixel == 0.0 && zero.patch == 0.0 &&
                           zero.perceptual == 0.0 && zero.kl_rgb == 0.0 &&
                           zero.kl_a == 0.0 && zero.total == 0.0;

  // Constant posterior statistics admit a closed-form KL per element.
  const double mu = 0.3, lv = 0.7;
  const double want_kl = 0.5 * (mu * mu + std::exp(lv) - 1.0 - lv);
  const VaeLossBreakdown klb = vae_loss(img, img, stats(mu, lv), cfg);
  const double kl_err = std::max(std::fabs(klb.kl_rgb - want_kl),
                                 std::fabs(klb.kl_a - want_kl));

  // The total is the lambda-weighted sum of the printed components.
  const RgbaImage recon = random_image(16, rng);
  const VaeLossBreakdown mix = vae_loss(img, recon, stats(0.2, -0.4), cfg);
  const double want_total = cfg.lambda_pixel * mix.pixel +
                            cfg.lambda_patch * mix.patch +
                            cfg.lambda_perceptual * mix.perceptual +
                            cfg.lambda_kl * (mix.kl_rgb + mix.kl_a);
  const double total_err = std::fabs(mix.total - want_total);

  r.pass = zeros_exact && kl_err < 1e-6 && total_err < 1e-6;
  r.detail = fmt("zero cases %s, closed-form KL error %.3g, weighted-sum error %.3g",
                 zeros_exact ? "exact" : "NONZERO", kl_err, total_err);
  return r;
}

// --- check 4: analytic gradients vs central differences ---------------------

CheckResult check_gradients() {
  CheckResult r{4, "gradient checks", false, ""};
  const double h = 1e-5;
  double max_rel = 0.0;
  int slices = 0;
  auto rel_of = [](double numeric, double got) {
    return std::fabs(numeric - got) /
           std::max({std::fabs(numeric), std::fabs(got), 1e-6});
  };

  // Flow-matching loss through a one-block transformer.
  {
    FlowConfig cfg;
    cfg.latent_channels = 3;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_blocks = 1;
    cfg.mlp_mult = 2;
    FlowModel model(cfg, 23);
    Rng rng(2004);
    FlowCondition cond;
    cond.cond_tokens = Tensor::randn({4, 3}, rng, 1.0);
    cond.mask_tokens = Tensor::randn({4, 1}, rng, 0.3);
    cond.prompt = embed_prompt(HierarchicalPrompt{});
    cond.task = FlowTask::fg_extract;
    cond.target_grid = 2;
    const Tensor z0 = Tensor::randn({4, 3}, rng, 1.0);
    const Tensor z1 = Tensor::randn({4, 3}, rng, 1.0);
    const FlowBatch batch = make_flow_batch(z0, z1, 0.35, cond);

    ad::Tape tape;
    nn::BoundParams bound = nn::bind(tape, model.params());
    ad::Value v = model.predict_velocity_on_tape(tape, bound, tape.leaf(batch.zt),
                                                 batch.t, batch.cond);
    ad::Value loss =
        tape.mean_all(tape.square(tape.sub(v, tape.leaf(batch.v_target))));
    tape.backward(loss);

    Rng pick(2014);
    for (const char* name : {"blk0.attn.q.w", "blk0.mlp.w1", "out.w", "time.w1"}) {
      const Tensor& grad = tape.grad(bound.at(name));
      Tensor& p = model.mutable_params()[name];
      const auto i = static_cast<std::int64_t>(
          pick.uniform_int(0, static_cast<int>(p.numel() - 1)));
      const double keep = p.v[i];
      p.v[i] = keep + h;
      const double up = flow_loss(model, batch);
      p.v[i] = keep - h;
      const double dn = flow_loss(model, batch);
      p.v[i] = keep;
      max_rel = std::max(max_rel, rel_of((up - dn) / (2.0 * h), grad.v[i]));
      ++slices;
    }
  }

  // Full autoencoder objective.
  {
    VaeConfig cfg;
    cfg.image_size = 8;
    cfg.latent_grid = 2;
    cfg.hidden = 4;
    VaeModel model(cfg, 29);
    Rng rng(2005);
    const std::vector<RgbaImage> batch{random_image(8, rng)};
    const std::uint64_t noise_seed = 7;
    nn::ParamStore grads;
    vae_batch_loss(model, batch, noise_seed, &grads);

    Rng pick(2015);
    for (const char* name : {"enc.conv1.w", "dec.conv2.w", "enc.head_rgb.w"}) {
      Tensor& p = model.mutable_params()[name];
      const auto i = static_cast<std::int64_t>(
          pick.uniform_int(0, static_cast<int>(p.numel() - 1)));
      const double keep = p.v[i];
      p.v[i] = keep + h;
      const double up = vae_batch_loss(model, batch, noise_seed).total;
      p.v[i] = keep - h;
      const double dn = vae_batch_loss(model, batch, noise_seed).total;
      p.v[i] = keep;
      max_rel = std::max(max_rel, rel_of((up - dn) / (2.0 * h), grads.at(name).v[i]));
      ++slices;
    }
  }

  r.pass = max_rel < 1e-3 && slices >= 6;
  r.detail = fmt("%d parameter slices, max relative error %.3g", slices, max_rel);
  return r;
}

// --- check 5: Euler integration is exact on the true linear field -----------

CheckResult check_euler_exactness() {
  CheckResult r{5, "euler exactness", false, ""};
  Rng rng(2006);
  const Tensor z0 = Tensor::randn({16, 6}, rng, 1.0);
  const Tensor z1 = Tensor::randn({16, 6}, rng, 1.0);
  Tensor v = z1;
  for (std::int64_t i = 0; i < v.numel(); ++i) v.v[i] -= z0.v[i];

  double max_err = 0.0;
  for (int steps : {1, 4, 16}) {
    const Tensor end = euler_integrate(
        z0, steps, [&](const Tensor&, double) { return v; });
    for (std::int64_t i = 0; i < end.numel(); ++i) {
      max_err = std::max(max_err, std::fabs(end.v[i] - z1.v[i]));
    }
  }
  r.pass = max_err < 1e-6;
  r.detail = fmt("steps {1,4,16}, max endpoint error %.3g", max_err);
  return r;
}

// --- check 6: adapter identities --------------------------------------------

CheckResult check_adapter_contracts() {
  CheckResult r{6, "adapter contracts", false, ""};
  FlowConfig cfg;
  cfg.latent_channels = 3;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.n_blocks = 1;
  cfg.mlp_mult = 2;
  cfg.lora_rank = 2;
  cfg.lora_alpha = 2.0;
  const FlowModel model(cfg, 33);
  Rng rng(2007);
  FlowCondition cond;
  cond.cond_tokens = Tensor::randn({4, 3}, rng, 1.0);
  cond.prompt = embed_prompt(HierarchicalPrompt{});
  cond.task = FlowTask::fg_erase;
  cond.target_grid = 2;
  const Tensor zt = Tensor::randn({4, 3}, rng, 1.0);

  LoraSet lora = model.make_lora_set(5);
  const Tensor plain = model.predict_velocity(zt, 0.4, cond);
  const Tensor with_zero = model.predict_velocity(zt, 0.4, cond, &lora);
  const bool identity_exact = plain.v == with_zero.v;

  for (auto& [name, t] : lora.params) {
    (void)name;
    for (std::int64_t i = 0; i < t.numel(); ++i) t.v[i] = 0.2 * rng.normal();
  }
  const Tensor unmerged = model.predict_velocity(zt, 0.4, cond, &lora);
  const FlowModel merged = model.merge_lora(lora);
  const Tensor folded = merged.predict_velocity(zt, 0.4, cond);
  double max_dev = 0.0;
  for (std::int64_t i = 0; i < folded.numel(); ++i) {
    max_dev = std::max(max_dev, std::fabs(folded.v[i] - unmerged.v[i]));
  }

  r.pass = identity_exact && max_dev <= 1e-5;
  r.detail = fmt("zero-init %s, merged-vs-unmerged deviation %.3g",
                 identity_exact ? "bit-exact" : "DIFFERS", max_dev);
  return r;
}

// --- check 7: small-corpus autoencoder convergence ---------------------------

std::vector<RgbaImage> convergence_corpus() {
  std::vector<RgbaImage> images;
  for (std::uint64_t s = 0; images.size() < 64; ++s) {
    const LayerDocument doc = synth_poster(s, 16);
    for (const auto& l : doc.layers) images.push_back(l.image);
    images.push_back(doc.composite);
  }
  images.resize(64);
  return images;
}

CheckResult check_vae_convergence(const SelfcheckOptions& opts,
                                  const fs::path& work) {
  CheckResult r{7, "autoencoder convergence", false, ""};
  const std::vector<RgbaImage> images = convergence_corpus();
  VaeConfig cfg;
  cfg.image_size = 16;
  cfg.latent_grid = 4;
  cfg.hidden = 16;
  VaeTrainOptions to;
  to.steps = opts.full ? 2000 : 60;
  to.batch_size = 8;
  to.lr = 1e-3;
  to.seed = 43;

  auto run = [&](const fs::path& ckpt) {
    VaeModel model(cfg, 41);
    const VaeTrainResult res = train_vae(model, images, to);
    model.save(ckpt);
    return res;
  };
  const VaeTrainResult a = run(work / "conv_a.ckpt");
  const VaeTrainResult b = run(work / "conv_b.ckpt");

  bool curves_equal = a.curve.size() == b.curve.size();
  for (std::size_t i = 0; curves_equal && i < a.curve.size(); ++i) {
    curves_equal = a.curve[i].total == b.curve[i].total &&
                   a.curve[i].pixel == b.curve[i].pixel;
  }
  std::ifstream fa(work / "conv_a.ckpt", std::ios::binary);
  std::ifstream fb(work / "conv_b.ckpt", std::ios::binary);
  std::stringstream sa, sb;
  sa << fa.rdbuf();
  sb << fb.rdbuf();
  const bool ckpt_equal = sa.str() == sb.str() && !sa.str().empty();

  const double first = a.curve.front().pixel;
  const double last = a.curve.back().pixel;
  const double required = opts.full ? 0.5 : 0.95;
  r.pass = last <= required * first && curves_equal && ckpt_equal;
  r.detail = fmt("%s%d steps, pixel L1 %.4f -> %.4f (<= %.2fx required), reruns %s",
                 opts.full ? "" : "smoke ", to.steps, first, last, required,
                 (curves_equal && ckpt_equal) ? "identical" : "DIVERGED");
  return r;
}

// --- check 8: flow overfit on a handful of triplets --------------------------

CheckResult check_flow_overfit(const SelfcheckOptions& opts) {
  CheckResult r{8, "flow overfit", false, ""};
  VaeConfig vc;
  vc.image_size = 16;
  vc.latent_grid = 4;
  vc.hidden = 16;
  const VaeModel vae(vc, 29);  // frozen random encoder: targets, not quality

  // One extraction per document: consecutive peels of the same poster give
  // near-duplicate conditions with unrelated targets, which no small model
  // can separate cleanly.
  std::vector<FlowSample> samples;
  for (std::uint64_t s = 0; samples.size() < 8 && s < 32; ++s) {
    const std::vector<LayerDocument> doc = {synth_poster(s, 16)};
    std::vector<FlowSample> per_doc =
        edit_task_samples(vae, doc, FlowTask::fg_extract);
    if (!per_doc.empty()) samples.push_back(std::move(per_doc.front()));
  }
  if (samples.size() < 8) {
    r.detail = fmt("corpus yielded %zu triplets (need 8)", samples.size());
    return r;
  }

  FlowConfig fc;
  fc.d_model = 128;
  fc.n_heads = 2;
  fc.n_blocks = 2;
  fc.mlp_mult = 4;
  FlowModel model(fc, 31);
  // Full-batch training with a stepped learning-rate decay; 3000 steps total.
  FlowTrainOptions to;
  to.batch_size = 8;
  std::vector<std::pair<int, double>> stages;
  if (opts.full) {
    stages = {{1000, 1e-3}, {800, 3e-4}, {700, 1e-4}, {500, 3e-5}};
  } else {
    stages = {{60, 1e-3}};
  }
  FlowTrainResult res;
  std::uint64_t stage_seed = 37;
  int total_steps = 0;
  for (const auto& [steps, lr] : stages) {
    to.steps = steps;
    to.lr = lr;
    to.seed = stage_seed++;
    FlowTrainResult part = train_flow(model, nullptr, samples, to);
    if (res.curve.empty()) res.curve = std::move(part.curve);
    else res.curve.insert(res.curve.end(), part.curve.begin(), part.curve.end());
    total_steps += steps;
  }

  // Training loss evaluated full-batch over a fixed time grid; this removes
  // the two-sample batch noise from the final-step curve reading.
  double eval_loss = 0.0;
  int n_eval = 0;
  for (const FlowSample& s : samples) {
    for (double t : {0.05, 0.25, 0.5, 0.75, 0.95}) {
      eval_loss += flow_loss(model, make_flow_batch(s.z0, s.z1, t, s.cond));
      ++n_eval;
    }
  }
  eval_loss /= n_eval;

  double max_rel = 0.0;
  for (const FlowSample& s : samples) {
    const Tensor end = sample_edit(model, s.cond, 8);
    double num = 0.0, den = 0.0;
    for (std::int64_t i = 0; i < end.numel(); ++i) {
      num += (end.v[i] - s.z1.v[i]) * (end.v[i] - s.z1.v[i]);
      den += s.z1.v[i] * s.z1.v[i];
    }
    max_rel = std::max(max_rel, std::sqrt(num / den));
  }

  if (opts.full) {
    r.pass = eval_loss < 1e-2 && max_rel <= 0.05;
  } else {
    r.pass = res.curve.back() < 0.8 * res.curve.front() && std::isfinite(max_rel);
  }
  r.detail = fmt("%s%d steps, curve %.4f -> %.4f, full-batch loss %.3g, max endpoint rel L2 %.3g",
                 opts.full ? "" : "smoke ", total_steps, res.curve.front(),
                 res.curve.back(), eval_loss, max_rel);
  return r;
}

// --- check 9: decomposition closure on recorded peels ------------------------

CheckResult check_oracle_closure() {
  CheckResult r{9, "oracle decomposition closure", false, ""};
  double max_err = 0.0;
  const int docs = 20;
  for (int i = 0; i < docs; ++i) {
    const LayerDocument truth = synth_poster(1000 + static_cast<std::uint64_t>(i), 32);
    OracleModelSet oracle(make_triplets(truth));
    DecomposeOptions opts;
    opts.k_max = 8;
    const LayerDocument rebuilt = decompose(truth.composite, oracle, opts);
    max_err = std::max(max_err, recompose_error(rebuilt, truth.composite));
  }
  r.pass = max_err < 1e-6;
  r.detail = fmt("%d documents, max recompose error %.3g", docs, max_err);
  return r;
}

// --- check 10: metric arithmetic oracles -------------------------------------

CheckResult check_metric_oracles() {
  CheckResult r{10, "metric oracles", false, ""};
  const double psnr_err = std::fabs(psnr_from_mse(0.01) - 20.0);

  Rng rng(2010);
  const RgbaImage img = random_image(16, rng);
  const double ssim_err = std::fabs(rgba_metric(img, img, MetricKind::ssim) - 1.0);

  // Isotropic Gaussians: d = |dmu|^2 + sum (sqrt(s1) - sqrt(s2))^2 per axis.
  FeatureGaussian g1, g2;
  g1.dim = g2.dim = 3;
  g1.mean = {0.0, 0.0, 0.0};
  g2.mean = {1.0, 0.0, 0.0};
  g1.cov = {4, 0, 0, 0, 4, 0, 0, 0, 4};
  g2.cov = {9, 0, 0, 0, 9, 0, 0, 0, 9};
  const double want = 1.0 + 3.0 * (4.0 + 9.0 - 2.0 * 6.0);
  const double fid_err = std::fabs(frechet_distance(g1, g2) - want);

  std::vector<RgbaImage> set;
  for (std::uint64_t s = 0; s < 12; ++s) set.push_back(synth_poster(s, 16).composite);
  const double self_fid = desk_fid(set, set);

  r.pass = psnr_err < 1e-9 && ssim_err < 1e-9 && fid_err < 1e-3 && self_fid < 1e-6;
  r.detail = fmt("psnr err %.3g, self-ssim err %.3g, closed-form distance err %.3g, self distance %.3g",
                 psnr_err, ssim_err, fid_err, self_fid);
  return r;
}

// --- check 11: judge protocol arithmetic and rejection ------------------------

CheckResult check_judge_protocol(const fs::path& work) {
  CheckResult r{11, "judge protocol", false, ""};
  const fs::path dir = work / "judge_cases";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const char* bodies[] = {R"({"M": 4})", R"({"M": 5})", R"({"M": 4})",
                          R"({"M": "five"})"};
  for (int i = 0; i < 4; ++i) {
    std::ofstream os(dir / fmt("case_%03d.json", i), std::ios::binary);
    os << bodies[i];
  }
  RgbaImage render(4, 4);
  for (float& v : render.px) v = 0.5f;
  std::vector<JudgeCase> cases;
  for (int i = 0; i < 4; ++i) {
    JudgeCase c;
    c.id = fmt("case%d", i);
    c.method_names = {"M"};
    c.renders = {render};
    cases.push_back(std::move(c));
  }

  FixtureJudgeClient three(dir);
  const JudgeOutcome clean = judge_score(
      std::vector<JudgeCase>(cases.begin(), cases.begin() + 3), three);
  const double clean_err = std::fabs(clean.scores.at("M") - 0.8667);

  FixtureJudgeClient four(dir);
  const JudgeOutcome tainted = judge_score(cases, four);
  const double tainted_err = std::fabs(tainted.scores.at("M") - 0.8667);

  r.pass = clean_err <= 1e-4 && clean.errors == 0 && tainted.errors == 1 &&
           tainted.cases_used == 3 && tainted_err <= 1e-4;
  r.detail = fmt("mean 13/3 normalized to %.5f (err %.2g), malformed case excluded with %d error(s)",
                 clean.scores.at("M"), clean_err, tainted.errors);
  return r;
}

// --- check 12: end-to-end byte determinism ------------------------------------

RunConfig scripted_config() {
  RunConfig cfg;
  cfg.seed = 7;
  cfg.image_size = 16;
  cfg.dataset.count = 6;
  cfg.vae.hidden = 4;
  cfg.vae.steps = 25;
  cfg.vae.batch_size = 4;
  cfg.flow.d_model = 8;
  cfg.flow.n_heads = 2;
  cfg.flow.n_blocks = 1;
  cfg.flow.mlp_mult = 2;
  cfg.flow.lora_rank = 2;
  cfg.flow.lora_alpha = 2;
  cfg.flow.steps = 10;
  cfg.flow.batch_size = 2;
  cfg.flow.sampler_steps = 2;
  cfg.decompose.k_max = 2;
  return cfg;
}

void run_pipeline_inprocess(const RunConfig& cfg, const fs::path& tree) {
  cmd_synth_data(cfg, tree);
  cmd_train_vae(cfg, tree / "data", tree);
  cmd_train_flow(cfg, tree / "data", tree / "vae.ckpt", tree);
  cmd_decompose(cfg, tree / "data" / "bundle_000" / "composite.png", tree,
                tree / "pred" / "bundle_000");
  cmd_eval(cfg, tree / "pred", tree / "data", tree);
}

void run_pipeline_cli(const std::string& cli, const fs::path& config,
                      const fs::path& tree, const fs::path& log) {
  auto shell = [&](const std::string& args) {
    const std::string cmd = "'" + cli + "' " + args + " >> '" + log.string() +
                            "' 2>&1";
    const int rc = std::system(cmd.c_str());
    if (rc != 0) {
      throw std::runtime_error("pipeline command failed (see " + log.string() +
                               "): " + args);
    }
  };
  const std::string c = " --config '" + config.string() + "'";
  const std::string t = tree.string();
  shell("synth-data" + c + " --out '" + t + "'");
  shell("train-vae" + c + " --data '" + t + "/data' --out '" + t + "'");
  shell("train-flow" + c + " --data '" + t + "/data' --vae '" + t +
        "/vae.ckpt' --out '" + t + "'");
  shell("decompose" + c + " --in '" + t + "/data/bundle_000/composite.png'" +
        " --models '" + t + "' --out '" + t + "/pred/bundle_000'");
  shell("eval" + c + " --pred '" + t + "/pred' --ref '" + t + "/data' --out '" +
        t + "'");
}

std::vector<std::pair<std::string, std::string>> tree_contents(
    const fs::path& root) {
  std::vector<std::pair<std::string, std::string>> files;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (!entry.is_regular_file()) continue;
    std::ifstream in(entry.path(), std::ios::binary);
    std::stringstream body;
    body << in.rdbuf();
    files.emplace_back(fs::relative(entry.path(), root).generic_string(),
                       body.str());
  }
  std::sort(files.begin(), files.end());
  return files;
}

CheckResult check_reproducibility(const SelfcheckOptions& opts,
                                  const fs::path& work) {
  CheckResult r{12, "end-to-end determinism", false, ""};
  const RunConfig cfg = scripted_config();
  const fs::path tree_a = work / "run_a";
  const fs::path tree_b = work / "run_b";
  fs::remove_all(tree_a);
  fs::remove_all(tree_b);

  if (opts.cli.empty()) {
    run_pipeline_inprocess(cfg, tree_a);
    run_pipeline_inprocess(cfg, tree_b);
  } else {
    const fs::path config = work / "scripted.json";
    std::ofstream(config, std::ios::binary) << run_config_json(cfg);
    const fs::path log = work / "pipeline.log";
    fs::remove(log);
    run_pipeline_cli(opts.cli, config, tree_a, log);
    run_pipeline_cli(opts.cli, config, tree_b, log);
  }

  const auto a = tree_contents(tree_a);
  const auto b = tree_contents(tree_b);
  std::size_t mismatched = 0;
  if (a.size() == b.size()) {
    for (std::size_t i = 0; i < a.size(); ++i) mismatched += a[i] != b[i];
  } else {
    mismatched = std::max(a.size(), b.size());
  }
  r.pass = !a.empty() && mismatched == 0;
  r.detail = fmt("%zu files per tree, %zu mismatched (%s runner)", a.size(),
                 mismatched, opts.cli.empty() ? "in-process" : "subprocess");
  return r;
}

}  // namespace

bool all_passed(const std::vector<CheckResult>& results) {
  return std::all_of(results.begin(), results.end(),
                     [](const CheckResult& r) { return r.pass; });
}

std::vector<CheckResult> run_selfcheck(const SelfcheckOptions& opts) {
  fs::path work = opts.work_dir;
  if (work.empty()) work = fs::temp_directory_path() / "layercake_selfcheck";
  fs::create_directories(work);

  std::vector<CheckResult> results;
  using Runner = std::function<CheckResult()>;
  const std::vector<Runner> checks = {
      [&] { return check_compositing_algebra(); },
      [&] { return check_grid_roundtrip(); },
      [&] { return check_vae_loss_oracle(); },
      [&] { return check_gradients(); },
      [&] { return check_euler_exactness(); },
      [&] { return check_adapter_contracts(); },
      [&] { return check_vae_convergence(opts, work); },
      [&] { return check_flow_overfit(opts); },
      [&] { return check_oracle_closure(); },
      [&] { return check_metric_oracles(); },
      [&] { return check_judge_protocol(work); },
      [&] { return check_reproducibility(opts, work); },
  };
  for (const Runner& runner : checks) {
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult r;
    try {
      r = runner();
    } catch (const std::exception& e) {
      r.id = static_cast<int>(results.size()) + 1;
      r.name = "check " + std::to_string(r.id);
      r.pass = false;
      r.detail = std::string("exception: ") + e.what();
    }
    const auto t1 = std::chrono::steady_clock::now();
    r.seconds = std::chrono::duration<double>(t1 - t0).count();

    // Checks with a pinned runtime budget fail when they blow it.
    if (r.id == 1 && r.seconds >= 10.0) {
      r.pass = false;
      r.detail += " [over 10 s budget]";
    }
    if (r.id == 7 && opts.full && r.seconds >= 600.0) {
      r.pass = false;
      r.detail += " [over 10 min budget]";
    }
    if (r.id == 8 && opts.full && r.seconds >= 1200.0) {
      r.pass = false;
      r.detail += " [over 20 min budget]";
    }
    std::printf("criterion %2d %s %s: %s (%.1f s)\n", r.id,
                r.pass ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str(),
                r.seconds);
    std::fflush(stdout);
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace layercake
