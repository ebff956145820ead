#include "layercake/vae.hpp"

#include "json.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace layercake {
namespace {

using nlohmann::json;

struct ParamSpec {
  std::string name;
  std::vector<std::int64_t> shape;
};

std::vector<ParamSpec> param_specs(const VaeConfig& c) {
  const std::int64_t h = c.hidden;
  const std::int64_t cr = c.channels_rgb;
  const std::int64_t ca = c.channels_a;
  return {
      {"enc.conv1.w", {h, 4, 3, 3}},          {"enc.conv1.b", {h}},
      {"enc.conv2.w", {h, h, 3, 3}},          {"enc.conv2.b", {h}},
      {"enc.conv3.w", {h, h, 3, 3}},          {"enc.conv3.b", {h}},
      {"enc.head_rgb.w", {2 * cr, h, 3, 3}},  {"enc.head_rgb.b", {2 * cr}},
      {"enc.head_a.w", {2 * ca, h, 3, 3}},    {"enc.head_a.b", {2 * ca}},
      {"dec.conv_in.w", {h, cr + ca, 3, 3}},  {"dec.conv_in.b", {h}},
      {"dec.conv1.w", {h, h, 3, 3}},          {"dec.conv1.b", {h}},
      {"dec.conv2.w", {h, h, 3, 3}},          {"dec.conv2.b", {h}},
      {"dec.head_rgb.w", {3, h, 3, 3}},       {"dec.head_rgb.b", {3}},
      {"dec.head_a.w", {1, h, 3, 3}},         {"dec.head_a.b", {1}},
  };
}

void check_params(const VaeConfig& cfg, const nn::ParamStore& params) {
  for (const auto& spec : param_specs(cfg)) {
    auto it = params.find(spec.name);
    if (it == params.end())
      throw std::invalid_argument("vae: missing parameter " + spec.name);
    if (it->second.shape != spec.shape)
      throw std::invalid_argument("vae: parameter " + spec.name +
                                  " has shape " + it->second.shape_str());
  }
}

// Splits a stacked [2C, g, g] statistics map into its two [C, g, g] halves.
std::pair<ad::Value, ad::Value> split_stats(ad::Tape& t, ad::Value stacked,
                                            std::int64_t c, std::int64_t g) {
  ad::Value flat = t.reshape(stacked, {2 * c, g * g});
  ad::Value first = t.reshape(t.slice_rows(flat, 0, c), {c, g, g});
  ad::Value second = t.reshape(t.slice_rows(flat, c, c), {c, g, g});
  return {first, second};
}

ad::Value concat_channels(ad::Tape& t, ad::Value a, ad::Value b) {
  const std::int64_t ca = t.val(a).dim(0), cb = t.val(b).dim(0);
  const std::int64_t g0 = t.val(a).dim(1), g1 = t.val(a).dim(2);
  ad::Value fa = t.reshape(a, {ca, g0 * g1});
  ad::Value fb = t.reshape(b, {cb, g0 * g1});
  return t.reshape(t.concat_rows({fa, fb}), {ca + cb, g0, g1});
}

double mean_kl(const Tensor& mu, const Tensor& lv) {
  double s = 0.0;
  for (std::int64_t i = 0; i < mu.numel(); ++i) {
    s += 0.5 * (mu.v[i] * mu.v[i] + std::exp(lv.v[i]) - 1.0 - lv.v[i]);
  }
  return s / static_cast<double>(mu.numel());
}

// Per-element KL against the unit Gaussian, on tape:
// 0.5 * (mu^2 + exp(lv) - 1 - lv), averaged.
ad::Value kl_on_tape(ad::Tape& t, ad::Value mu, ad::Value lv) {
  ad::Value elem = t.scale(
      t.sub(t.add(t.square(mu), t.exp_(lv)), t.add_scalar(lv, 1.0)), 0.5);
  return t.mean_all(elem);
}

struct BatchLossGraph {
  ad::Value total;
  VaeLossBreakdown breakdown;
};

}  // namespace

void VaeConfig::validate() const {
  if (image_size < 8 || image_size % 4 != 0)
    throw std::invalid_argument("vae config: image_size must be >= 8 and divisible by 4");
  if (latent_grid * 4 != image_size)
    throw std::invalid_argument("vae config: latent_grid must be image_size / 4");
  if (channels_rgb < 1 || channels_a < 1 || hidden < 1)
    throw std::invalid_argument("vae config: channel and hidden counts must be positive");
  if (patch_size < 1 || image_size % patch_size != 0)
    throw std::invalid_argument("vae config: patch_size must divide image_size");
  if (lambda_pixel < 0 || lambda_patch < 0 || lambda_perceptual < 0 || lambda_kl < 0)
    throw std::invalid_argument("vae config: loss weights must be non-negative");
}

VaeModel::VaeModel(VaeConfig cfg, std::uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  Rng root(init_seed);
  for (const auto& spec : param_specs(cfg_)) {
    if (spec.shape.size() == 1) {
      params_[spec.name] = Tensor::zeros(spec.shape);
    } else {
      Rng layer = root.derive(spec.name);
      const double fan_in = static_cast<double>(spec.shape[1] * 9);
      params_[spec.name] =
          Tensor::randn(spec.shape, layer, std::sqrt(2.0 / fan_in));
    }
  }
}

VaeModel::VaeModel(VaeConfig cfg, nn::ParamStore params, double latent_scale)
    : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  check_params(cfg_, params_);
  set_latent_scale(latent_scale);
}

void VaeModel::set_latent_scale(double s) {
  if (!(s > 0.0) || !std::isfinite(s))
    throw std::invalid_argument("vae: latent scale must be positive and finite");
  latent_scale_ = s;
}

VaeModel::EncodedOnTape VaeModel::encode_on_tape(ad::Tape& t,
                                                 const nn::BoundParams& bound,
                                                 ad::Value img_chw) const {
  ad::Value h1 = t.gelu(t.conv2d(img_chw, bound.at("enc.conv1.w"),
                                 bound.at("enc.conv1.b"), 1, 1));
  ad::Value h2 = t.gelu(t.conv2d(h1, bound.at("enc.conv2.w"),
                                 bound.at("enc.conv2.b"), 2, 1));
  ad::Value h3 = t.gelu(t.conv2d(h2, bound.at("enc.conv3.w"),
                                 bound.at("enc.conv3.b"), 2, 1));
  ad::Value st_rgb = t.conv2d(h3, bound.at("enc.head_rgb.w"),
                              bound.at("enc.head_rgb.b"), 1, 1);
  ad::Value st_a =
      t.conv2d(h3, bound.at("enc.head_a.w"), bound.at("enc.head_a.b"), 1, 1);
  const std::int64_t g = t.val(h3).dim(1);
  auto [mu_rgb, lv_rgb] = split_stats(t, st_rgb, cfg_.channels_rgb, g);
  auto [mu_a, lv_a] = split_stats(t, st_a, cfg_.channels_a, g);
  return {mu_rgb, lv_rgb, mu_a, lv_a};
}

ad::Value VaeModel::decode_on_tape(ad::Tape& t, const nn::BoundParams& bound,
                                   ad::Value z_rgb, ad::Value z_a) const {
  ad::Value z = concat_channels(t, z_rgb, z_a);
  ad::Value d0 = t.gelu(
      t.conv2d(z, bound.at("dec.conv_in.w"), bound.at("dec.conv_in.b"), 1, 1));
  ad::Value d1 = t.gelu(t.conv2d(t.upsample2x(d0), bound.at("dec.conv1.w"),
                                 bound.at("dec.conv1.b"), 1, 1));
  ad::Value d2 = t.gelu(t.conv2d(t.upsample2x(d1), bound.at("dec.conv2.w"),
                                 bound.at("dec.conv2.b"), 1, 1));
  ad::Value rgb = t.sigmoid(t.conv2d(d2, bound.at("dec.head_rgb.w"),
                                     bound.at("dec.head_rgb.b"), 1, 1));
  ad::Value a = t.sigmoid(
      t.conv2d(d2, bound.at("dec.head_a.w"), bound.at("dec.head_a.b"), 1, 1));
  return concat_channels(t, rgb, a);
}

std::pair<Tensor, Tensor> VaeModel::sample_eps(Rng& rng) const {
  const std::int64_t g = cfg_.latent_grid;
  Tensor eps_rgb = Tensor::randn({cfg_.channels_rgb, g, g}, rng, 1.0);
  Tensor eps_a = Tensor::randn({cfg_.channels_a, g, g}, rng, 1.0);
  return {std::move(eps_rgb), std::move(eps_a)};
}

LatentPair VaeModel::encode(const RgbaImage& img, Rng& rng) const {
  auto [eps_rgb, eps_a] = sample_eps(rng);
  LatentPair lat = encode_mean(img);
  lat.eps_rgb = std::move(eps_rgb);
  lat.eps_a = std::move(eps_a);
  auto reparam = [](Tensor& z, const Tensor& mu, const Tensor& lv,
                    const Tensor& eps) {
    for (std::int64_t i = 0; i < z.numel(); ++i)
      z.v[i] = mu.v[i] + std::exp(0.5 * lv.v[i]) * eps.v[i];
  };
  reparam(lat.z_rgb, lat.mu_rgb, lat.logvar_rgb, lat.eps_rgb);
  reparam(lat.z_a, lat.mu_a, lat.logvar_a, lat.eps_a);
  return lat;
}

LatentPair VaeModel::encode_mean(const RgbaImage& img) const {
  if (img.width != cfg_.image_size || img.height != cfg_.image_size) {
    throw std::invalid_argument(
        "vae encode: image is " + std::to_string(img.width) + "x" +
        std::to_string(img.height) + " but the model expects " +
        std::to_string(cfg_.image_size) + "x" + std::to_string(cfg_.image_size));
  }
  ad::Tape t;
  nn::BoundParams bound = nn::bind(t, params_);
  EncodedOnTape enc = encode_on_tape(t, bound, t.leaf(image_to_chw(img)));
  LatentPair lat;
  lat.mu_rgb = t.val(enc.mu_rgb);
  lat.logvar_rgb = t.val(enc.logvar_rgb);
  lat.mu_a = t.val(enc.mu_a);
  lat.logvar_a = t.val(enc.logvar_a);
  lat.eps_rgb = Tensor::zeros(lat.mu_rgb.shape);
  lat.eps_a = Tensor::zeros(lat.mu_a.shape);
  lat.z_rgb = lat.mu_rgb;
  lat.z_a = lat.mu_a;
  return lat;
}

RgbaImage VaeModel::decode(const LatentPair& lat) const {
  return decode_latents(lat.z_rgb, lat.z_a);
}

RgbaImage VaeModel::decode_latents(const Tensor& z_rgb, const Tensor& z_a) const {
  const std::int64_t g = cfg_.latent_grid;
  const std::vector<std::int64_t> want_rgb{cfg_.channels_rgb, g, g};
  const std::vector<std::int64_t> want_a{cfg_.channels_a, g, g};
  if (z_rgb.shape != want_rgb || z_a.shape != want_a) {
    throw std::invalid_argument("vae decode: latent shapes " + z_rgb.shape_str() +
                                " / " + z_a.shape_str() + " do not match the model");
  }
  ad::Tape t;
  nn::BoundParams bound = nn::bind(t, params_);
  ad::Value out = decode_on_tape(t, bound, t.leaf(z_rgb), t.leaf(z_a));
  return chw_to_image(t.val(out));
}

VaeModel VaeModel::resized(int image_size) const {
  VaeConfig cfg = cfg_;
  cfg.image_size = image_size;
  cfg.latent_grid = image_size / 4;
  return VaeModel(cfg, params_, latent_scale_);
}

void VaeModel::save(const std::filesystem::path& path) const {
  json meta;
  meta["kind"] = "rgba_vae";
  meta["image_size"] = cfg_.image_size;
  meta["latent_grid"] = cfg_.latent_grid;
  meta["channels_rgb"] = cfg_.channels_rgb;
  meta["channels_a"] = cfg_.channels_a;
  meta["hidden"] = cfg_.hidden;
  meta["lambda_pixel"] = cfg_.lambda_pixel;
  meta["lambda_patch"] = cfg_.lambda_patch;
  meta["lambda_perceptual"] = cfg_.lambda_perceptual;
  meta["lambda_kl"] = cfg_.lambda_kl;
  meta["patch_size"] = cfg_.patch_size;
  meta["perceptual_seed"] = cfg_.perceptual_seed;
  meta["latent_scale"] = latent_scale_;
  nn::Checkpoint ckpt;
  ckpt.meta_json = meta.dump();
  ckpt.params = params_;
  nn::save_checkpoint(path, ckpt);
}

VaeModel VaeModel::load(const std::filesystem::path& path) {
  nn::Checkpoint ckpt = nn::load_checkpoint(path);
  json meta;
  try {
    meta = json::parse(ckpt.meta_json);
    if (meta.at("kind").get<std::string>() != "rgba_vae")
      throw std::runtime_error("not an rgba_vae checkpoint");
    VaeConfig cfg;
    cfg.image_size = meta.at("image_size").get<int>();
    cfg.latent_grid = meta.at("latent_grid").get<int>();
    cfg.channels_rgb = meta.at("channels_rgb").get<int>();
    cfg.channels_a = meta.at("channels_a").get<int>();
    cfg.hidden = meta.at("hidden").get<int>();
    cfg.lambda_pixel = meta.at("lambda_pixel").get<double>();
    cfg.lambda_patch = meta.at("lambda_patch").get<double>();
    cfg.lambda_perceptual = meta.at("lambda_perceptual").get<double>();
    cfg.lambda_kl = meta.at("lambda_kl").get<double>();
    cfg.patch_size = meta.at("patch_size").get<int>();
    cfg.perceptual_seed = meta.at("perceptual_seed").get<std::uint64_t>();
    return VaeModel(cfg, std::move(ckpt.params),
                    meta.at("latent_scale").get<double>());
  } catch (const json::exception& e) {
    throw std::runtime_error("vae load: bad checkpoint metadata: " +
                             std::string(e.what()));
  }
}

VaeLossBreakdown vae_loss(const RgbaImage& img, const RgbaImage& recon,
                          const LatentPair& lat, const VaeConfig& cfg) {
  if (!img.same_size(recon))
    throw std::invalid_argument("vae loss: image and reconstruction sizes differ");
  if (img.width != cfg.image_size || img.height != cfg.image_size)
    throw std::invalid_argument("vae loss: image size does not match config");
  ad::Tape t;
  ad::Value x = t.leaf(image_to_chw(img));
  ad::Value r = t.leaf(image_to_chw(recon));
  nn::FeatureStack fs(cfg.perceptual_seed, 4);
  VaeLossBreakdown bd;
  bd.pixel = t.val(t.mean_all(t.abs_(t.sub(r, x)))).item();
  bd.patch = t.val(t.mean_all(t.abs_(t.sub(t.avg_pool(r, cfg.patch_size),
                                           t.avg_pool(x, cfg.patch_size)))))
                 .item();
  bd.perceptual =
      t.val(t.mean_all(t.square(t.sub(fs.map(t, r), fs.map(t, x))))).item();
  bd.kl_rgb = mean_kl(lat.mu_rgb, lat.logvar_rgb);
  bd.kl_a = mean_kl(lat.mu_a, lat.logvar_a);
  bd.total = cfg.lambda_pixel * bd.pixel + cfg.lambda_patch * bd.patch +
             cfg.lambda_perceptual * bd.perceptual +
             cfg.lambda_kl * (bd.kl_rgb + bd.kl_a);
  return bd;
}

namespace {

BatchLossGraph build_batch_loss(ad::Tape& t, const VaeModel& model,
                                const nn::BoundParams& bound,
                                const std::vector<RgbaImage>& batch,
                                std::uint64_t noise_seed,
                                const nn::FeatureStack& fs) {
  const VaeConfig& cfg = model.config();
  Rng eps_rng(noise_seed);
  ad::Value total;
  VaeLossBreakdown bd;
  for (const RgbaImage& img : batch) {
    if (img.width != cfg.image_size || img.height != cfg.image_size)
      throw std::invalid_argument("vae training: image size does not match config");
    ad::Value x = t.leaf(image_to_chw(img));
    auto enc = model.encode_on_tape(t, bound, x);
    auto [eps_rgb, eps_a] = model.sample_eps(eps_rng);
    auto reparam = [&](ad::Value mu, ad::Value lv, const Tensor& eps) {
      return t.add(mu, t.mul(t.exp_(t.scale(lv, 0.5)), t.leaf(eps)));
    };
    ad::Value z_rgb = reparam(enc.mu_rgb, enc.logvar_rgb, eps_rgb);
    ad::Value z_a = reparam(enc.mu_a, enc.logvar_a, eps_a);
    ad::Value r = model.decode_on_tape(t, bound, z_rgb, z_a);

    ad::Value pixel = t.mean_all(t.abs_(t.sub(r, x)));
    ad::Value patch = t.mean_all(t.abs_(
        t.sub(t.avg_pool(r, cfg.patch_size), t.avg_pool(x, cfg.patch_size))));
    ad::Value perc = t.mean_all(t.square(t.sub(fs.map(t, r), fs.map(t, x))));
    ad::Value kl_rgb = kl_on_tape(t, enc.mu_rgb, enc.logvar_rgb);
    ad::Value kl_a = kl_on_tape(t, enc.mu_a, enc.logvar_a);
    ad::Value loss = t.add(
        t.add(t.scale(pixel, cfg.lambda_pixel), t.scale(patch, cfg.lambda_patch)),
        t.add(t.scale(perc, cfg.lambda_perceptual),
              t.scale(t.add(kl_rgb, kl_a), cfg.lambda_kl)));
    total = total.valid() ? t.add(total, loss) : loss;
    bd.pixel += t.val(pixel).item();
    bd.patch += t.val(patch).item();
    bd.perceptual += t.val(perc).item();
    bd.kl_rgb += t.val(kl_rgb).item();
    bd.kl_a += t.val(kl_a).item();
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  total = t.scale(total, inv);
  bd.pixel *= inv;
  bd.patch *= inv;
  bd.perceptual *= inv;
  bd.kl_rgb *= inv;
  bd.kl_a *= inv;
  bd.total = t.val(total).item();
  return {total, bd};
}

}  // namespace

VaeLossBreakdown vae_batch_loss(const VaeModel& model,
                                const std::vector<RgbaImage>& batch,
                                std::uint64_t noise_seed,
                                nn::ParamStore* grads) {
  if (batch.empty()) throw std::invalid_argument("vae batch loss: empty batch");
  ad::Tape t;
  nn::BoundParams bound = nn::bind(t, model.params());
  nn::FeatureStack fs(model.config().perceptual_seed, 4);
  BatchLossGraph graph = build_batch_loss(t, model, bound, batch, noise_seed, fs);
  if (grads != nullptr) {
    t.backward(graph.total);
    grads->clear();
    for (const auto& [name, value] : bound.values) {
      (*grads)[name] = t.has_grad(value) ? t.grad(value)
                                         : Tensor::zeros(t.val(value).shape);
    }
  }
  return graph.breakdown;
}

VaeTrainResult train_vae(VaeModel& model, const std::vector<RgbaImage>& dataset,
                         const VaeTrainOptions& opts) {
  if (dataset.empty()) throw std::invalid_argument("train_vae: empty dataset");
  if (opts.steps < 0 || opts.batch_size < 1)
    throw std::invalid_argument("train_vae: bad step or batch settings");
  Rng root(opts.seed);
  nn::Adam::Options adam_opts;
  adam_opts.lr = opts.lr;
  nn::Adam adam(adam_opts);
  nn::FeatureStack fs(model.config().perceptual_seed, 4);
  VaeTrainResult result;
  result.curve.reserve(static_cast<std::size_t>(opts.steps));
  const int n = static_cast<int>(dataset.size());
  for (int step = 0; step < opts.steps; ++step) {
    Rng pick = root.derive("batch").derive(static_cast<std::uint64_t>(step));
    std::vector<RgbaImage> batch;
    batch.reserve(static_cast<std::size_t>(opts.batch_size));
    for (int b = 0; b < opts.batch_size; ++b)
      batch.push_back(dataset[static_cast<std::size_t>(pick.uniform_int(0, n - 1))]);
    const std::uint64_t noise_seed =
        root.derive("eps").derive(static_cast<std::uint64_t>(step)).seed();

    ad::Tape t;
    nn::BoundParams bound = nn::bind(t, model.params());
    BatchLossGraph graph =
        build_batch_loss(t, model, bound, batch, noise_seed, fs);
    if (!std::isfinite(graph.breakdown.total)) {
      throw std::runtime_error("train_vae: non-finite loss at step " +
                               std::to_string(step));
    }
    t.backward(graph.total);
    adam.step(model.mutable_params(), bound, t);
    result.curve.push_back(graph.breakdown);
  }
  result.latent_scale = compute_latent_scale(model, dataset);
  model.set_latent_scale(result.latent_scale);
  return result;
}

double compute_latent_scale(const VaeModel& model,
                            const std::vector<RgbaImage>& dataset) {
  if (dataset.empty())
    throw std::invalid_argument("latent scale: empty dataset");
  double sum_sq = 0.0;
  std::int64_t count = 0;
  for (const RgbaImage& img : dataset) {
    LatentPair lat = model.encode_mean(img);
    for (const Tensor* mu : {&lat.mu_rgb, &lat.mu_a}) {
      for (double v : mu->v) sum_sq += v * v;
      count += mu->numel();
    }
  }
  const double rms = std::sqrt(sum_sq / static_cast<double>(count));
  // An untrained or degenerate encoder should not poison downstream division.
  return rms < 1e-6 ? 1.0 : rms;
}

}  // namespace layercake
