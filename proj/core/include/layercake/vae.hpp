#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "layercake/image.hpp"
#include "layercake/nn.hpp"
#include "layercake/rng.hpp"
#include "layercake/tensor.hpp"

namespace layercake {

// Convolutional variational autoencoder over RGBA images with separate latent
// branches for color and alpha. The alpha branch keeps transparency
// information out of the color code so downstream models can treat the two
// independently.
struct VaeConfig {
  int image_size = 16;
  int latent_grid = 4;  // spatial latent resolution; the net downsamples 4x
  int channels_rgb = 4;
  int channels_a = 2;
  int hidden = 16;
  double lambda_pixel = 1.0;
  double lambda_patch = 1.0;
  double lambda_perceptual = 0.1;
  double lambda_kl = 1e-4;
  int patch_size = 4;
  std::uint64_t perceptual_seed = 7;

  void validate() const;  // throws std::invalid_argument on bad settings
};

// Posterior draw for one image. Both branches keep their Gaussian statistics
// and the recorded noise, so z == mu + exp(logvar / 2) * eps always holds and
// eps == 0 reduces to the posterior mean.
struct LatentPair {
  Tensor z_rgb, z_a;            // [channels, grid, grid]
  Tensor mu_rgb, logvar_rgb;
  Tensor mu_a, logvar_a;
  Tensor eps_rgb, eps_a;
};

struct VaeLossBreakdown {
  double pixel = 0.0;       // mean L1 over all four channels
  double patch = 0.0;       // mean L1 over per-patch channel means
  double perceptual = 0.0;  // mean squared error in frozen feature space
  double kl_rgb = 0.0;      // per-element KL against the unit Gaussian
  double kl_a = 0.0;
  double total = 0.0;       // lambda-weighted sum
};

class VaeModel {
 public:
  VaeModel(VaeConfig cfg, std::uint64_t init_seed);
  VaeModel(VaeConfig cfg, nn::ParamStore params, double latent_scale);

  const VaeConfig& config() const { return cfg_; }
  const nn::ParamStore& params() const { return params_; }
  nn::ParamStore& mutable_params() { return params_; }

  // Root-mean-square of posterior means over the training set; downstream
  // consumers divide by it so latents land near unit scale. 1 until trained.
  double latent_scale() const { return latent_scale_; }
  void set_latent_scale(double s);

  // Encoding draws eps from `rng` (color branch first, then alpha, each in
  // row-major element order). encode_mean uses eps == 0. The image must match
  // config().image_size exactly.
  LatentPair encode(const RgbaImage& img, Rng& rng) const;
  LatentPair encode_mean(const RgbaImage& img) const;

  RgbaImage decode(const LatentPair& lat) const;
  RgbaImage decode_latents(const Tensor& z_rgb, const Tensor& z_a) const;

  // Same weights applied at a different square image size (the convolutions
  // are size-independent). Used to run 2x-size grid sheets through a model
  // trained on single tiles.
  VaeModel resized(int image_size) const;

  void save(const std::filesystem::path& path) const;
  static VaeModel load(const std::filesystem::path& path);

  // Differentiable forward passes for the training loop. `bound` must come
  // from nn::bind(tape, params()).
  struct EncodedOnTape {
    ad::Value mu_rgb, logvar_rgb, mu_a, logvar_a;
  };
  EncodedOnTape encode_on_tape(ad::Tape& tape, const nn::BoundParams& bound,
                               ad::Value img_chw) const;
  ad::Value decode_on_tape(ad::Tape& tape, const nn::BoundParams& bound,
                           ad::Value z_rgb, ad::Value z_a) const;
  // Draws the reparameterization noise (color branch, then alpha).
  std::pair<Tensor, Tensor> sample_eps(Rng& rng) const;

 private:
  VaeConfig cfg_;
  nn::ParamStore params_;
  double latent_scale_ = 1.0;
};

// Reconstruction + regularization objective for one image. Works purely from
// the recorded posterior statistics, so hand-crafted LatentPairs make easy
// oracles (mu == 0, logvar == 0 gives zero KL; mu == 1 gives 0.5 per element).
VaeLossBreakdown vae_loss(const RgbaImage& img, const RgbaImage& recon,
                          const LatentPair& lat, const VaeConfig& cfg);

// One full training objective evaluation on a fixed batch with noise drawn
// from `noise_seed` (one stream, images in order). When `grads` is non-null it
// receives d(total)/d(param) for every parameter. This is exactly the
// quantity train_vae differentiates, exposed for optimizer-free inspection.
VaeLossBreakdown vae_batch_loss(const VaeModel& model,
                                const std::vector<RgbaImage>& batch,
                                std::uint64_t noise_seed,
                                nn::ParamStore* grads = nullptr);

struct VaeTrainOptions {
  int steps = 100;
  int batch_size = 8;
  double lr = 1e-3;
  std::uint64_t seed = 1;
};

struct VaeTrainResult {
  std::vector<VaeLossBreakdown> curve;  // one entry per step
  double latent_scale = 1.0;
};

// Adam training loop. Deterministic given (model init, dataset, options):
// step s picks batch indices from seed.derive("batch").derive(s) and draws
// noise from the stream seeded by seed.derive("eps").derive(s). Sets the
// model's latent scale from the trained posterior means before returning.
// Throws std::runtime_error naming the step if the loss goes non-finite.
VaeTrainResult train_vae(VaeModel& model, const std::vector<RgbaImage>& dataset,
                         const VaeTrainOptions& opts);

// RMS of posterior means across a dataset (both branches pooled).
double compute_latent_scale(const VaeModel& model,
                            const std::vector<RgbaImage>& dataset);

}  // namespace layercake
