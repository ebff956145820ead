#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "layercake/image.hpp"

namespace layercake {

enum class MetricKind { mse, psnr, ssim };

std::string to_string(MetricKind kind);

// Backdrop an RGBA image is composited onto before scoring. The checker
// matte uses the standard 0.8/0.6 gray checkerboard.
struct Matte {
  bool checker = false;
  int cell = 8;  // checker cell size in pixels
  float r = 1.0f, g = 1.0f, b = 1.0f;  // solid color when !checker
};

// The three standard mattes: white, black, checkerboard (cell 8).
std::vector<Matte> metric_mattes();

std::string matte_name(const Matte& m);

RgbaImage apply_matte(const RgbaImage& img, const Matte& m);

// Plain RGB metrics on already-composited images (alpha ignored).
// Doubles throughout; mse averages over pixels and the three channels.
double rgb_mse(const RgbaImage& a, const RgbaImage& b);

// 10*log10(1/mse), reporting the 99 dB cap when mse < 1e-10.
double psnr_from_mse(double mse);

// Mean SSIM over RGB channels and all sliding wx-by-wy windows, where the
// window is 8x8 clamped to the image size. Uniform window weights, biased
// (1/n) moments, K1=0.01, K2=0.03, dynamic range 1.
double rgb_ssim(const RgbaImage& a, const RgbaImage& b);

double metric_on_matte(const RgbaImage& a, const RgbaImage& b, MetricKind kind,
                       const Matte& m);

// Composites both images on each standard matte and returns the mean of the
// per-matte scores.
double rgba_metric(const RgbaImage& a, const RgbaImage& b, MetricKind kind);

// --- Feature-space distribution distance ------------------------------------

struct FeatureGaussian {
  std::vector<double> mean;  // [dim]
  std::vector<double> cov;   // [dim*dim], row-major
  int dim = 0;
};

// Sample mean and covariance (unbiased, 1/(n-1)). When n < dim+1 the
// covariance is not full rank, so a 1e-6 ridge is added to the diagonal.
FeatureGaussian fit_gaussian(const std::vector<std::vector<double>>& rows);

// |mu1-mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}), computed with symmetric
// eigendecompositions; negative eigenvalues are clamped to zero and the
// result is clamped at zero.
double frechet_distance(const FeatureGaussian& a, const FeatureGaussian& b);

// Pooled activations of the fixed random feature stack applied to the image
// composited on white.
std::vector<double> image_features(const RgbaImage& img,
                                   std::uint64_t feature_seed);

// Frechet distance between the feature distributions of two image sets.
double desk_fid(const std::vector<RgbaImage>& a, const std::vector<RgbaImage>& b,
                std::uint64_t feature_seed = 7);

// --- Reports -----------------------------------------------------------------

struct SampleMetrics {
  std::string id;
  double mse = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct MetricReport {
  std::vector<SampleMetrics> per_sample;
  SampleMetrics aggregate;               // id "aggregate"; means of per_sample
  std::optional<double> fid;             // absent unless sets were scored
  std::map<std::string, double> judge;   // method -> normalized mean; empty = off
  int judge_errors = 0;                  // rejected judge cases
  std::vector<Matte> mattes_used;
};

SampleMetrics aggregate_of(const std::vector<SampleMetrics>& rows);

// Scores output[i] against reference[i]: per-matte metrics averaged over
// `mattes` (the standard three by default, matching rgba_metric).
MetricReport make_metric_report(const std::vector<std::string>& ids,
                                const std::vector<RgbaImage>& outputs,
                                const std::vector<RgbaImage>& references,
                                const std::vector<Matte>& mattes = metric_mattes());

// Deterministic serializers (stable key order, no timestamps).
std::string report_to_json(const MetricReport& report);
std::string report_to_csv(const MetricReport& report);

}  // namespace layercake
