#include "layercake/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "layercake/nn.hpp"
#include "layercake/tensor.hpp"

namespace layercake {
namespace {

void require_same_size(const RgbaImage& a, const RgbaImage& b,
                       const char* where) {
  if (!a.same_size(b))
    throw std::invalid_argument(std::string(where) + ": size mismatch");
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

Eigen::MatrixXd cov_matrix(const FeatureGaussian& g) {
  Eigen::MatrixXd m(g.dim, g.dim);
  for (int i = 0; i < g.dim; ++i)
    for (int j = 0; j < g.dim; ++j) m(i, j) = g.cov[i * g.dim + j];
  // Guard against asymmetry from accumulation order.
  return 0.5 * (m + m.transpose());
}

// Symmetric PSD square root; negative eigenvalues clamp to zero.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

std::string to_string(MetricKind kind) {
  switch (kind) {
    case MetricKind::mse: return "mse";
    case MetricKind::psnr: return "psnr";
    case MetricKind::ssim: return "ssim";
  }
  throw std::invalid_argument("metric kind: unknown value");
}

std::vector<Matte> metric_mattes() {
  Matte white;
  Matte black;
  black.r = black.g = black.b = 0.0f;
  Matte checker;
  checker.checker = true;
  return {white, black, checker};
}

std::string matte_name(const Matte& m) {
  if (m.checker) return "checker" + std::to_string(m.cell);
  if (m.r == 1.0f && m.g == 1.0f && m.b == 1.0f) return "white";
  if (m.r == 0.0f && m.g == 0.0f && m.b == 0.0f) return "black";
  std::ostringstream os;
  os << "rgb(" << m.r << "," << m.g << "," << m.b << ")";
  return os.str();
}

RgbaImage apply_matte(const RgbaImage& img, const Matte& m) {
  return m.checker ? checkerboard_preview(img, m.cell)
                   : composite_on_matte(img, m.r, m.g, m.b);
}

double rgb_mse(const RgbaImage& a, const RgbaImage& b) {
  require_same_size(a, b, "rgb_mse");
  double s = 0.0;
  for (int i = 0; i < a.pixel_count(); ++i) {
    for (int c = 0; c < 3; ++c) {
      const double d = static_cast<double>(a.px[4 * i + c]) - b.px[4 * i + c];
      s += d * d;
    }
  }
  return s / (3.0 * static_cast<double>(a.pixel_count()));
}

double psnr_from_mse(double mse) {
  if (mse < 1e-10) return 99.0;
  return 10.0 * std::log10(1.0 / mse);
}

double rgb_ssim(const RgbaImage& a, const RgbaImage& b) {
  require_same_size(a, b, "rgb_ssim");
  const int wx = std::min(8, a.width);
  const int wy = std::min(8, a.height);
  const double c1 = 1e-4;  // (0.01 * 1)^2
  const double c2 = 9e-4;  // (0.03 * 1)^2
  const double n = static_cast<double>(wx) * wy;

  double total = 0.0;
  long count = 0;
  for (int ch = 0; ch < 3; ++ch) {
    for (int y0 = 0; y0 + wy <= a.height; ++y0) {
      for (int x0 = 0; x0 + wx <= a.width; ++x0) {
        double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
        for (int dy = 0; dy < wy; ++dy) {
          for (int dx = 0; dx < wx; ++dx) {
            const int i = (y0 + dy) * a.width + (x0 + dx);
            const double x = a.px[4 * i + ch];
            const double y = b.px[4 * i + ch];
            sx += x;
            sy += y;
            sxx += x * x;
            syy += y * y;
            sxy += x * y;
          }
        }
        const double mx = sx / n;
        const double my = sy / n;
        const double vx = sxx / n - mx * mx;
        const double vy = syy / n - my * my;
        const double cxy = sxy / n - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) /
                 ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

double metric_on_matte(const RgbaImage& a, const RgbaImage& b, MetricKind kind,
                       const Matte& m) {
  require_same_size(a, b, "rgba_metric");
  const RgbaImage am = apply_matte(a, m);
  const RgbaImage bm = apply_matte(b, m);
  switch (kind) {
    case MetricKind::mse: return rgb_mse(am, bm);
    case MetricKind::psnr: return psnr_from_mse(rgb_mse(am, bm));
    case MetricKind::ssim: return rgb_ssim(am, bm);
  }
  throw std::invalid_argument("metric kind: unknown value");
}

double rgba_metric(const RgbaImage& a, const RgbaImage& b, MetricKind kind) {
  double s = 0.0;
  const std::vector<Matte> mattes = metric_mattes();
  for (const Matte& m : mattes) s += metric_on_matte(a, b, kind, m);
  return s / static_cast<double>(mattes.size());
}

FeatureGaussian fit_gaussian(const std::vector<std::vector<double>>& rows) {
  if (rows.empty())
    throw std::invalid_argument("fit_gaussian: empty sample set");
  const int dim = static_cast<int>(rows[0].size());
  for (const auto& r : rows) {
    if (static_cast<int>(r.size()) != dim)
      throw std::invalid_argument("fit_gaussian: inconsistent dimensions");
  }
  const int n = static_cast<int>(rows.size());

  FeatureGaussian g;
  g.dim = dim;
  g.mean.assign(dim, 0.0);
  for (const auto& r : rows)
    for (int i = 0; i < dim; ++i) g.mean[i] += r[i];
  for (int i = 0; i < dim; ++i) g.mean[i] /= n;

  g.cov.assign(static_cast<std::size_t>(dim) * dim, 0.0);
  const double denom = (n > 1) ? (n - 1.0) : 1.0;
  for (const auto& r : rows) {
    for (int i = 0; i < dim; ++i) {
      const double di = r[i] - g.mean[i];
      for (int j = 0; j < dim; ++j) {
        g.cov[i * dim + j] += di * (r[j] - g.mean[j]) / denom;
      }
    }
  }
  if (n < dim + 1) {
    for (int i = 0; i < dim; ++i) g.cov[i * dim + i] += 1e-6;
  }
  return g;
}

double frechet_distance(const FeatureGaussian& a, const FeatureGaussian& b) {
  if (a.dim != b.dim)
    throw std::invalid_argument("frechet_distance: dimension mismatch");
  const int d = a.dim;
  double mean_term = 0.0;
  for (int i = 0; i < d; ++i) {
    const double diff = a.mean[i] - b.mean[i];
    mean_term += diff * diff;
  }

  const Eigen::MatrixXd s1 = cov_matrix(a);
  const Eigen::MatrixXd s2 = cov_matrix(b);
  // Tr((S1 S2)^{1/2}) via the symmetric form A S2 A with A = S1^{1/2}.
  const Eigen::MatrixXd root1 = psd_sqrt(s1);
  const Eigen::MatrixXd cross = psd_sqrt(root1 * s2 * root1);
  const double trace_term = s1.trace() + s2.trace() - 2.0 * cross.trace();
  return std::max(0.0, mean_term + trace_term);
}

std::vector<double> image_features(const RgbaImage& img,
                                   std::uint64_t feature_seed) {
  nn::FeatureStack stack(feature_seed);
  const Tensor pooled = stack.pooled(image_to_chw(composite_on_matte(img, 1, 1, 1)));
  return std::vector<double>(pooled.v.begin(), pooled.v.end());
}

double desk_fid(const std::vector<RgbaImage>& a, const std::vector<RgbaImage>& b,
                std::uint64_t feature_seed) {
  if (a.empty() || b.empty())
    throw std::invalid_argument("desk_fid: empty image set");
  nn::FeatureStack stack(feature_seed);
  auto embed_all = [&](const std::vector<RgbaImage>& set) {
    std::vector<std::vector<double>> rows;
    rows.reserve(set.size());
    for (const RgbaImage& img : set) {
      const Tensor pooled =
          stack.pooled(image_to_chw(composite_on_matte(img, 1, 1, 1)));
      rows.emplace_back(pooled.v.begin(), pooled.v.end());
    }
    return rows;
  };
  return frechet_distance(fit_gaussian(embed_all(a)), fit_gaussian(embed_all(b)));
}

SampleMetrics aggregate_of(const std::vector<SampleMetrics>& rows) {
  SampleMetrics agg;
  agg.id = "aggregate";
  if (rows.empty()) return agg;
  for (const SampleMetrics& r : rows) {
    agg.mse += r.mse;
    agg.psnr += r.psnr;
    agg.ssim += r.ssim;
  }
  const double n = static_cast<double>(rows.size());
  agg.mse /= n;
  agg.psnr /= n;
  agg.ssim /= n;
  return agg;
}

MetricReport make_metric_report(const std::vector<std::string>& ids,
                                const std::vector<RgbaImage>& outputs,
                                const std::vector<RgbaImage>& references,
                                const std::vector<Matte>& mattes) {
  if (ids.size() != outputs.size() || ids.size() != references.size())
    throw std::invalid_argument("metric report: list length mismatch");
  if (mattes.empty())
    throw std::invalid_argument("metric report: no mattes");
  MetricReport report;
  report.mattes_used = mattes;
  const double n_mattes = static_cast<double>(mattes.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    SampleMetrics s;
    s.id = ids[i];
    for (const Matte& m : mattes) {
      s.mse += metric_on_matte(outputs[i], references[i], MetricKind::mse, m);
      s.psnr += metric_on_matte(outputs[i], references[i], MetricKind::psnr, m);
      s.ssim += metric_on_matte(outputs[i], references[i], MetricKind::ssim, m);
    }
    s.mse /= n_mattes;
    s.psnr /= n_mattes;
    s.ssim /= n_mattes;
    report.per_sample.push_back(std::move(s));
  }
  report.aggregate = aggregate_of(report.per_sample);
  return report;
}

std::string report_to_json(const MetricReport& report) {
  nlohmann::ordered_json j;
  j["per_sample"] = nlohmann::ordered_json::array();
  for (const SampleMetrics& s : report.per_sample) {
    j["per_sample"].push_back(
        {{"id", s.id}, {"mse", s.mse}, {"psnr", s.psnr}, {"ssim", s.ssim}});
  }
  j["aggregate"] = {{"mse", report.aggregate.mse},
                    {"psnr", report.aggregate.psnr},
                    {"ssim", report.aggregate.ssim}};
  if (report.fid.has_value()) j["desk_fid"] = *report.fid;
  if (!report.judge.empty()) {
    nlohmann::ordered_json scores;
    for (const auto& [method, score] : report.judge) scores[method] = score;
    j["judge"] = {{"scores", scores}, {"errors", report.judge_errors}};
  }
  j["mattes"] = nlohmann::ordered_json::array();
  for (const Matte& m : report.mattes_used) j["mattes"].push_back(matte_name(m));
  return j.dump(2) + "\n";
}

std::string report_to_csv(const MetricReport& report) {
  std::ostringstream os;
  os << "id,mse,psnr,ssim\n";
  for (const SampleMetrics& s : report.per_sample) {
    os << s.id << ',' << fmt_double(s.mse) << ',' << fmt_double(s.psnr) << ','
       << fmt_double(s.ssim) << '\n';
  }
  os << report.aggregate.id << ',' << fmt_double(report.aggregate.mse) << ','
     << fmt_double(report.aggregate.psnr) << ','
     << fmt_double(report.aggregate.ssim) << '\n';
  return os.str();
}

}  // namespace layercake
