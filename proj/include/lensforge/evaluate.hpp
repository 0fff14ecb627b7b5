#pragma once

// Reconstruction quality metrics, the held-out-pixel mask, uncertainty
// calibration, and the light-traces-mass baseline.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lensforge/normalize.hpp"
#include "lensforge/observe.hpp"
#include "lensforge/sampler.hpp"

namespace lensforge {

namespace detail {
inline void require_same_grid(const ScalarField &a, const ScalarField &b, const char *what) {
  if (!(a.grid() == b.grid()) || a.size() != b.size())
    throw InvalidArgument(std::string(what) + ": fields differ in shape");
}
} // namespace detail

// ---------------------------------------------------------------------------
// Image metrics

/// Peak signal-to-noise ratio in dB; +inf for identical fields.
inline double psnr(const ScalarField &estimate, const ScalarField &truth, double data_range = 1.0) {
  detail::require_same_grid(estimate, truth, "psnr");
  if (!(data_range > 0.0)) throw InvalidArgument("psnr: data range must be positive");
  double se = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double d = estimate[i] - truth[i];
    se += d * d;
  }
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  const double mse = se / static_cast<double>(truth.size());
  return 10.0 * std::log10(data_range * data_range / mse);
}

/// PSNR of two physical convergence maps compared on the normalized unit range.
inline double psnr_kappa(const ScalarField &estimate, const ScalarField &truth,
                         const Normalization &n = {}) {
  return psnr(normalize(estimate, n), normalize(truth, n), 1.0);
}

inline constexpr std::size_t kSsimWindow = 7;
inline constexpr double kSsimSigma = 1.5;

/// Mean structural similarity over every position where a full 7x7 Gaussian
/// window fits.
inline double ssim(const ScalarField &estimate, const ScalarField &truth, double data_range = 1.0) {
  detail::require_same_grid(estimate, truth, "ssim");
  const std::size_t n = truth.n_pix(), w = kSsimWindow;
  if (n < w) throw InvalidArgument("ssim needs at least a 7x7 field");
  if (!(data_range > 0.0)) throw InvalidArgument("ssim: data range must be positive");

  std::vector<double> kernel(w * w);
  double ksum = 0.0;
  const double mid = 0.5 * static_cast<double>(w - 1);
  for (std::size_t i = 0; i < w; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double di = static_cast<double>(i) - mid, dj = static_cast<double>(j) - mid;
      kernel[i * w + j] = std::exp(-(di * di + dj * dj) / (2.0 * kSsimSigma * kSsimSigma));
      ksum += kernel[i * w + j];
    }
  for (double &k : kernel) k /= ksum;

  const double c1 = std::pow(0.01 * data_range, 2), c2 = std::pow(0.03 * data_range, 2);
  double total = 0.0;
  const std::size_t m = n - w + 1;
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < m; ++c) {
      double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
      for (std::size_t i = 0; i < w; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          const double k = kernel[i * w + j];
          const double x = estimate(r + i, c + j), y = truth(r + i, c + j);
          mx += k * x;
          my += k * y;
          xx += k * x * x;
          yy += k * y * y;
          xy += k * x * y;
        }
      const double vx = xx - mx * mx, vy = yy - my * my, cxy = xy - mx * my;
      total += (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
  return total / static_cast<double>(m * m);
}

/// Pearson correlation over all pixels.
inline double pcc(const ScalarField &a, const ScalarField &b) {
  detail::require_same_grid(a, b, "pcc");
  const double ma = a.mean(), mb = b.mean();
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) throw InvalidArgument("pcc is undefined for a constant field");
  return sab / std::sqrt(saa * sbb);
}

/// Correlation between a surface-density map and the F125 light.
inline double mass_light_pcc(const ScalarField &sigma, const PhotometryStack &phot) {
  return pcc(sigma, phot.band(Band::f125));
}

// ---------------------------------------------------------------------------
// Held-out pixels

struct HeldoutRule {
  double photometry_percentile = 90.0;
  double exclusion_radius_px = 2.0;
};

/// Pixels carrying no lensing or light signal: F125 strictly below its
/// percentile, and no strong image or weak galaxy within the exclusion radius
/// of the pixel center. Returned as a 0/1 field.
inline ScalarField heldout_mask(const AngularGrid &grid, const PhotometryStack *photometry,
                                const std::vector<StrongLensSystem> &systems,
                                const WeakCatalog *weak, const HeldoutRule &rule = {}) {
  if (!(rule.photometry_percentile >= 0.0 && rule.photometry_percentile <= 100.0) ||
      !(rule.exclusion_radius_px >= 0.0))
    throw InvalidArgument("invalid held-out rule");
  ScalarField mask(grid, Quantity::generic, 1.0);
  if (photometry) {
    const auto &f = photometry->band(Band::f125);
    if (!(f.grid() == grid)) throw InvalidArgument("held-out mask: photometry grid mismatch");
    std::vector<double> sorted(f.data());
    std::sort(sorted.begin(), sorted.end());
    // Linear interpolation between order statistics.
    const double pos = rule.photometry_percentile / 100.0 * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double threshold = sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
    for (std::size_t i = 0; i < f.size(); ++i)
      if (!(f[i] < threshold)) mask[i] = 0.0;
  }
  const double r = rule.exclusion_radius_px * grid.pixel_scale();
  auto exclude_near = [&](Vec2 t) {
    for (std::size_t row = 0; row < grid.n_pix(); ++row)
      for (std::size_t col = 0; col < grid.n_pix(); ++col)
        if ((grid.position(row, col) - t).norm2() <= r * r) mask(row, col) = 0.0;
  };
  for (const auto &s : systems)
    for (Vec2 t : s.images) exclude_near(t);
  if (weak)
    for (const auto &e : weak->entries) exclude_near(e.theta);
  return mask;
}

inline double heldout_rmse(const ScalarField &estimate, const ScalarField &truth,
                           const ScalarField &mask) {
  detail::require_same_grid(estimate, truth, "heldout_rmse");
  detail::require_same_grid(mask, truth, "heldout_rmse");
  double se = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < truth.size(); ++i)
    if (mask[i] != 0.0) {
      const double d = estimate[i] - truth[i];
      se += d * d;
      ++count;
    }
  if (count == 0) throw InvalidArgument("heldout_rmse: mask selects no pixels");
  return std::sqrt(se / static_cast<double>(count));
}

// ---------------------------------------------------------------------------
// Calibration

struct CalibrationPoint {
  double predicted = 0.0; ///< RMS posterior std in the bin
  double actual = 0.0;    ///< RMS error of the posterior mean in the bin
  std::size_t count = 0;
};

struct CalibrationCurve {
  std::vector<CalibrationPoint> points;
  double slope = std::numeric_limits<double>::quiet_NaN(); ///< actual = slope * predicted
  double r2 = std::numeric_limits<double>::quiet_NaN();
  bool degenerate = false;

  nlohmann::json to_json() const {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto &p : points)
      pts.push_back({{"predicted", p.predicted}, {"actual", p.actual}, {"count", p.count}});
    nlohmann::json j{{"points", pts}, {"degenerate", degenerate}};
    j["slope"] = std::isfinite(slope) ? nlohmann::json(slope) : nlohmann::json(nullptr);
    j["r2"] = std::isfinite(r2) ? nlohmann::json(r2) : nlohmann::json(nullptr);
    return j;
  }
};

/// Pools pixels from every cluster, splits them into equal-count bins by
/// predicted std, and fits a line through the origin to (predicted, actual).
inline CalibrationCurve calibration_curve(const std::vector<ScalarField> &means,
                                          const std::vector<ScalarField> &stds,
                                          const std::vector<ScalarField> &truths,
                                          std::size_t bins = 10) {
  if (means.empty() || means.size() != stds.size() || means.size() != truths.size())
    throw InvalidArgument("calibration_curve needs matching, non-empty inputs");
  if (bins < 1) throw InvalidArgument("calibration_curve needs at least one bin");
  struct Pix {
    double s, e;
  };
  std::vector<Pix> pix;
  for (std::size_t k = 0; k < means.size(); ++k) {
    detail::require_same_grid(means[k], truths[k], "calibration_curve");
    detail::require_same_grid(stds[k], truths[k], "calibration_curve");
    for (std::size_t i = 0; i < truths[k].size(); ++i)
      pix.push_back({stds[k][i], means[k][i] - truths[k][i]});
  }
  std::stable_sort(pix.begin(), pix.end(), [](const Pix &a, const Pix &b) { return a.s < b.s; });
  bins = std::min(bins, pix.size());

  CalibrationCurve out;
  for (std::size_t b = 0; b < bins; ++b) {
    const std::size_t lo = b * pix.size() / bins, hi = (b + 1) * pix.size() / bins;
    double ss = 0, ee = 0;
    for (std::size_t i = lo; i < hi; ++i) {
      ss += pix[i].s * pix[i].s;
      ee += pix[i].e * pix[i].e;
    }
    const auto c = static_cast<double>(hi - lo);
    out.points.push_back({std::sqrt(ss / c), std::sqrt(ee / c), hi - lo});
  }

  double xx = 0, xy = 0, ysum = 0;
  for (const auto &p : out.points) {
    xx += p.predicted * p.predicted;
    xy += p.predicted * p.actual;
    ysum += p.actual;
  }
  if (xx == 0.0) {
    out.degenerate = true;
    return out;
  }
  out.slope = xy / xx;
  const double ymean = ysum / static_cast<double>(out.points.size());
  double res = 0, tot = 0;
  for (const auto &p : out.points) {
    res += std::pow(p.actual - out.slope * p.predicted, 2);
    tot += std::pow(p.actual - ymean, 2);
  }
  out.r2 = tot > 0.0 ? 1.0 - res / tot : (res == 0.0 ? 1.0 : 0.0);
  return out;
}

inline CalibrationCurve calibration_curve(const std::vector<ReconstructionResult> &results,
                                          const std::vector<ScalarField> &truths,
                                          std::size_t bins = 10) {
  std::vector<ScalarField> means, stds;
  for (const auto &r : results) {
    means.push_back(r.mean);
    stds.push_back(r.std);
  }
  return calibration_curve(means, stds, truths, bins);
}

// ---------------------------------------------------------------------------
// Light-traces-mass baseline

/// One luminous component modelled by a dual pseudo-isothermal profile.
struct LtmSource {
  Vec2 center{};
  double flux = 0.0;        ///< F125, Jy
  double core_radius = 0.1; ///< arcsec
  double cut_radius = 10.0; ///< arcsec
  double e1 = 0.0, e2 = 0.0;

  void validate() const {
    if (!(core_radius > 0.0 && core_radius < cut_radius) || !std::isfinite(cut_radius))
      throw InvalidArgument("LTM source needs 0 < core radius < cut radius");
    if (!(flux >= 0.0) || !std::isfinite(flux)) throw InvalidArgument("LTM flux must be >= 0");
    if (!(e1 * e1 + e2 * e2 < 1.0)) throw InvalidArgument("LTM ellipticity must be below 1");
    if (!std::isfinite(center.x) || !std::isfinite(center.y))
      throw InvalidArgument("LTM center must be finite");
  }
};

/// Circular dPIE convergence at radius r for central amplitude kappa0.
inline double dpie_kappa(double r, double kappa0, double core, double cut) {
  return kappa0 * core * cut / (cut - core) *
         (1.0 / std::sqrt(core * core + r * r) - 1.0 / std::sqrt(cut * cut + r * r));
}

/// Amplitude giving a total projected mass of `mass` (convergence x arcsec^2).
inline double dpie_amplitude(double mass, double core, double cut) {
  return mass / (2.0 * std::numbers::pi * core * cut);
}

/// Convergence (at z_ref) per Jy of F125 flux, in arcsec^2. Calibrated once
/// with calibrate_mass_per_flux on the self-consistent mock cluster of seed 0
/// under default cluster options.
inline constexpr double kDefaultMassPerFlux = 1.9555e6;

/// Sum of dPIE components with mass = mass_per_flux * flux; ellipticity is an
/// area-preserving coordinate stretch, so total mass is unchanged. Pixel values
/// are averages over an oversample x oversample sub-grid.
inline ScalarField ltm_baseline(const std::vector<LtmSource> &sources, const AngularGrid &grid,
                                double mass_per_flux = kDefaultMassPerFlux, int oversample = 4) {
  if (!(mass_per_flux >= 0.0) || !std::isfinite(mass_per_flux))
    throw InvalidArgument("mass per flux must be finite and non-negative");
  if (oversample < 1) throw InvalidArgument("oversample must be at least 1");
  for (const auto &s : sources) s.validate();
  ScalarField kappa(grid, Quantity::convergence);
  const double h = grid.pixel_scale();
  for (const auto &s : sources) {
    const double k0 = dpie_amplitude(mass_per_flux * s.flux, s.core_radius, s.cut_radius);
    const double e = std::hypot(s.e1, s.e2);
    const double q = (1.0 - e) / (1.0 + e), sq = std::sqrt(q);
    const double phi = 0.5 * std::atan2(s.e2, s.e1), cs = std::cos(phi), sn = std::sin(phi);
    parallel_for(grid.n_pix(), [&](std::size_t row) {
      for (std::size_t col = 0; col < grid.n_pix(); ++col) {
        const Vec2 p = grid.position(row, col);
        double acc = 0.0;
        for (int i = 0; i < oversample; ++i)
          for (int j = 0; j < oversample; ++j) {
            const Vec2 d{p.x + h * ((j + 0.5) / oversample - 0.5) - s.center.x,
                         p.y + h * ((i + 0.5) / oversample - 0.5) - s.center.y};
            const double xp = cs * d.x + sn * d.y, yp = -sn * d.x + cs * d.y;
            const double r = std::hypot(xp * sq, yp / sq);
            acc += dpie_kappa(r, k0, s.core_radius, s.cut_radius);
          }
        kappa(row, col) += acc / (oversample * oversample);
      }
    });
  }
  return kappa;
}

/// Mass-per-flux constant that makes the baseline's total mass equal the
/// in-field mass of `truth` for an infinite field.
inline double calibrate_mass_per_flux(const ScalarField &truth, const std::vector<LtmSource> &sources) {
  double flux = 0.0;
  for (const auto &s : sources) flux += s.flux;
  if (!(flux > 0.0)) throw InvalidArgument("calibration needs sources with positive flux");
  return truth.sum() * truth.grid().pixel_area() / flux;
}

// ---------------------------------------------------------------------------
// Reports

struct MetricEntry {
  std::string name;
  double psnr = 0.0, ssim = 0.0, pcc = 0.0;
  std::optional<double> heldout_rmse;
};

/// Metrics for one estimate against the truth; PSNR and SSIM on normalized
/// convergence, PCC and RMSE on physical convergence.
inline MetricEntry evaluate_kappa(std::string name, const ScalarField &estimate,
                                  const ScalarField &truth, const ScalarField *mask = nullptr,
                                  const Normalization &n = {}) {
  MetricEntry e;
  e.name = std::move(name);
  const auto xe = normalize(estimate, n), xt = normalize(truth, n);
  e.psnr = psnr(xe, xt, 1.0);
  e.ssim = ssim(xe, xt, 1.0);
  e.pcc = pcc(estimate, truth);
  if (mask) e.heldout_rmse = heldout_rmse(estimate, truth, *mask);
  return e;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw InvalidArgument("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

struct MetricReport {
  std::vector<MetricEntry> entries;

  MetricEntry aggregate() const {
    MetricEntry a;
    a.name = "median";
    std::vector<double> p, s, c, h;
    for (const auto &e : entries) {
      p.push_back(e.psnr);
      s.push_back(e.ssim);
      c.push_back(e.pcc);
      if (e.heldout_rmse) h.push_back(*e.heldout_rmse);
    }
    a.psnr = median(p);
    a.ssim = median(s);
    a.pcc = median(c);
    if (!h.empty()) a.heldout_rmse = median(h);
    return a;
  }

  static nlohmann::json entry_json(const MetricEntry &e) {
    auto num = [](double v) {
      return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(v > 0 ? "inf" : "-inf");
    };
    nlohmann::json j{{"name", e.name}, {"psnr", num(e.psnr)}, {"ssim", e.ssim}, {"pcc", e.pcc}};
    j["heldout_rmse"] = e.heldout_rmse ? nlohmann::json(*e.heldout_rmse) : nlohmann::json(nullptr);
    return j;
  }

  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto &e : entries) arr.push_back(entry_json(e));
    return {{"clusters", arr}, {"median", entry_json(aggregate())}};
  }

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "name,psnr,ssim,pcc,heldout_rmse\n";
    auto row = [&](const MetricEntry &e) {
      os << e.name << ',' << e.psnr << ',' << e.ssim << ',' << e.pcc << ',';
      if (e.heldout_rmse) os << *e.heldout_rmse;
      os << '\n';
    };
    for (const auto &e : entries) row(e);
    row(aggregate());
    return os.str();
  }
};

} // namespace lensforge
