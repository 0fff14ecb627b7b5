#pragma once

// Synthetic observations: source redshifts, multiple-image systems and noisy
// weak-lensing shear catalogs.

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <vector>

#include "lensforge/lens.hpp"
#include "lensforge/mock.hpp"

namespace lensforge {

// ---------------------------------------------------------------------------
// Source redshifts: p(z) ~ z^2 exp(-z / z0), truncated to (z_min, z_max].

class RedshiftDistribution {
public:
  explicit RedshiftDistribution(double z0 = 2.0 / 3.0, double z_max = 5.0, double z_min = 0.0,
                                std::size_t table_size = 8192)
      : z0_(z0), z_min_(z_min), z_max_(z_max) {
    if (!(z0 > 0.0)) throw InvalidArgument("z0 must be positive");
    if (!(z_min >= 0.0 && z_max > z_min)) throw InvalidArgument("need 0 <= z_min < z_max");
    lo_ = untruncated_cdf(z_min);
    hi_ = untruncated_cdf(z_max);
    z_.resize(table_size);
    p_.resize(table_size);
    for (std::size_t i = 0; i < table_size; ++i) {
      z_[i] = z_min + (z_max - z_min) * static_cast<double>(i) / static_cast<double>(table_size - 1);
      p_[i] = cdf(z_[i]);
    }
    p_.front() = 0.0;
    p_.back() = 1.0;
  }

  double z0() const noexcept { return z0_; }
  double z_min() const noexcept { return z_min_; }
  double z_max() const noexcept { return z_max_; }

  /// Gamma(3, z0) distribution function before truncation.
  double untruncated_cdf(double z) const {
    const double x = z / z0_;
    return -std::expm1(-x) - std::exp(-x) * (x + 0.5 * x * x);
  }
  double cdf(double z) const {
    if (z <= z_min_) return 0.0;
    if (z >= z_max_) return 1.0;
    return (untruncated_cdf(z) - lo_) / (hi_ - lo_);
  }

  /// Inverse CDF by linear interpolation on the tabulated grid.
  double quantile(double u) const {
    u = std::clamp(u, 0.0, 1.0);
    const auto it = std::upper_bound(p_.begin(), p_.end(), u);
    if (it == p_.end()) return z_max_;
    const auto i = static_cast<std::size_t>(it - p_.begin());
    if (i == 0) return z_min_;
    const double t = (u - p_[i - 1]) / (p_[i] - p_[i - 1]);
    return z_[i - 1] + t * (z_[i] - z_[i - 1]);
  }

  /// One draw in (z_min, z_max].
  double sample(Rng &rng) const {
    for (;;) {
      const double z = quantile(rng.uniform());
      if (z > z_min_) return z;
    }
  }

private:
  double z0_, z_min_, z_max_, lo_ = 0.0, hi_ = 1.0;
  std::vector<double> z_, p_;
};

inline double sample_source_redshift(std::uint64_t seed, double z0 = 2.0 / 3.0,
                                     double z_max = 5.0, double z_min = 0.0) {
  Rng rng(seed, {0x7265'6473});
  return RedshiftDistribution(z0, z_max, z_min).sample(rng);
}

/// Lowest source redshift drawn for a scene: just beyond the critical-density floor.
inline double source_redshift_floor(const LensScene &scene) {
  return scene.z_lens + 2.0 * kMinSourceLensGap;
}

// ---------------------------------------------------------------------------
// Image finding

struct ImageSearchOptions {
  int newton_iterations = 10;
  double max_step_pixels = 1.0;
  double residual_pixels = 0.25;
  double dedupe_pixels = 1.0;
};

/// Deflection and shear at z_ref, shared by every search on the same map.
struct LensMaps {
  VectorField alpha;
  VectorField gamma;
  ScalarField kappa;

  explicit LensMaps(const ScalarField &k)
      : alpha(deflection_from_kappa(k)), gamma(shear_from_kappa(k)), kappa(k) {}
  const AngularGrid &grid() const { return kappa.grid(); }
};

/// Multiple images of beta_src for a source whose maps are scaled by `f`.
inline std::vector<Vec2> find_images(const LensMaps &maps, double f, Vec2 beta_src,
                                     const ImageSearchOptions &opt = {}) {
  const auto &g = maps.grid();
  const std::size_t n = g.n_pix();
  const double h = g.pixel_scale();
  auto beta_at = [&](Vec2 t) { return t - sample(maps.alpha, t) * f; };

  std::vector<double> dist(g.size());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      const auto i = g.index(r, c);
      const Vec2 t = g.position(r, c);
      dist[i] = (Vec2{t.x - f * maps.alpha.c1()[i], t.y - f * maps.alpha.c2()[i]} - beta_src).norm();
    }

  struct Found {
    Vec2 theta;
    double residual;
  };
  std::vector<Found> found;
  for (std::size_t r = 1; r + 1 < n; ++r)
    for (std::size_t c = 1; c + 1 < n; ++c) {
      const auto i = g.index(r, c);
      bool minimum = true;
      for (int dr = -1; dr <= 1 && minimum; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          if (!dr && !dc) continue;
          const auto j = g.index(r + dr, c + dc);
          // Ties resolved by index so a plateau yields one candidate.
          if (dist[j] < dist[i] || (dist[j] == dist[i] && j < i)) {
            minimum = false;
            break;
          }
        }
      if (!minimum) continue;

      Vec2 t = g.position(r, c);
      for (int it = 0; it < opt.newton_iterations; ++it) {
        const Vec2 res = beta_at(t) - beta_src;
        if (res.norm() < 1e-9 * h) break;
        const auto s = bilinear_stencil(g, t);
        const double k = f * sample(maps.kappa.values(), s);
        const double g1 = f * sample(maps.gamma.c1(), s), g2 = f * sample(maps.gamma.c2(), s);
        const double a11 = 1 - k - g1, a12 = -g2, a22 = 1 - k + g1;
        const double det = a11 * a22 - a12 * a12;
        if (det == 0.0 || !std::isfinite(det)) break;
        Vec2 step{(a22 * res.x - a12 * res.y) / det, (-a12 * res.x + a11 * res.y) / det};
        const double len = step.norm();
        if (len > opt.max_step_pixels * h) step = step * (opt.max_step_pixels * h / len);
        t = t - step;
        if (!g.contains(t)) break;
      }
      if (!g.contains(t)) continue;
      const double residual = (beta_at(t) - beta_src).norm();
      if (residual < opt.residual_pixels * h) found.push_back({t, residual});
    }

  std::sort(found.begin(), found.end(),
            [](const Found &a, const Found &b) { return a.residual < b.residual; });
  std::vector<Vec2> images;
  for (const auto &fd : found) {
    const bool dup = std::any_of(images.begin(), images.end(), [&](Vec2 t) {
      return (t - fd.theta).norm() < opt.dedupe_pixels * h;
    });
    if (!dup) images.push_back(fd.theta);
  }
  std::sort(images.begin(), images.end(), [](Vec2 a, Vec2 b) { return a.norm() < b.norm(); });
  return images;
}

inline std::vector<Vec2> find_images(const ScalarField &kappa, const LensScene &scene,
                                     double z_source, Vec2 beta_src,
                                     const ImageSearchOptions &opt = {}) {
  return find_images(LensMaps(kappa), kappa_rescale(scene, z_source), beta_src, opt);
}

// ---------------------------------------------------------------------------
// Strong-lensing systems

struct StrongLensSystem {
  std::size_t source_id = 0;
  double z_s = 0.0;
  Vec2 true_beta{};              ///< generation only; not an inference input
  std::vector<Vec2> images;
  SersicSource source;           ///< shape parameters; center equals true_beta
  std::vector<double> image_flux; ///< expected pixel flux at each image, Jy
};

struct StrongOptions {
  double window_fraction = 0.5;   ///< beta drawn uniformly in this central fraction of the field
  std::size_t attempts_per_source = 200;
  ImageSearchOptions search{};
  double z0 = 2.0 / 3.0;
  double z_max = 5.0;
  std::pair<double, double> r_e_range{0.3, 1.0}; ///< arcsec
  std::pair<double, double> n_range{0.5, 2.5};
  double max_ellipticity = 0.3;
  std::pair<double, double> flux_range{2e-6, 2e-5}; ///< Jy
};

inline std::vector<StrongLensSystem> gen_strong_systems(const ScalarField &kappa,
                                                        const LensScene &scene,
                                                        std::size_t n_sources, std::uint64_t seed,
                                                        const StrongOptions &opt = {}) {
  if (n_sources < 5 || n_sources > 20)
    throw InvalidArgument("n_sources must lie in [5, 20], got " + std::to_string(n_sources));
  scene.validate();
  const LensMaps maps(kappa);
  const auto &g = kappa.grid();
  const RedshiftDistribution zdist(opt.z0, opt.z_max, source_redshift_floor(scene));
  const double half = 0.5 * opt.window_fraction * g.fov();

  std::vector<StrongLensSystem> out;
  const std::size_t budget = opt.attempts_per_source * n_sources;
  for (std::size_t attempt = 0; attempt < budget && out.size() < n_sources; ++attempt) {
    Rng rng(seed, {0x7374'726f, attempt});
    const Vec2 beta{rng.uniform(-half, half), rng.uniform(-half, half)};
    const double zs = zdist.sample(rng);
    auto images = find_images(maps, kappa_rescale(scene, zs), beta, opt.search);
    if (images.size() < 2) continue;

    StrongLensSystem s;
    s.source_id = out.size();
    s.z_s = zs;
    s.true_beta = beta;
    s.images = std::move(images);
    const double e = opt.max_ellipticity * std::sqrt(rng.uniform());
    const double phi = 2.0 * std::numbers::pi * rng.uniform();
    s.source = SersicSource{beta,
                            rng.uniform(opt.r_e_range.first, opt.r_e_range.second),
                            rng.uniform(opt.n_range.first, opt.n_range.second),
                            e * std::cos(phi),
                            e * std::sin(phi),
                            rng.uniform(opt.flux_range.first, opt.flux_range.second),
                            Band::f125};
    const double f = kappa_rescale(scene, zs);
    for (const Vec2 t : s.images)
      s.image_flux.push_back(g.pixel_area() *
                             sersic_intensity(s.source, t - sample(maps.alpha, t) * f));
    out.push_back(std::move(s));
  }
  if (out.size() < n_sources)
    throw InsufficientLensing("found " + std::to_string(out.size()) + " multiple-image systems of " +
                              std::to_string(n_sources) + " requested in " +
                              std::to_string(budget) + " attempts");
  return out;
}

/// Adds each system's lensed light to one photometry band: every pixel shows
/// the source intensity at its ray-traced position.
inline void inject_lensed_sources(PhotometryStack &phot, const ScalarField &kappa,
                                  const LensScene &scene,
                                  const std::vector<StrongLensSystem> &systems) {
  if (systems.empty()) return;
  const auto &g = kappa.grid();
  const auto alpha = deflection_from_kappa(kappa);
  for (const auto &s : systems) {
    auto &band = phot.band(s.source.band);
    const double f = kappa_rescale(scene, s.z_s);
    for (std::size_t r = 0; r < g.n_pix(); ++r)
      for (std::size_t c = 0; c < g.n_pix(); ++c) {
        const auto i = g.index(r, c);
        const Vec2 b = g.position(r, c) - alpha.at(i) * f;
        band[i] += g.pixel_area() * sersic_intensity(s.source, b);
      }
  }
}

// ---------------------------------------------------------------------------
// Weak-lensing catalogs

struct WeakEntry {
  Vec2 theta{};
  Vec2 gamma{}; ///< observed shear at the galaxy's own redshift
  double z_s = 0.0;
};

struct WeakCatalog {
  double sigma_w2 = 0.03;
  std::vector<WeakEntry> entries;
};

struct WeakOptions {
  double z0 = 2.0 / 3.0;
  double z_max = 5.0;
};

/// Expected galaxy count for a field at `density` per square arcminute.
inline double expected_weak_count(const AngularGrid &g, double density) {
  const double side_arcmin = g.fov() / 60.0;
  return density * side_arcmin * side_arcmin;
}

inline WeakCatalog gen_weak_catalog(const ScalarField &kappa, const LensScene &scene,
                                    double density, double sigma_w2, std::uint64_t seed,
                                    const WeakOptions &opt = {}) {
  if (!(density >= 0.0) || !std::isfinite(density))
    throw InvalidArgument("weak-lensing density must be non-negative");
  if (!(sigma_w2 >= 0.0) || !std::isfinite(sigma_w2))
    throw InvalidArgument("sigma_w2 must be non-negative");
  scene.validate();
  const auto &g = kappa.grid();
  const auto gamma = shear_from_kappa(kappa);
  const RedshiftDistribution zdist(opt.z0, opt.z_max, source_redshift_floor(scene));

  Rng rng(seed, {0x7765'616b});
  const double lambda = expected_weak_count(g, density);
  const std::size_t count =
      lambda > 0.0 ? static_cast<std::size_t>(std::poisson_distribution<long>(lambda)(rng)) : 0;
  WeakCatalog cat;
  cat.sigma_w2 = sigma_w2;
  cat.entries.reserve(count);
  const double half = 0.5 * g.fov();
  const double sd = std::sqrt(sigma_w2);
  for (std::size_t i = 0; i < count; ++i) {
    WeakEntry e;
    e.theta = {rng.uniform(-half, half), rng.uniform(-half, half)};
    e.z_s = zdist.sample(rng);
    const Vec2 g_true = sample(gamma, e.theta) * kappa_rescale(scene, e.z_s);
    e.gamma = {g_true.x + sd * rng.normal(), g_true.y + sd * rng.normal()};
    cat.entries.push_back(e);
  }
  return cat;
}

} // namespace lensforge
