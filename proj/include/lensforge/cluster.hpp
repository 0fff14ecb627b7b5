#pragma once

// Mock galaxy clusters: a particle halo seen along one line of sight, with its
// surface density, convergence at z_ref, multi-band light including two
// diffuse intracluster components, and the catalog of luminous components.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include <json.hpp>

#include "lensforge/evaluate.hpp"
#include "lensforge/mock.hpp"

namespace lensforge {

struct ClusterOptions {
  std::size_t n_pix = 64;
  double fov = 50.0; ///< arcsec
  std::size_t n_particles = 200000;
  double log_mass_min = 13.75; ///< log10 virial mass, Msun
  double log_mass_max = 14.0;
  std::size_t substructure_count = 6;
  HaloOptions halo{};
  std::size_t kde_k = 300;
  // Diffuse light as two host-centered Sersic components.
  std::array<double, 2> icl_flux_fraction{0.3, 0.2}; ///< of the host's F125 flux
  std::array<double, 2> icl_radius{0.5, 1.2};        ///< effective radius in host r_s
  std::array<double, 2> icl_index{1.0, 0.7};
  double icl_max_ellipticity = 0.3;
  double ltm_core_fraction = 0.1; ///< dPIE core radius over half-light radius
  /// Replace the surface density with a scaled copy of the F125 map.
  bool self_consistent = false;

  void validate() const {
    if (!(log_mass_min <= log_mass_max) || !std::isfinite(log_mass_min) ||
        !std::isfinite(log_mass_max))
      throw InvalidArgument("invalid cluster mass range");
    if (!(ltm_core_fraction > 0.0 && ltm_core_fraction < 1.0))
      throw InvalidArgument("LTM core fraction must lie in (0, 1)");
    if (!(icl_max_ellipticity >= 0.0 && icl_max_ellipticity < 1.0))
      throw InvalidArgument("ICL ellipticity must lie in [0, 1)");
    if (!halo.luminous) throw InvalidArgument("mock clusters need a luminous halo");
  }
};

/// Physical radius (Mpc) enclosing 200 times the critical density at z.
inline double r200_mpc(const Cosmology &c, double z, double mass_msun) {
  const double h_si = c.hubble(z) * 1000.0 / constants::mpc_m;
  const double rho_si = 3.0 * h_si * h_si / (8.0 * std::numbers::pi * constants::G_si);
  const double rho = rho_si * std::pow(constants::mpc_m, 3) / constants::msun_kg;
  return std::cbrt(3.0 * mass_msun / (4.0 * std::numbers::pi * 200.0 * rho));
}

struct ClusterHalo {
  std::uint64_t seed = 0;
  double virial_mass_msun = 0.0;
  double total_mass = 0.0;   ///< 10^10 Msun/h
  double scale_radius = 0.0; ///< ckpc/h
  HaloLayout layout;
  ParticleCloud cloud;
};

/// Halo truncated at r200, so halo.concentration doubles as the concentration.
inline ClusterHalo make_cluster_halo(std::uint64_t seed, const ClusterOptions &opt,
                                     const LensScene &scene) {
  opt.validate();
  scene.validate();
  Rng rng(seed, {0x636c'7573});
  ClusterHalo h;
  h.seed = seed;
  h.virial_mass_msun = std::pow(10.0, rng.uniform(opt.log_mass_min, opt.log_mass_max));
  const double little_h = scene.cosmology.little_h();
  h.total_mass = h.virial_mass_msun * little_h / 1e10;
  const double r200 = r200_mpc(scene.cosmology, scene.z_lens, h.virial_mass_msun) * 1000.0 *
                      (1.0 + scene.z_lens) * little_h;
  h.scale_radius = r200 / opt.halo.concentration;
  h.layout = halo_layout(opt.n_particles, opt.substructure_count, opt.halo);
  h.cloud = sample_halo_cloud(seed, opt.n_particles, h.total_mass, h.scale_radius,
                              opt.substructure_count, opt.halo);
  return h;
}

/// dPIE cut radius whose projected half-mass radius is r_half for the given core.
inline double dpie_cut_for_half_radius(double r_half, double core) {
  if (!(core > 0.0 && core < r_half)) throw InvalidArgument("dPIE core must lie in (0, r_half)");
  auto frac = [&](double cut) {
    const double a = core, s = cut, r = r_half;
    return ((std::hypot(a, r) - a) - (std::hypot(s, r) - s)) / (s - a) - 0.5;
  };
  const double lo = core * (1.0 + 1e-9), hi = 1e6 * r_half;
  boost::uintmax_t iters = 200;
  const auto [a, b] = boost::math::tools::toms748_solve(
      frac, lo, hi, frac(lo), frac(hi), boost::math::tools::eps_tolerance<double>(50), iters);
  return 0.5 * (a + b);
}

/// Light-weighted shape of one component from projected positions (arcsec).
inline LtmSource measure_component(const std::vector<Vec2> &pos, const std::vector<double> &weight,
                                   double core_fraction) {
  double w = 0, cx = 0, cy = 0;
  for (std::size_t i = 0; i < pos.size(); ++i) {
    w += weight[i];
    cx += weight[i] * pos[i].x;
    cy += weight[i] * pos[i].y;
  }
  if (!(w > 0.0)) throw InvalidArgument("component carries no light");
  cx /= w;
  cy /= w;
  double ixx = 0, iyy = 0, ixy = 0;
  for (std::size_t i = 0; i < pos.size(); ++i) {
    const double dx = pos[i].x - cx, dy = pos[i].y - cy;
    ixx += weight[i] * dx * dx;
    iyy += weight[i] * dy * dy;
    ixy += weight[i] * dx * dy;
  }
  const double tr = ixx + iyy, disc = std::hypot(ixx - iyy, 2.0 * ixy);
  const double l1 = 0.5 * (tr + disc), l2 = std::max(0.5 * (tr - disc), 0.0);
  const double q = l1 > 0.0 ? std::sqrt(l2 / l1) : 1.0;
  const double e = (1.0 - q) / (1.0 + q);
  const double phi = 0.5 * std::atan2(2.0 * ixy, ixx - iyy);
  const double cs = std::cos(phi), sn = std::sin(phi), sq = std::sqrt(std::max(q, 1e-12));

  // Light-weighted median of the elliptical radius used by the dPIE stretch.
  std::vector<std::pair<double, double>> radial;
  radial.reserve(pos.size());
  for (std::size_t i = 0; i < pos.size(); ++i) {
    const double dx = pos[i].x - cx, dy = pos[i].y - cy;
    const double xp = cs * dx + sn * dy, yp = -sn * dx + cs * dy;
    radial.emplace_back(std::hypot(xp * sq, yp / sq), weight[i]);
  }
  std::sort(radial.begin(), radial.end());
  double acc = 0.0, r_half = radial.back().first;
  for (const auto &[r, wi] : radial) {
    acc += wi;
    if (acc >= 0.5 * w) {
      r_half = r;
      break;
    }
  }
  r_half = std::max(r_half, 1e-3);

  LtmSource s;
  s.center = {cx, cy};
  s.flux = w;
  s.core_radius = core_fraction * r_half;
  s.cut_radius = dpie_cut_for_half_radius(r_half, s.core_radius);
  s.e1 = e * std::cos(2.0 * phi);
  s.e2 = e * std::sin(2.0 * phi);
  return s;
}

inline LtmSource ltm_from_sersic(const SersicSource &src, double core_fraction) {
  LtmSource s;
  s.center = src.center;
  s.flux = src.total_flux;
  s.core_radius = core_fraction * src.r_e;
  s.cut_radius = dpie_cut_for_half_radius(src.r_e, s.core_radius);
  s.e1 = src.e1;
  s.e2 = src.e2;
  return s;
}

struct MockCluster {
  LensScene scene;
  AngularGrid grid;
  Vec3 direction{0, 0, 1};
  ScalarField sigma; ///< 10^10 Msun/h per (ckpc/h)^2
  ScalarField kappa; ///< at z_ref
  PhotometryStack photometry;
  std::vector<SersicSource> icl; ///< F125 parameters; other bands share the shape
  std::vector<LtmSource> sources;
  std::size_t dark_clumps = 0;

  nlohmann::json describe() const {
    return {{"n_pix", grid.n_pix()},
            {"fov", grid.fov()},
            {"direction", {direction[0], direction[1], direction[2]}},
            {"z_lens", scene.z_lens},
            {"z_ref", scene.z_ref},
            {"luminous_components", sources.size()},
            {"dark_clumps", dark_clumps}};
  }
};

/// Projects one view of the halo. Components whose F125 light is zero are dark
/// and contribute mass only.
inline MockCluster project_cluster(const ClusterHalo &halo, const Vec3 &direction,
                                   const ClusterOptions &opt, const LensScene &scene) {
  opt.validate();
  MockCluster m;
  m.scene = scene;
  m.grid = AngularGrid(opt.n_pix, opt.fov);
  m.direction = direction;
  m.sigma = project_kde(halo.cloud, direction, m.grid, scene, opt.kde_k);
  m.photometry = photometry_from_particles(halo.cloud, direction, m.grid, scene);

  const auto rotated = rotate_to_line_of_sight(halo.cloud, direction);
  const double length = ckpc_h_per_arcsec(scene);
  const std::size_t f125 = band_slot(Band::f125);
  auto component = [&](std::size_t begin, std::size_t end) {
    std::vector<Vec2> pos;
    std::vector<double> w;
    for (std::size_t i = begin; i < end; ++i) {
      pos.push_back({rotated.positions[i][0] / length, rotated.positions[i][1] / length});
      w.push_back(rotated.luminosities[i][f125]);
    }
    return std::make_pair(pos, w);
  };

  const auto [host_pos, host_w] = component(0, halo.layout.n_host);
  const LtmSource host = measure_component(host_pos, host_w, opt.ltm_core_fraction);
  m.sources.push_back(host);
  for (std::size_t c = 0; c < halo.layout.clumps; ++c) {
    const std::size_t b = halo.layout.n_host + c * halo.layout.per_clump;
    const auto [pos, w] = component(b, b + halo.layout.per_clump);
    double flux = 0.0;
    for (double v : w) flux += v;
    if (flux > 0.0)
      m.sources.push_back(measure_component(pos, w, opt.ltm_core_fraction));
    else
      ++m.dark_clumps;
  }

  const double rs_arcsec = halo.scale_radius / length;
  for (std::size_t k = 0; k < 2; ++k) {
    Rng rng(halo.seed, {0x6963'6c00, k});
    const double e = opt.icl_max_ellipticity * std::sqrt(rng.uniform());
    const double phi = 2.0 * std::numbers::pi * rng.uniform();
    SersicSource s{host.center,
                   opt.icl_radius[k] * rs_arcsec,
                   opt.icl_index[k],
                   e * std::cos(phi),
                   e * std::sin(phi),
                   opt.icl_flux_fraction[k] * host.flux,
                   Band::f125};
    const auto img = render_sersic(s, m.grid);
    for (Band b : kBands) {
      const double color = opt.halo.host_color[band_slot(b)] / opt.halo.host_color[0];
      auto &band = m.photometry.band(b);
      for (std::size_t i = 0; i < img.size(); ++i)
        band[i] += color * m.grid.pixel_area() * img[i];
    }
    m.icl.push_back(s);
    m.sources.push_back(ltm_from_sersic(s, opt.ltm_core_fraction));
  }

  if (opt.self_consistent) {
    const auto &light = m.photometry.band(Band::f125);
    const double scale = m.sigma.sum() / light.sum();
    for (std::size_t i = 0; i < light.size(); ++i) m.sigma[i] = scale * light[i];
  }
  const double sc = sigma_crit(scene, scene.z_ref);
  m.kappa = ScalarField(m.grid, Quantity::convergence);
  for (std::size_t i = 0; i < m.sigma.size(); ++i) m.kappa[i] = m.sigma[i] / sc;
  return m;
}

/// One view of a freshly sampled halo; view k of n uses the k-th hemisphere direction.
inline MockCluster make_mock_cluster(std::uint64_t seed, const ClusterOptions &opt = {},
                                     const LensScene &scene = {}, std::size_t view = 0,
                                     std::size_t n_views = 1) {
  if (view >= n_views) throw InvalidArgument("view index exceeds the number of views");
  const auto halo = make_cluster_halo(seed, opt, scene);
  return project_cluster(halo, hemisphere_directions(n_views)[view], opt, scene);
}

} // namespace lensforge
