#pragma once

// Synthetic clusters: particle clouds with luminous and dark substructure,
// line-of-sight projection, k-nearest-neighbour surface density, photometry
// binning and Sersic light profiles.

#include <array>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <optional>
#include <vector>

#include <boost/geometry.hpp>
#include <boost/geometry/index/rtree.hpp>
#include <boost/math/tools/roots.hpp>

#include "lensforge/cosmology.hpp"
#include "lensforge/grid.hpp"
#include "lensforge/io.hpp"
#include "lensforge/parallel.hpp"
#include "lensforge/random.hpp"

namespace lensforge {

using Vec3 = std::array<double, 3>;
using BandTriple = std::array<double, 3>; ///< F125, F606, F814

/// Positions in ckpc/h, masses in 10^10 Msun/h, optional per-band flux in Jy.
struct ParticleCloud {
  std::vector<Vec3> positions;
  std::vector<double> masses;
  std::vector<BandTriple> luminosities; ///< empty when the cloud carries no light

  std::size_t size() const noexcept { return positions.size(); }
  bool has_luminosity() const noexcept { return !luminosities.empty(); }
  double total_mass() const {
    double s = 0.0;
    for (double m : masses) s += m;
    return s;
  }

  void validate() const {
    if (masses.size() != positions.size())
      throw InvalidArgument("particle cloud: mass count does not match position count");
    if (has_luminosity() && luminosities.size() != positions.size())
      throw InvalidArgument("particle cloud: luminosity count does not match position count");
    for (std::size_t i = 0; i < size(); ++i) {
      if (!(masses[i] > 0.0) || !std::isfinite(masses[i]))
        throw InvalidArgument("particle cloud: masses must be positive and finite");
      for (double x : positions[i])
        if (!std::isfinite(x)) throw InvalidArgument("particle cloud: non-finite position");
    }
  }
};

// ---------------------------------------------------------------------------
// PCL1 particle table
//
//   "PCL1", u64 count, then per particle 3 x f32 position + f32 mass, followed
//   by 3 x f32 luminosity when the cloud carries light. The two layouts are
//   told apart by the payload size.

inline io::Bytes encode_cloud(const ParticleCloud &c) {
  c.validate();
  io::Bytes out;
  const std::size_t stride = c.has_luminosity() ? 28 : 16;
  out.reserve(12 + c.size() * stride);
  out.insert(out.end(), {'P', 'C', 'L', '1'});
  io::put_le<std::uint64_t>(out, c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    for (double x : c.positions[i]) io::put_le<float>(out, static_cast<float>(x));
    io::put_le<float>(out, static_cast<float>(c.masses[i]));
    if (c.has_luminosity())
      for (double l : c.luminosities[i]) io::put_le<float>(out, static_cast<float>(l));
  }
  return out;
}

inline ParticleCloud decode_cloud(const io::Bytes &bytes) {
  io::Reader r(bytes);
  r.expect_bytes("PCL1", 4, "particle cloud magic");
  const auto count_at = r.offset();
  const auto count = r.get<std::uint64_t>("particle count");
  const std::size_t rem = r.remaining();
  bool lum;
  if (count != 0 && rem / count == 16 && rem % count == 0)
    lum = false;
  else if (count != 0 && rem / count == 28 && rem % count == 0)
    lum = true;
  else if (count == 0 && rem == 0)
    lum = false;
  else
    throw FormatError("payload of " + std::to_string(rem) + " bytes does not hold " +
                          std::to_string(count) + " particles",
                      count_at);
  ParticleCloud c;
  c.positions.resize(count);
  c.masses.resize(count);
  if (lum) c.luminosities.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    for (auto &x : c.positions[i]) x = r.get<float>("position");
    c.masses[i] = r.get<float>("mass");
    if (lum)
      for (auto &l : c.luminosities[i]) l = r.get<float>("luminosity");
  }
  return c;
}

inline void write_cloud(const ParticleCloud &c, const std::filesystem::path &path) {
  io::write_file_atomic(path, encode_cloud(c));
}
inline ParticleCloud read_cloud(const std::filesystem::path &path) {
  return decode_cloud(io::read_file(path));
}

// ---------------------------------------------------------------------------
// Halo sampling

struct HaloOptions {
  double concentration = 10.0;              ///< truncation radius in units of r_s
  double substructure_mass_fraction = 0.2;  ///< shared evenly by the clumps
  double substructure_scale = 0.12;         ///< clump r_s relative to the host r_s
  double substructure_extent = 1.5;         ///< clump centers within this many host r_s
  double dark_clump_fraction = 0.5;         ///< clumps that carry no light
  bool luminous = true;
  double flux_per_mass = 1e-6;              ///< Jy per 10^10 Msun/h at unit weight
  double host_light_scale = 0.35;           ///< host light ~ mass * exp(-r / (this * r_s))
  BandTriple host_color{1.0, 0.35, 0.6};
  BandTriple clump_color{0.8, 0.55, 0.7};
};

/// Enclosed-mass shape of a density ~ 1/(x (1+x)^2), x = r / r_s.
inline double nfw_mass_shape(double x) { return std::log1p(x) - x / (1.0 + x); }

/// Radius (in units of r_s) enclosing fraction u of the mass truncated at c.
inline double nfw_radius_quantile(double u, double c) {
  const double target = u * nfw_mass_shape(c);
  if (target <= 0.0) return 0.0;
  boost::uintmax_t iters = 200;
  const auto [lo, hi] = boost::math::tools::toms748_solve(
      [&](double x) { return nfw_mass_shape(x) - target; }, 0.0, c, -target,
      nfw_mass_shape(c) - target, boost::math::tools::eps_tolerance<double>(50), iters);
  return 0.5 * (lo + hi);
}

namespace detail {
inline Vec3 isotropic(Rng &rng, double r) {
  const double z = rng.uniform(-1.0, 1.0);
  const double phi = 2.0 * std::numbers::pi * rng.uniform();
  const double s = std::sqrt(std::max(0.0, 1.0 - z * z));
  return {r * s * std::cos(phi), r * s * std::sin(phi), r * z};
}
} // namespace detail

/// Particle counts: the host first, then `per_clump` particles per clump.
struct HaloLayout {
  std::size_t n_host = 0;
  std::size_t per_clump = 0;
  std::size_t clumps = 0;
};

inline HaloLayout halo_layout(std::size_t n_particles, std::size_t substructure_count,
                              const HaloOptions &opt) {
  std::size_t n_sub = 0;
  if (substructure_count > 0)
    n_sub = std::min(n_particles - 1,
                     static_cast<std::size_t>(std::llround(opt.substructure_mass_fraction *
                                                           static_cast<double>(n_particles))));
  const std::size_t per_clump = substructure_count ? n_sub / substructure_count : 0;
  return {n_particles - per_clump * substructure_count, per_clump,
          per_clump > 0 ? substructure_count : 0};
}

/// Truncated NFW host plus `substructure_count` smaller clumps; equal-mass
/// particles summing to total_mass.
inline ParticleCloud sample_halo_cloud(std::uint64_t seed, std::size_t n_particles,
                                       double total_mass, double scale_radius,
                                       std::size_t substructure_count,
                                       const HaloOptions &opt = {}) {
  if (n_particles < 1) throw InvalidArgument("n_particles must be at least 1");
  if (!(total_mass > 0.0) || !std::isfinite(total_mass))
    throw InvalidArgument("total_mass must be positive");
  if (!(scale_radius > 0.0) || !std::isfinite(scale_radius))
    throw InvalidArgument("scale_radius must be positive");
  if (!(opt.concentration > 0.0) || opt.substructure_mass_fraction < 0.0 ||
      opt.substructure_mass_fraction >= 1.0 || opt.dark_clump_fraction < 0.0 ||
      opt.dark_clump_fraction > 1.0)
    throw InvalidArgument("invalid halo options");

  const auto layout = halo_layout(n_particles, substructure_count, opt);
  const std::size_t per_clump = layout.per_clump, n_host = layout.n_host;

  ParticleCloud cloud;
  cloud.positions.reserve(n_particles);
  const double m = total_mass / static_cast<double>(n_particles);
  cloud.masses.assign(n_particles, m);
  if (opt.luminous) cloud.luminosities.reserve(n_particles);

  Rng rng(seed, {0x6861'6c6f});
  for (std::size_t i = 0; i < n_host; ++i) {
    const double x = nfw_radius_quantile(rng.uniform(), opt.concentration);
    cloud.positions.push_back(detail::isotropic(rng, x * scale_radius));
    if (opt.luminous) {
      const double w = m * opt.flux_per_mass * std::exp(-x / opt.host_light_scale);
      cloud.luminosities.push_back(
          {w * opt.host_color[0], w * opt.host_color[1], w * opt.host_color[2]});
    }
  }
  const double sub_rs = opt.substructure_scale * scale_radius;
  for (std::size_t c = 0; c < substructure_count && per_clump > 0; ++c) {
    Rng crng(seed, {0x636c'756d, c});
    const double rc = opt.substructure_extent * scale_radius * std::cbrt(crng.uniform());
    const Vec3 center = detail::isotropic(crng, rc);
    const bool dark = crng.uniform() < opt.dark_clump_fraction;
    for (std::size_t i = 0; i < per_clump; ++i) {
      const double x = nfw_radius_quantile(crng.uniform(), opt.concentration);
      const Vec3 d = detail::isotropic(crng, x * sub_rs);
      cloud.positions.push_back({center[0] + d[0], center[1] + d[1], center[2] + d[2]});
      if (opt.luminous) {
        const double w = dark ? 0.0 : m * opt.flux_per_mass * std::exp(-x);
        cloud.luminosities.push_back(
            {w * opt.clump_color[0], w * opt.clump_color[1], w * opt.clump_color[2]});
      }
    }
  }
  return cloud;
}

// ---------------------------------------------------------------------------
// Projection

/// Fibonacci lattice on the upper unit hemisphere (z > 0).
inline std::vector<Vec3> hemisphere_directions(std::size_t n) {
  if (n < 1) throw InvalidArgument("hemisphere_directions needs n >= 1");
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  std::vector<Vec3> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double z = 1.0 - (static_cast<double>(i) + 0.5) / static_cast<double>(n);
    const double s = std::sqrt(1.0 - z * z);
    const double phi = golden * static_cast<double>(i);
    out[i] = {s * std::cos(phi), s * std::sin(phi), z};
  }
  return out;
}

using Mat3 = std::array<Vec3, 3>;

/// Rotation taking the unit vector `d` onto +z; exactly the identity for d = +z.
inline Mat3 rotation_to_z(const Vec3 &d) {
  const double norm = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
  if (!(std::abs(norm - 1.0) < 1e-9)) throw InvalidArgument("line of sight must be a unit vector");
  if (d[0] == 0.0 && d[1] == 0.0 && d[2] > 0.0) return {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  if (d[0] == 0.0 && d[1] == 0.0) return {{{1, 0, 0}, {0, -1, 0}, {0, 0, -1}}};
  // Rodrigues rotation about v = d x z.
  const double vx = d[1], vy = -d[0];
  const double c = d[2];
  const double k = (1.0 - c) / (vx * vx + vy * vy);
  return {{{1.0 - k * vy * vy, k * vx * vy, vy},
           {k * vx * vy, 1.0 - k * vx * vx, -vx},
           {-vy, vx, 1.0 - k * (vx * vx + vy * vy)}}};
}

/// Copy of the cloud rotated so that `direction` becomes the line of sight (+z).
inline ParticleCloud rotate_to_line_of_sight(const ParticleCloud &cloud, const Vec3 &direction) {
  const Mat3 r = rotation_to_z(direction);
  ParticleCloud out = cloud;
  if (r == Mat3{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}}) return out;
  for (auto &p : out.positions) {
    const Vec3 q = p;
    for (int i = 0; i < 3; ++i) p[i] = r[i][0] * q[0] + r[i][1] * q[1] + r[i][2] * q[2];
  }
  return out;
}

namespace detail {

namespace bg = boost::geometry;
namespace bgi = boost::geometry::index;
using Point2 = bg::model::point<double, 2, bg::cs::cartesian>;
using IndexedPoint = std::pair<Point2, std::size_t>;

inline std::vector<IndexedPoint> projected_points(const ParticleCloud &c) {
  std::vector<IndexedPoint> pts;
  pts.reserve(c.size());
  for (std::size_t i = 0; i < c.size(); ++i)
    pts.emplace_back(Point2(c.positions[i][0], c.positions[i][1]), i);
  return pts;
}

} // namespace detail

/// k-nearest-neighbour surface density (10^10 Msun/h per (ckpc/h)^2) at pixel centers.
inline ScalarField project_kde(const ParticleCloud &cloud, const Vec3 &direction,
                               const AngularGrid &grid, const LensScene &scene,
                               std::size_t k = 300) {
  cloud.validate();
  if (k < 1 || k > cloud.size())
    throw InvalidArgument("project_kde: k = " + std::to_string(k) + " exceeds particle count " +
                          std::to_string(cloud.size()));
  const auto rotated = rotate_to_line_of_sight(cloud, direction);
  const double length = ckpc_h_per_arcsec(scene);
  const detail::bgi::rtree<detail::IndexedPoint, detail::bgi::quadratic<16>> tree(
      detail::projected_points(rotated));

  ScalarField sigma(grid, Quantity::surface_density);
  const double r_floor = 1e-6 * grid.pixel_scale() * length;
  const std::size_t n = grid.n_pix();
  parallel_for(n, [&](std::size_t row) {
    std::vector<detail::IndexedPoint> hits;
    std::vector<std::size_t> idx;
    for (std::size_t col = 0; col < n; ++col) {
      const Vec2 t = grid.position(row, col);
      const detail::Point2 q(t.x * length, t.y * length);
      hits.clear();
      tree.query(detail::bgi::nearest(q, static_cast<unsigned>(k)), std::back_inserter(hits));
      idx.clear();
      double rk2 = 0.0;
      for (const auto &h : hits) {
        idx.push_back(h.second);
        rk2 = std::max(rk2, detail::bg::comparable_distance(h.first, q));
      }
      std::sort(idx.begin(), idx.end());
      double mass = 0.0;
      for (auto i : idx) mass += rotated.masses[i];
      const double rk = std::max(std::sqrt(rk2), r_floor);
      sigma(row, col) = mass / (std::numbers::pi * rk * rk);
    }
  });
  return sigma;
}

/// Nearest-pixel binning of per-band luminosity. A particle exactly on a pixel
/// edge goes to the pixel on its upper side (floor of the continuous coordinate).
inline PhotometryStack photometry_from_particles(const ParticleCloud &cloud,
                                                 const Vec3 &direction, const AngularGrid &grid,
                                                 const LensScene &scene) {
  cloud.validate();
  if (!cloud.has_luminosity())
    throw InvalidArgument("photometry_from_particles: cloud carries no luminosities");
  const auto rotated = rotate_to_line_of_sight(cloud, direction);
  const double length = ckpc_h_per_arcsec(scene);
  PhotometryStack out(grid);
  const double h = grid.pixel_scale(), half = 0.5 * grid.fov();
  const auto n = static_cast<long>(grid.n_pix());
  for (std::size_t i = 0; i < rotated.size(); ++i) {
    const double tx = rotated.positions[i][0] / length, ty = rotated.positions[i][1] / length;
    const auto col = static_cast<long>(std::floor((tx + half) / h));
    const auto row = static_cast<long>(std::floor((ty + half) / h));
    if (col < 0 || row < 0 || col >= n || row >= n) continue;
    const auto at = grid.index(static_cast<std::size_t>(row), static_cast<std::size_t>(col));
    for (Band b : kBands) out.band(b)[at] += rotated.luminosities[i][band_slot(b)];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sersic light

struct SersicSource {
  Vec2 center{};           ///< arcsec
  double r_e = 1.0;        ///< effective radius, arcsec
  double n = 1.0;          ///< Sersic index
  double e1 = 0.0, e2 = 0.0;
  double total_flux = 1.0; ///< Jy
  Band band = Band::f125;

  void validate() const {
    if (!(r_e > 0.0) || !std::isfinite(r_e)) throw InvalidArgument("Sersic r_e must be positive");
    if (!(n >= 0.5 && n <= 4.0)) throw InvalidArgument("Sersic index must lie in [0.5, 4]");
    if (!(e1 * e1 + e2 * e2 < 1.0)) throw InvalidArgument("Sersic ellipticity must be below 1");
    if (!std::isfinite(total_flux) || !std::isfinite(center.x) || !std::isfinite(center.y))
      throw InvalidArgument("Sersic parameters must be finite");
  }
};

inline double sersic_bn(double n) { return 2.0 * n - 1.0 / 3.0 + 4.0 / (405.0 * n); }

/// Intensity at r_e such that the profile integrates to total_flux.
inline double sersic_ie(const SersicSource &s) {
  const double b = sersic_bn(s.n);
  const double norm = 2.0 * std::numbers::pi * s.n * s.r_e * s.r_e * std::exp(b) *
                      std::pow(b, -2.0 * s.n) * std::tgamma(2.0 * s.n);
  return s.total_flux / norm;
}

namespace detail {
struct SersicFrame {
  double q, c, s;
};
inline SersicFrame sersic_frame(const SersicSource &src) {
  const double e = std::hypot(src.e1, src.e2);
  const double phi = 0.5 * std::atan2(src.e2, src.e1);
  return {(1.0 - e) / (1.0 + e), std::cos(phi), std::sin(phi)};
}
} // namespace detail

/// Surface brightness (Jy/arcsec^2) at angular position theta.
inline double sersic_intensity(const SersicSource &src, Vec2 theta) {
  const auto f = detail::sersic_frame(src);
  const Vec2 d = theta - src.center;
  const double xp = f.c * d.x + f.s * d.y, yp = -f.s * d.x + f.c * d.y;
  const double r = std::sqrt(f.q * xp * xp + yp * yp / f.q);
  const double b = sersic_bn(src.n);
  return sersic_ie(src) * std::exp(-b * (std::pow(r / src.r_e, 1.0 / src.n) - 1.0));
}

/// Gradient of sersic_intensity with respect to theta; zero at the center.
inline Vec2 sersic_intensity_gradient(const SersicSource &src, Vec2 theta) {
  const auto f = detail::sersic_frame(src);
  const Vec2 d = theta - src.center;
  const double xp = f.c * d.x + f.s * d.y, yp = -f.s * d.x + f.c * d.y;
  const double r = std::sqrt(f.q * xp * xp + yp * yp / f.q);
  if (r == 0.0) return {};
  const double b = sersic_bn(src.n);
  const double u = std::pow(r / src.r_e, 1.0 / src.n);
  const double i = sersic_ie(src) * std::exp(-b * (u - 1.0));
  const double di_dr = -i * b * u / (src.n * r);
  const double gx = f.q * xp, gy = yp / f.q; // r * dr/d(xp, yp)
  return {di_dr * (gx * f.c - gy * f.s) / r, di_dr * (gx * f.s + gy * f.c) / r};
}

/// Pixel-averaged surface brightness; pixels near the center are subsampled finer.
inline ScalarField render_sersic(const SersicSource &src, const AngularGrid &grid,
                                 int oversample = 6) {
  src.validate();
  ScalarField img(grid, Quantity::photometry);
  const double h = grid.pixel_scale();
  for (std::size_t r = 0; r < grid.n_pix(); ++r)
    for (std::size_t c = 0; c < grid.n_pix(); ++c) {
      const Vec2 p = grid.position(r, c);
      const Vec2 d = p - src.center;
      const bool core = std::abs(d.x) < 3.0 * h && std::abs(d.y) < 3.0 * h;
      const int s = core ? 8 * oversample : oversample;
      double acc = 0.0;
      for (int i = 0; i < s; ++i)
        for (int j = 0; j < s; ++j) {
          const Vec2 q{p.x + h * ((j + 0.5) / s - 0.5), p.y + h * ((i + 0.5) / s - 0.5)};
          acc += sersic_intensity(src, q);
        }
      img(r, c) = acc / (s * s);
    }
  return img;
}

} // namespace lensforge
