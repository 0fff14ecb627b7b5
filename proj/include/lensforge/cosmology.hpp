#pragma once

// Flat LCDM distances and the critical surface density that sets the scale of
// every lensing operator.

#include <cmath>
#include <functional>
#include <string>

#include "lensforge/error.hpp"

namespace lensforge {

namespace constants {
inline constexpr double c_km_s = 299792.458;
inline constexpr double c_m_s = 299792458.0;
inline constexpr double G_si = 6.67430e-11;           // m^3 kg^-1 s^-2
inline constexpr double msun_kg = 1.988409870698051e30;
inline constexpr double mpc_m = 3.0856775814913673e22;
inline constexpr double kpc_m = 3.0856775814913673e19;
inline constexpr double pi = 3.14159265358979323846;
} // namespace constants

/// Flat LCDM; dark-energy density is fixed by flatness.
struct Cosmology {
  double h0 = 67.74;      ///< km/s/Mpc
  double omega_m = 0.3089;

  double omega_lambda() const { return 1.0 - omega_m; }
  double little_h() const { return h0 / 100.0; }

  void validate() const {
    if (!(h0 > 0.0) || !std::isfinite(h0)) throw InvalidArgument("H0 must be positive");
    if (!(omega_m > 0.0 && omega_m < 1.0)) throw InvalidArgument("Omega_m must lie in (0, 1)");
  }

  /// Hubble rate H(z) in km/s/Mpc.
  double hubble(double z) const {
    const double a = 1.0 + z;
    return h0 * std::sqrt(omega_m * a * a * a + omega_lambda());
  }
};

/// Lens redshift plus the reference source redshift at which convergence maps
/// are stored.
struct LensScene {
  Cosmology cosmology{};
  double z_lens = 0.5;
  double z_ref = 2.0;

  void validate() const {
    cosmology.validate();
    if (!(z_lens > 0.0 && z_lens < z_ref))
      throw InvalidArgument("lens scene requires 0 < z_lens < z_ref");
  }
};

/// Smallest accepted gap between source and lens redshift.
inline constexpr double kMinSourceLensGap = 1e-4;

namespace detail {

inline double simpson_step(const std::function<double(double)> &f, double a, double b,
                           double fa, double fm, double fb, double whole, double tol,
                           int depth) {
  const double m = 0.5 * (a + b);
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  const double delta = left + right - whole;
  if (depth <= 0 || std::abs(delta) <= 15.0 * tol) return left + right + delta / 15.0;
  return simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) +
         simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
}

} // namespace detail

/// Adaptive Simpson quadrature with a relative tolerance on the total.
inline double adaptive_simpson(const std::function<double(double)> &f, double a, double b,
                               double rel_tol = 1e-12) {
  if (a == b) return 0.0;
  const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
  const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
  const double tol = rel_tol * std::max(std::abs(whole), 1e-300);
  return detail::simpson_step(f, a, b, fa, fm, fb, whole, tol, 48);
}

/// Line-of-sight comoving distance between z1 and z2, Mpc.
inline double comoving_distance(const Cosmology &c, double z1, double z2) {
  c.validate();
  return adaptive_simpson([&](double z) { return constants::c_km_s / c.hubble(z); }, z1, z2);
}

/// Angular diameter distance from z1 to z2 in a flat universe, Mpc.
inline double angular_diameter_distance(const Cosmology &c, double z1, double z2) {
  if (!(z1 >= 0.0) || !(z2 > z1))
    throw InvalidArgument("angular_diameter_distance requires 0 <= z1 < z2");
  return comoving_distance(c, z1, z2) / (1.0 + z2);
}

/// Dataset surface-density unit, 10^10 Msun/h per (ckpc/h)^2, expressed in
/// physical Msun/kpc^2 at the lens redshift.
inline double dataset_density_unit_msun_kpc2(const LensScene &scene) {
  const double h = scene.cosmology.little_h();
  const double a = 1.0 + scene.z_lens;
  return 1e10 * h * a * a;
}

/// Critical surface density for a source at z_source, in 10^10 Msun/h per (ckpc/h)^2.
inline double sigma_crit(const LensScene &scene, double z_source) {
  scene.validate();
  if (!(z_source > scene.z_lens))
    throw InvalidArgument("source redshift " + std::to_string(z_source) +
                          " is not behind the lens at " + std::to_string(scene.z_lens));
  if (z_source - scene.z_lens < kMinSourceLensGap)
    throw OverflowError("critical density diverges: source within " +
                        std::to_string(kMinSourceLensGap) + " of the lens redshift");
  const auto &c = scene.cosmology;
  const double d_l = angular_diameter_distance(c, 0.0, scene.z_lens);
  const double d_s = angular_diameter_distance(c, 0.0, z_source);
  const double d_ls = angular_diameter_distance(c, scene.z_lens, z_source);
  // kg/m^2 with distances in metres, then Msun per physical kpc^2.
  const double sigma_si = constants::c_m_s * constants::c_m_s /
                          (4.0 * constants::pi * constants::G_si) * d_s /
                          (d_l * d_ls * constants::mpc_m);
  const double sigma_msun_kpc2 = sigma_si * constants::kpc_m * constants::kpc_m / constants::msun_kg;
  return sigma_msun_kpc2 / dataset_density_unit_msun_kpc2(scene);
}

/// Factor converting a convergence map stored at z_ref into one for a source at z_source.
inline double kappa_rescale(const LensScene &scene, double z_source) {
  return sigma_crit(scene, scene.z_ref) / sigma_crit(scene, z_source);
}

/// Comoving transverse length per arcsecond at the lens, ckpc/h.
inline double ckpc_h_per_arcsec(const LensScene &scene) {
  const double dm_mpc = comoving_distance(scene.cosmology, 0.0, scene.z_lens);
  return dm_mpc * 1000.0 * scene.cosmology.little_h() / 206264.80624709636;
}

} // namespace lensforge
