#include <gtest/gtest.h>

#include "lensforge/cosmology.hpp"

using namespace lensforge;

namespace {

double trapezoid_comoving(const Cosmology &c, double z1, double z2, int steps = 100000) {
  const double h = (z2 - z1) / steps;
  double s = 0.0;
  for (int i = 0; i <= steps; ++i) {
    const double z = z1 + h * i;
    const double e = std::sqrt(c.omega_m * std::pow(1.0 + z, 3) + 1.0 - c.omega_m);
    const double f = 299792.458 / (c.h0 * e);
    s += (i == 0 || i == steps) ? 0.5 * f : f;
  }
  return s * h;
}

// Critical density computed directly in SI from trapezoid distances, then
// expressed as (1e10 Msun/h) / (ckpc/h)^2.
double sigma_crit_oracle(const Cosmology &c, double zl, double zs) {
  const double mpc = 3.0856775814913673e22, kpc = mpc / 1000.0;
  const double d_l = trapezoid_comoving(c, 0, zl) / (1 + zl) * mpc;
  const double d_s = trapezoid_comoving(c, 0, zs) / (1 + zs) * mpc;
  const double d_ls = trapezoid_comoving(c, zl, zs) / (1 + zs) * mpc;
  const double cc = 299792458.0, G = 6.67430e-11, msun = 1.988409870698051e30;
  const double sigma_kg_m2 = cc * cc / (4 * M_PI * G) * d_s / (d_l * d_ls);
  const double h = c.h0 / 100.0;
  const double mass_unit_kg = 1e10 * msun / h;
  const double length_unit_m = kpc / h / (1 + zl); // physical size of one ckpc/h
  return sigma_kg_m2 / (mass_unit_kg / (length_unit_m * length_unit_m));
}

} // namespace

TEST(Cosmology, DistanceMatchesTrapezoidOracle) {
  Cosmology c;
  const double d = angular_diameter_distance(c, 0.0, 0.5);
  const double oracle = trapezoid_comoving(c, 0.0, 0.5) / 1.5;
  EXPECT_LT(std::abs(d - oracle) / oracle, 1e-6);
}

TEST(Cosmology, ZeroWidthIntervalShrinks) {
  Cosmology c;
  double prev = angular_diameter_distance(c, 0.7, 0.8);
  for (double eps : {1e-2, 1e-4, 1e-6, 1e-8}) {
    const double d = angular_diameter_distance(c, 0.7, 0.7 + eps);
    EXPECT_LT(d, prev);
    prev = d;
  }
  EXPECT_LT(prev, 1e-4);
}

TEST(Cosmology, HubbleScaling) {
  Cosmology a, b;
  b.h0 = 2 * a.h0;
  for (double z : {0.2, 0.5, 1.0, 3.0})
    EXPECT_NEAR(angular_diameter_distance(b, 0, z) / angular_diameter_distance(a, 0, z), 0.5,
                1e-12);
}

TEST(Cosmology, RejectsBadRanges) {
  Cosmology c;
  EXPECT_THROW(angular_diameter_distance(c, 1.0, 1.0), InvalidArgument);
  EXPECT_THROW(angular_diameter_distance(c, 1.0, 0.5), InvalidArgument);
  Cosmology bad;
  bad.omega_m = 1.5;
  EXPECT_THROW(angular_diameter_distance(bad, 0, 1), InvalidArgument);
}

TEST(Cosmology, ComovingAdditivity) {
  Cosmology c;
  for (auto [z1, z2, z3] : {std::tuple{0.0, 0.5, 2.0}, {0.1, 0.2, 0.3}, {0.5, 1.7, 5.0},
                            {1.0, 1.0001, 1.2}}) {
    const double whole = comoving_distance(c, z1, z3);
    const double parts = comoving_distance(c, z1, z2) + comoving_distance(c, z2, z3);
    EXPECT_LT(std::abs(whole - parts) / whole, 1e-10);
  }
}

TEST(Cosmology, SigmaCritMatchesSiOracle) {
  LensScene s;
  const double v = sigma_crit(s, 2.0);
  const double oracle = sigma_crit_oracle(s.cosmology, 0.5, 2.0);
  EXPECT_LT(std::abs(v - oracle) / oracle, 1e-6);
}

TEST(Cosmology, SigmaCritDecreasingAndRescaleIncreasing) {
  LensScene s;
  double prev_sigma = std::numeric_limits<double>::infinity(), prev_f = 0.0;
  for (double zs = 0.51; zs <= 5.0; zs += 0.05) {
    const double sig = sigma_crit(s, zs), f = kappa_rescale(s, zs);
    EXPECT_LT(sig, prev_sigma);
    EXPECT_GT(f, prev_f);
    prev_sigma = sig;
    prev_f = f;
  }
}

TEST(Cosmology, SigmaCritPoleAndErrors) {
  LensScene s;
  EXPECT_THROW(sigma_crit(s, 0.5), InvalidArgument);
  EXPECT_THROW(sigma_crit(s, 0.3), InvalidArgument);
  EXPECT_THROW(sigma_crit(s, 0.50005), OverflowError);
  EXPECT_GT(sigma_crit(s, 0.5002), 10 * sigma_crit(s, 0.6));
  EXPECT_LT(kappa_rescale(s, 0.5002), 0.01);
}

TEST(Cosmology, RescaleIdentity) {
  LensScene s;
  EXPECT_DOUBLE_EQ(kappa_rescale(s, s.z_ref), 1.0);
  for (double zs : {0.6, 1.0, 1.75, 3.0, 5.0})
    EXPECT_NEAR(sigma_crit(s, zs) * kappa_rescale(s, zs) / sigma_crit(s, s.z_ref), 1.0, 1e-12);
}

TEST(Cosmology, DatasetPixelAreas) {
  // Stated pixel areas of 512-pixel maps at z_L = 0.5: 1.56 and 7.87 (ckpc/h)^2.
  LensScene s;
  const double l = ckpc_h_per_arcsec(s);
  EXPECT_NEAR(std::pow(l * 100.0 / 512, 2), 1.56, 0.02);
  EXPECT_NEAR(std::pow(l * 225.0 / 512, 2), 7.87, 0.08);
}
