#pragma once

// Convergence -> deflection and convergence -> shear as discrete convolutions
// over the field, ray tracing, the lens Jacobian, Kaiser-Squires inversion and
// closed-form lenses.
//
// Both kernels are evaluated at pixel offsets o = (o1, o2) (column, row):
//   deflection  h/pi * o / |o|^2            (arcsec per unit convergence)
//   shear       1/pi * ((o2^2 - o1^2), -2 o1 o2) / |o|^4
// with the zero offset set to 0. The FFT route zero-pads to 2n per side so the
// circular product equals the linear sum over the field; mass outside the
// field is taken to be zero.

#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <vector>

#include "lensforge/cosmology.hpp"
#include "lensforge/fft.hpp"
#include "lensforge/grid.hpp"
#include "lensforge/interp.hpp"

namespace lensforge {

enum class ConvolutionMethod { fft, direct };

namespace detail {

inline constexpr double kInvPi = 0.318309886183790671538;

/// Unit-pixel kernel values at integer offset (o1, o2).
inline Vec2 deflection_kernel(long o1, long o2) {
  if (o1 == 0 && o2 == 0) return {};
  const double r2 = static_cast<double>(o1 * o1 + o2 * o2);
  return {kInvPi * static_cast<double>(o1) / r2, kInvPi * static_cast<double>(o2) / r2};
}

inline Vec2 shear_kernel(long o1, long o2) {
  if (o1 == 0 && o2 == 0) return {};
  const double a = static_cast<double>(o1), b = static_cast<double>(o2);
  const double r2 = a * a + b * b;
  const double r4 = r2 * r2;
  return {kInvPi * (b * b - a * a) / r4, kInvPi * (-2.0 * a * b) / r4};
}

/// Half-spectra of a kernel pair on the 2n x 2n padded grid.
struct KernelSpectra {
  std::size_t n = 0;
  std::size_t m = 0;
  std::vector<fft::Complex> k1, k2;
};

template <class KernelFn>
KernelSpectra make_spectra(std::size_t n, KernelFn kernel) {
  KernelSpectra ks;
  ks.n = n;
  ks.m = 2 * n;
  const std::size_t m = ks.m;
  std::vector<double> p1(m * m, 0.0), p2(m * m, 0.0);
  const auto offset = [&](std::size_t k) -> long {
    return k < n ? static_cast<long>(k) : static_cast<long>(k) - static_cast<long>(m);
  };
  for (std::size_t r = 0; r < m; ++r) {
    if (r == n) continue;
    for (std::size_t c = 0; c < m; ++c) {
      if (c == n) continue;
      const Vec2 v = kernel(offset(c), offset(r));
      p1[r * m + c] = v.x;
      p2[r * m + c] = v.y;
    }
  }
  ks.k1.resize(fft::half_spectrum_size(m));
  ks.k2.resize(fft::half_spectrum_size(m));
  fft::forward(m, p1, ks.k1);
  fft::forward(m, p2, ks.k2);
  return ks;
}

enum class KernelKind { deflection, shear };

inline std::shared_ptr<const KernelSpectra> spectra_for(KernelKind kind, std::size_t n) {
  static std::mutex mutex;
  static std::map<std::pair<int, std::size_t>, std::shared_ptr<const KernelSpectra>> cache;
  std::lock_guard lock(mutex);
  auto &slot = cache[{static_cast<int>(kind), n}];
  if (!slot) {
    slot = kind == KernelKind::deflection
               ? std::make_shared<const KernelSpectra>(make_spectra(n, deflection_kernel))
               : std::make_shared<const KernelSpectra>(make_spectra(n, shear_kernel));
  }
  return slot;
}

inline std::vector<double> pad(std::span<const double> x, std::size_t n) {
  std::vector<double> p(4 * n * n, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    std::copy_n(x.begin() + static_cast<long>(r * n), n, p.begin() + static_cast<long>(r * 2 * n));
  return p;
}

inline void crop_into(std::span<const double> padded, std::size_t n, double scale,
                      std::vector<double> &out) {
  out.resize(n * n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = scale * padded[r * 2 * n + c];
}

/// (K1 * x, K2 * x) by padded FFT convolution.
inline void convolve_pair(const KernelSpectra &ks, std::span<const double> x, double scale,
                          std::vector<double> &out1, std::vector<double> &out2) {
  const std::size_t m = ks.m;
  std::vector<fft::Complex> xs(fft::half_spectrum_size(m)), tmp(xs.size());
  fft::forward(m, pad(x, ks.n), xs);
  std::vector<double> back(m * m);
  const double norm = scale / static_cast<double>(m * m);
  for (std::size_t i = 0; i < xs.size(); ++i) tmp[i] = xs[i] * ks.k1[i];
  fft::backward(m, tmp, back);
  crop_into(back, ks.n, norm, out1);
  for (std::size_t i = 0; i < xs.size(); ++i) tmp[i] = xs[i] * ks.k2[i];
  fft::backward(m, tmp, back);
  crop_into(back, ks.n, norm, out2);
}

/// K1^T y1 + K2^T y2: correlation with the same kernels.
inline std::vector<double> correlate_pair(const KernelSpectra &ks, std::span<const double> y1,
                                          std::span<const double> y2, double scale) {
  const std::size_t m = ks.m;
  std::vector<fft::Complex> s1(fft::half_spectrum_size(m)), s2(s1.size());
  fft::forward(m, pad(y1, ks.n), s1);
  fft::forward(m, pad(y2, ks.n), s2);
  for (std::size_t i = 0; i < s1.size(); ++i)
    s1[i] = s1[i] * std::conj(ks.k1[i]) + s2[i] * std::conj(ks.k2[i]);
  std::vector<double> back(m * m), out;
  fft::backward(m, s1, back);
  crop_into(back, ks.n, scale / static_cast<double>(m * m), out);
  return out;
}

/// O(N^4) summation in a fixed order.
template <class KernelFn>
void direct_pair(std::size_t n, std::span<const double> x, double scale, KernelFn kernel,
                 std::vector<double> &out1, std::vector<double> &out2) {
  out1.assign(n * n, 0.0);
  out2.assign(n * n, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      double s1 = 0.0, s2 = 0.0;
      for (std::size_t rr = 0; rr < n; ++rr)
        for (std::size_t cc = 0; cc < n; ++cc) {
          const double v = x[rr * n + cc];
          if (v == 0.0) continue;
          const Vec2 k = kernel(static_cast<long>(c) - static_cast<long>(cc),
                                static_cast<long>(r) - static_cast<long>(rr));
          s1 += k.x * v;
          s2 += k.y * v;
        }
      out1[r * n + c] = scale * s1;
      out2[r * n + c] = scale * s2;
    }
}

inline void require_finite(const ScalarField &f, const char *what) {
  if (f.size() == 0) throw InvalidArgument(std::string(what) + ": empty field");
  if (!f.all_finite()) throw InvalidArgument(std::string(what) + ": non-finite input");
}

} // namespace detail

/// Deflection field (arcsec) of a convergence map.
inline VectorField deflection_from_kappa(const ScalarField &kappa,
                                         ConvolutionMethod method = ConvolutionMethod::fft) {
  detail::require_finite(kappa, "deflection_from_kappa");
  const auto &g = kappa.grid();
  VectorField out(g, Quantity::deflection);
  const double h = g.pixel_scale();
  if (method == ConvolutionMethod::fft)
    detail::convolve_pair(*detail::spectra_for(detail::KernelKind::deflection, g.n_pix()),
                          kappa.values(), h, out.c1(), out.c2());
  else
    detail::direct_pair(g.n_pix(), kappa.values(), h, detail::deflection_kernel, out.c1(),
                        out.c2());
  return out;
}

/// Shear field (gamma1, gamma2) of a convergence map.
inline VectorField shear_from_kappa(const ScalarField &kappa,
                                    ConvolutionMethod method = ConvolutionMethod::fft) {
  detail::require_finite(kappa, "shear_from_kappa");
  const auto &g = kappa.grid();
  VectorField out(g, Quantity::shear);
  if (method == ConvolutionMethod::fft)
    detail::convolve_pair(*detail::spectra_for(detail::KernelKind::shear, g.n_pix()),
                          kappa.values(), 1.0, out.c1(), out.c2());
  else
    detail::direct_pair(g.n_pix(), kappa.values(), 1.0, detail::shear_kernel, out.c1(),
                        out.c2());
  return out;
}

/// Adjoint of deflection_from_kappa with respect to the Euclidean pixel inner product.
inline ScalarField deflection_adjoint(const VectorField &y) {
  const auto &g = y.grid();
  return ScalarField(g, Quantity::generic,
                     detail::correlate_pair(
                         *detail::spectra_for(detail::KernelKind::deflection, g.n_pix()), y.c1(),
                         y.c2(), g.pixel_scale()));
}

/// Adjoint of shear_from_kappa.
inline ScalarField shear_adjoint(const VectorField &y) {
  const auto &g = y.grid();
  return ScalarField(
      g, Quantity::generic,
      detail::correlate_pair(*detail::spectra_for(detail::KernelKind::shear, g.n_pix()), y.c1(),
                             y.c2(), 1.0));
}

/// Source-plane position for every pixel: beta = theta - f * alpha, f = kappa_rescale.
inline VectorField ray_trace(const ScalarField &kappa, const LensScene &scene, double z_source) {
  const double f = kappa_rescale(scene, z_source);
  const auto alpha = deflection_from_kappa(kappa);
  const auto &g = kappa.grid();
  VectorField beta(g, Quantity::source_position);
  for (std::size_t r = 0; r < g.n_pix(); ++r)
    for (std::size_t c = 0; c < g.n_pix(); ++c) {
      const auto i = g.index(r, c);
      const Vec2 t = g.position(r, c);
      beta.c1()[i] = t.x - f * alpha.c1()[i];
      beta.c2()[i] = t.y - f * alpha.c2()[i];
    }
  return beta;
}

/// Per-pixel lens Jacobian d(beta)/d(theta) for a given source redshift.
struct JacobianField {
  AngularGrid grid;
  std::vector<double> a11, a12, a22; ///< symmetric: a21 == a12
  std::vector<double> det;

  double magnification(std::size_t i) const {
    return det[i] == 0.0 ? std::numeric_limits<double>::infinity() : 1.0 / det[i];
  }
  /// Pixels where det A vanishes exactly.
  bool critical(std::size_t i) const { return det[i] == 0.0; }
};

inline JacobianField lens_jacobian(const ScalarField &kappa, const LensScene &scene,
                                   double z_source) {
  const double f = kappa_rescale(scene, z_source);
  const auto gamma = shear_from_kappa(kappa);
  JacobianField j;
  j.grid = kappa.grid();
  const std::size_t n = kappa.size();
  j.a11.resize(n);
  j.a12.resize(n);
  j.a22.resize(n);
  j.det.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double k = f * kappa[i], g1 = f * gamma.c1()[i], g2 = f * gamma.c2()[i];
    j.a11[i] = 1.0 - k - g1;
    j.a12[i] = -g2;
    j.a22[i] = 1.0 - k + g1;
    j.det[i] = (1.0 - k) * (1.0 - k) - g1 * g1 - g2 * g2;
  }
  return j;
}

struct KsOptions {
  /// Conjugate-gradient sweeps on the padded shear operator after the
  /// continuous-kernel inverse; 0 gives the classic estimator.
  int refine_iterations = 25;
  double refine_tolerance = 1e-12;
};

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Fourier-space inverse of the continuous shear kernel on the unpadded grid.
inline std::vector<double> ks_classic(const VectorField &gamma) {
  const std::size_t n = gamma.n_pix();
  const std::size_t nh = n / 2 + 1;
  std::vector<fft::Complex> g1(fft::half_spectrum_size(n)), g2(g1.size()), k(g1.size());
  fft::forward(n, gamma.c1(), g1);
  fft::forward(n, gamma.c2(), g2);
  for (std::size_t r = 0; r < n; ++r) {
    const double ky = static_cast<double>(fft::frequency(r, n));
    for (std::size_t c = 0; c < nh; ++c) {
      const double kx = static_cast<double>(c);
      const double k2 = kx * kx + ky * ky;
      const auto i = r * nh + c;
      k[i] = k2 == 0.0 ? fft::Complex{} : ((kx * kx - ky * ky) * g1[i] + 2.0 * kx * ky * g2[i]) / k2;
    }
  }
  std::vector<double> out(n * n);
  fft::backward(n, k, out);
  for (auto &v : out) v /= static_cast<double>(n * n);
  return out;
}

} // namespace detail

/// Zero-mean convergence whose shear reproduces `gamma`.
inline ScalarField ks_invert(const VectorField &gamma, const KsOptions &opt = {}) {
  if (!gamma.all_finite()) throw InvalidArgument("ks_invert: non-finite shear");
  const auto &g = gamma.grid();
  ScalarField kappa(g, Quantity::convergence, detail::ks_classic(gamma));

  if (opt.refine_iterations > 0) {
    // CGLS on min |S kappa - gamma|^2 with S the exact padded operator.
    const std::size_t n = kappa.size();
    auto s_kappa = shear_from_kappa(kappa);
    VectorField r(g, Quantity::shear);
    for (std::size_t i = 0; i < n; ++i) {
      r.c1()[i] = gamma.c1()[i] - s_kappa.c1()[i];
      r.c2()[i] = gamma.c2()[i] - s_kappa.c2()[i];
    }
    auto s = shear_adjoint(r);
    auto p = s;
    double ss = detail::dot(s.values(), s.values());
    const double ss0 = ss;
    for (int it = 0; it < opt.refine_iterations && ss > 0.0; ++it) {
      if (ss <= opt.refine_tolerance * opt.refine_tolerance * ss0) break;
      const auto q = shear_from_kappa(p);
      const double qq = detail::dot(q.c1(), q.c1()) + detail::dot(q.c2(), q.c2());
      if (!(qq > 0.0)) break;
      const double a = ss / qq;
      for (std::size_t i = 0; i < n; ++i) {
        kappa[i] += a * p[i];
        r.c1()[i] -= a * q.c1()[i];
        r.c2()[i] -= a * q.c2()[i];
      }
      s = shear_adjoint(r);
      const double ss_new = detail::dot(s.values(), s.values());
      const double b = ss_new / ss;
      for (std::size_t i = 0; i < n; ++i) p[i] = s[i] + b * p[i];
      ss = ss_new;
    }
  }
  const double mean = kappa.mean();
  for (auto &v : kappa.values()) v -= mean;
  return kappa;
}

enum class LensKind { point_mass, sis };

/// Closed-form lens used as an oracle.
struct AnalyticLens {
  LensKind kind = LensKind::sis;
  double einstein_radius = 1.0; ///< arcsec
  Vec2 center{};

  void validate() const {
    if (!(einstein_radius > 0.0) || !std::isfinite(einstein_radius))
      throw InvalidArgument("Einstein radius must be positive");
  }
};

inline Vec2 analytic_deflection(const AnalyticLens &lens, Vec2 theta) {
  lens.validate();
  const Vec2 d = theta - lens.center;
  const double r2 = d.norm2();
  if (r2 == 0.0) throw SingularityError("analytic deflection evaluated at the lens center");
  const double te = lens.einstein_radius;
  if (lens.kind == LensKind::point_mass) return d * (te * te / r2);
  return d * (te / std::sqrt(r2));
}

enum class KappaSampling { pixel_average, point };

namespace detail {

// Antiderivative of 1/|theta| over [0,x] x [0,y], extended oddly to every quadrant.
inline double inv_r_primitive(double x, double y) {
  const double ax = std::abs(x), ay = std::abs(y);
  if (ax == 0.0 || ay == 0.0) return 0.0;
  const double f = ax * std::asinh(ay / ax) + ay * std::asinh(ax / ay);
  return (x < 0) == (y < 0) ? f : -f;
}

} // namespace detail

/// Convergence map of a closed-form lens. The SIS is either averaged exactly
/// over each pixel (mass-conserving, finite at the center) or sampled at pixel
/// centers; the point mass is deposited bilinearly onto the four pixels around
/// its center so the discrete mass and centroid are exact.
inline ScalarField analytic_kappa(const AnalyticLens &lens, const AngularGrid &grid,
                                  KappaSampling sampling = KappaSampling::pixel_average) {
  lens.validate();
  ScalarField kappa(grid, Quantity::convergence);
  const double te = lens.einstein_radius;
  if (lens.kind == LensKind::point_mass) {
    const double u = grid.to_pixel(lens.center.x), v = grid.to_pixel(lens.center.y);
    const double last = static_cast<double>(grid.n_pix() - 1);
    if (u < 0.0 || v < 0.0 || u > last || v > last)
      throw InvalidArgument("point-mass center must lie within the pixel-center hull");
    scatter(kappa.values(), bilinear_stencil(grid, lens.center),
            constants::pi * te * te / grid.pixel_area());
    return kappa;
  }
  const double hh = 0.5 * grid.pixel_scale();
  for (std::size_t r = 0; r < grid.n_pix(); ++r)
    for (std::size_t c = 0; c < grid.n_pix(); ++c) {
      const Vec2 d = grid.position(r, c) - lens.center;
      if (sampling == KappaSampling::point) {
        if (d.norm2() == 0.0) throw SingularityError("SIS convergence evaluated at the lens center");
        kappa(r, c) = te / (2.0 * d.norm());
        continue;
      }
      const double x0 = d.x - hh, x1 = d.x + hh, y0 = d.y - hh, y1 = d.y + hh;
      const double integral = detail::inv_r_primitive(x1, y1) - detail::inv_r_primitive(x0, y1) -
                              detail::inv_r_primitive(x1, y0) + detail::inv_r_primitive(x0, y0);
      kappa(r, c) = 0.5 * te * integral / grid.pixel_area();
    }
  return kappa;
}

} // namespace lensforge
