#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "lensforge/grid.hpp"
#include "lensforge/random.hpp"

namespace lftest {

using namespace lensforge;

inline ScalarField random_field(const AngularGrid &g, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed, {0x7e57});
  ScalarField f(g, Quantity::convergence);
  for (auto &v : f.values()) v = scale * rng.normal();
  return f;
}

/// Gaussian blob sum; smooth and positive.
inline ScalarField smooth_field(const AngularGrid &g, std::uint64_t seed, int blobs = 6) {
  Rng rng(seed, {0xb10b});
  ScalarField f(g, Quantity::convergence);
  const double half = 0.5 * g.fov();
  for (int b = 0; b < blobs; ++b) {
    const Vec2 c{rng.uniform(-0.6, 0.6) * half, rng.uniform(-0.6, 0.6) * half};
    const double w = rng.uniform(0.05, 0.2) * g.fov();
    const double a = rng.uniform(0.2, 1.0);
    for (std::size_t r = 0; r < g.n_pix(); ++r)
      for (std::size_t k = 0; k < g.n_pix(); ++k) {
        const double d2 = (g.position(r, k) - c).norm2();
        f(r, k) += a * std::exp(-0.5 * d2 / (w * w));
      }
  }
  return f;
}

inline bool in_interior(const AngularGrid &g, std::size_t i, std::size_t margin) {
  const std::size_t n = g.n_pix(), r = i / n, c = i % n;
  return r >= margin && c >= margin && r + margin < n && c + margin < n;
}

/// max |a - b| over interior pixels divided by max |b| there.
inline double interior_rel_err(const AngularGrid &g, const std::vector<double> &a,
                               const std::vector<double> &b, std::size_t margin) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!in_interior(g, i, margin)) continue;
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max(den, std::abs(b[i]));
  }
  return den > 0.0 ? num / den : num;
}

inline double dot(const std::vector<double> &a, const std::vector<double> &b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

} // namespace lftest
