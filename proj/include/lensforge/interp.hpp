#pragma once

// Bilinear sampling of gridded planes at off-grid angular positions, and its
// exact adjoint (scatter), used by every sparse observation operator.

#include <algorithm>
#include <array>
#include <cmath>
#include <span>

#include "lensforge/grid.hpp"

namespace lensforge {

/// Four pixel indices and weights; weights sum to 1.
struct BilinearStencil {
  std::array<std::size_t, 4> index{};
  std::array<double, 4> weight{};
};

/// Positions beyond the outermost pixel centers are clamped onto them.
inline BilinearStencil bilinear_stencil(const AngularGrid &g, Vec2 theta) {
  const double last = static_cast<double>(g.n_pix() - 1);
  const double u = std::clamp(g.to_pixel(theta.x), 0.0, last);
  const double v = std::clamp(g.to_pixel(theta.y), 0.0, last);
  auto c0 = static_cast<std::size_t>(std::floor(u));
  auto r0 = static_cast<std::size_t>(std::floor(v));
  c0 = std::min(c0, g.n_pix() - 2);
  r0 = std::min(r0, g.n_pix() - 2);
  const double fu = u - static_cast<double>(c0);
  const double fv = v - static_cast<double>(r0);
  BilinearStencil s;
  s.index = {g.index(r0, c0), g.index(r0, c0 + 1), g.index(r0 + 1, c0), g.index(r0 + 1, c0 + 1)};
  s.weight = {(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv};
  return s;
}

inline double sample(std::span<const double> plane, const BilinearStencil &s) {
  double v = 0.0;
  for (int k = 0; k < 4; ++k) v += s.weight[k] * plane[s.index[k]];
  return v;
}

/// Adjoint of `sample`: accumulates value * weight into the plane.
inline void scatter(std::span<double> plane, const BilinearStencil &s, double value) {
  for (int k = 0; k < 4; ++k) plane[s.index[k]] += s.weight[k] * value;
}

inline double sample(const ScalarField &f, Vec2 theta) {
  return sample(f.values(), bilinear_stencil(f.grid(), theta));
}

inline Vec2 sample(const VectorField &f, Vec2 theta) {
  const auto s = bilinear_stencil(f.grid(), theta);
  return {sample(f.c1(), s), sample(f.c2(), s)};
}

} // namespace lensforge
