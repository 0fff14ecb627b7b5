#pragma once

// Logarithmic shift-and-scale map between physical convergence and the unit
// range the sampler works in.

#include <algorithm>
#include <cmath>
#include <numbers>

#include "lensforge/grid.hpp"

namespace lensforge {

struct Normalization {
  double epsilon = 1e-6;
  double lo = -6.0;
  double hi = 1.0;

  double span() const { return hi - lo; }

  double forward(double kappa) const {
    const double x = (std::log10(std::max(kappa, 0.0) + epsilon) - lo) / span();
    return std::clamp(x, 0.0, 1.0);
  }
  /// Smooth inverse, defined for every real x; equals kappa on the open range.
  double inverse_unclamped(double x) const { return std::pow(10.0, lo + span() * x) - epsilon; }
  double inverse(double x) const { return std::max(0.0, inverse_unclamped(x)); }
  /// d kappa / d x of the smooth inverse.
  double derivative(double x) const {
    return std::numbers::ln10 * span() * std::pow(10.0, lo + span() * x);
  }
  /// Largest |x| a healthy chain may reach before it counts as diverged.
  double divergence_bound() const { return 10.0; }
};

inline ScalarField normalize(const ScalarField &kappa, const Normalization &n = {}) {
  ScalarField x(kappa.grid(), Quantity::generic);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = n.forward(kappa[i]);
  return x;
}

inline ScalarField denormalize(const ScalarField &x, const Normalization &n = {}) {
  ScalarField k(x.grid(), Quantity::convergence);
  for (std::size_t i = 0; i < k.size(); ++i) k[i] = n.inverse(x[i]);
  return k;
}

} // namespace lensforge
