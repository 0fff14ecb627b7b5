#pragma once

// Gridded angular maps. All angles are arcseconds; row index increases with
// the second angular component, column index with the first.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lensforge/error.hpp"

namespace lensforge {

/// 2-D angular position or displacement (arcsec).
struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  constexpr Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  constexpr Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  constexpr Vec2 operator*(double s) const { return {x * s, y * s}; }
  constexpr Vec2 &operator+=(Vec2 o) {
    x += o.x;
    y += o.y;
    return *this;
  }
  constexpr bool operator==(const Vec2 &) const = default;
  double norm() const { return std::hypot(x, y); }
  constexpr double norm2() const { return x * x + y * y; }
};

inline constexpr double kArcsecPerRadian = 206264.80624709636;

/// Square grid of pixel centers symmetric about the optical axis.
class AngularGrid {
public:
  AngularGrid() = default;
  AngularGrid(std::size_t n_pix, double fov) : n_(n_pix), fov_(fov) {
    if (n_pix < 2)
      throw InvalidArgument("grid needs at least 2 pixels per side, got " +
                            std::to_string(n_pix));
    if (!(fov > 0.0) || !std::isfinite(fov))
      throw InvalidArgument("field of view must be positive and finite");
  }

  std::size_t n_pix() const noexcept { return n_; }
  std::size_t size() const noexcept { return n_ * n_; }
  double fov() const noexcept { return fov_; }
  double pixel_scale() const noexcept { return fov_ / static_cast<double>(n_); }
  double pixel_area() const noexcept { return pixel_scale() * pixel_scale(); }

  /// Center coordinate of pixel k along either axis.
  double center(std::size_t k) const noexcept {
    // Integer numerator keeps theta_k = -theta_{n-1-k} exact.
    const double m = 2.0 * static_cast<double>(k) + 1.0 - static_cast<double>(n_);
    return m * (0.5 * pixel_scale());
  }
  Vec2 position(std::size_t row, std::size_t col) const noexcept {
    return {center(col), center(row)};
  }
  std::size_t index(std::size_t row, std::size_t col) const noexcept {
    return row * n_ + col;
  }
  /// Continuous pixel coordinate (0 at the center of pixel 0).
  double to_pixel(double theta) const noexcept {
    return (theta + 0.5 * fov_) / pixel_scale() - 0.5;
  }
  bool contains(Vec2 t) const noexcept {
    const double h = 0.5 * fov_;
    return t.x >= -h && t.x <= h && t.y >= -h && t.y <= h;
  }

  bool operator==(const AngularGrid &o) const noexcept {
    return n_ == o.n_ && fov_ == o.fov_;
  }

private:
  std::size_t n_ = 0;
  double fov_ = 0.0;
};

inline AngularGrid make_grid(std::size_t n_pix, double fov) { return {n_pix, fov}; }

/// Physical meaning of a raster; stored as the raster quantity tag.
enum class Quantity : std::uint32_t {
  generic = 0,
  convergence = 1,
  surface_density = 2, ///< 10^10 Msun/h per (ckpc/h)^2
  photometry = 3,      ///< flux density per pixel, Jy
  deflection = 4,      ///< arcsec
  shear = 5,
  source_position = 6, ///< arcsec
};

inline std::string to_string(Quantity q) {
  switch (q) {
  case Quantity::generic: return "generic";
  case Quantity::convergence: return "convergence";
  case Quantity::surface_density: return "surface_density";
  case Quantity::photometry: return "photometry";
  case Quantity::deflection: return "deflection";
  case Quantity::shear: return "shear";
  case Quantity::source_position: return "source_position";
  }
  return "unknown";
}

class ScalarField {
public:
  ScalarField() = default;
  explicit ScalarField(AngularGrid grid, Quantity q = Quantity::generic, double fill = 0.0)
      : grid_(grid), quantity_(q), values_(grid.size(), fill) {}
  ScalarField(AngularGrid grid, Quantity q, std::vector<double> values)
      : grid_(grid), quantity_(q), values_(std::move(values)) {
    if (values_.size() != grid_.size())
      throw InvalidArgument("scalar field value count does not match grid");
  }

  const AngularGrid &grid() const noexcept { return grid_; }
  Quantity quantity() const noexcept { return quantity_; }
  void set_quantity(Quantity q) noexcept { quantity_ = q; }
  std::size_t n_pix() const noexcept { return grid_.n_pix(); }
  std::size_t size() const noexcept { return values_.size(); }

  double &operator()(std::size_t row, std::size_t col) { return values_[row * grid_.n_pix() + col]; }
  double operator()(std::size_t row, std::size_t col) const {
    return values_[row * grid_.n_pix() + col];
  }
  double &operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  std::vector<double> &data() noexcept { return values_; }
  const std::vector<double> &data() const noexcept { return values_; }

  bool all_finite() const {
    for (double v : values_)
      if (!std::isfinite(v)) return false;
    return true;
  }
  double sum() const {
    double s = 0.0;
    for (double v : values_) s += v;
    return s;
  }
  double mean() const { return values_.empty() ? 0.0 : sum() / static_cast<double>(values_.size()); }

private:
  AngularGrid grid_;
  Quantity quantity_ = Quantity::generic;
  std::vector<double> values_;
};

/// Two real components per pixel, stored as separate planes.
class VectorField {
public:
  VectorField() = default;
  explicit VectorField(AngularGrid grid, Quantity q = Quantity::generic)
      : grid_(grid), quantity_(q), c1_(grid.size(), 0.0), c2_(grid.size(), 0.0) {}
  VectorField(AngularGrid grid, Quantity q, std::vector<double> c1, std::vector<double> c2)
      : grid_(grid), quantity_(q), c1_(std::move(c1)), c2_(std::move(c2)) {
    if (c1_.size() != grid_.size() || c2_.size() != grid_.size())
      throw InvalidArgument("vector field component count does not match grid");
  }

  const AngularGrid &grid() const noexcept { return grid_; }
  Quantity quantity() const noexcept { return quantity_; }
  void set_quantity(Quantity q) noexcept { quantity_ = q; }
  std::size_t n_pix() const noexcept { return grid_.n_pix(); }
  std::size_t size() const noexcept { return c1_.size(); }

  std::vector<double> &c1() noexcept { return c1_; }
  std::vector<double> &c2() noexcept { return c2_; }
  const std::vector<double> &c1() const noexcept { return c1_; }
  const std::vector<double> &c2() const noexcept { return c2_; }

  Vec2 at(std::size_t i) const { return {c1_[i], c2_[i]}; }
  Vec2 at(std::size_t row, std::size_t col) const { return at(row * grid_.n_pix() + col); }

  bool all_finite() const {
    for (std::size_t i = 0; i < c1_.size(); ++i)
      if (!std::isfinite(c1_[i]) || !std::isfinite(c2_[i])) return false;
    return true;
  }

private:
  AngularGrid grid_;
  Quantity quantity_ = Quantity::generic;
  std::vector<double> c1_, c2_;
};

/// HST-like filter bands carried by every photometry stack.
enum class Band : int { f125 = 125, f606 = 606, f814 = 814 };
inline constexpr std::array<Band, 3> kBands{Band::f125, Band::f606, Band::f814};

inline std::size_t band_slot(Band b) {
  switch (b) {
  case Band::f125: return 0;
  case Band::f606: return 1;
  case Band::f814: return 2;
  }
  throw InvalidArgument("unknown band id " + std::to_string(static_cast<int>(b)));
}

inline Band band_from_id(int id) {
  for (Band b : kBands)
    if (static_cast<int>(b) == id) return b;
  throw InvalidArgument("unknown band id " + std::to_string(id));
}

class PhotometryStack {
public:
  PhotometryStack() = default;
  explicit PhotometryStack(AngularGrid grid) {
    for (auto &f : bands_) f = ScalarField(grid, Quantity::photometry);
  }
  PhotometryStack(ScalarField f125, ScalarField f606, ScalarField f814)
      : bands_{std::move(f125), std::move(f606), std::move(f814)} {
    if (!(bands_[0].grid() == bands_[1].grid()) || !(bands_[0].grid() == bands_[2].grid()))
      throw InvalidArgument("photometry bands must share one grid");
    for (auto &f : bands_) f.set_quantity(Quantity::photometry);
  }

  const AngularGrid &grid() const noexcept { return bands_[0].grid(); }
  bool empty() const noexcept { return bands_[0].size() == 0; }
  ScalarField &band(Band b) { return bands_[band_slot(b)]; }
  const ScalarField &band(Band b) const { return bands_[band_slot(b)]; }

private:
  std::array<ScalarField, 3> bands_;
};

} // namespace lensforge
