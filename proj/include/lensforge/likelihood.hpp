#pragma once

// Data-fidelity terms on a convergence map stored at z_ref, each returning the
// loss value and its gradient with respect to every pixel of kappa.

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "lensforge/observe.hpp"

namespace lensforge {

struct LossWeights {
  double lambda_geo = 0.6e-2;
  double lambda_img = 0.6e-3;
  double lambda_w = 0.05;

  void validate() const {
    for (double l : {lambda_geo, lambda_img, lambda_w})
      if (!(l >= 0.0) || !std::isfinite(l))
        throw InvalidArgument("loss weights must be finite and non-negative");
  }
  bool all_zero() const { return lambda_geo == 0.0 && lambda_img == 0.0 && lambda_w == 0.0; }
};

/// Loss value and gradient with respect to kappa.
struct LossResult {
  double value = 0.0;
  ScalarField gradient;
};

// ---------------------------------------------------------------------------
// Strong lensing

/// Per-image source-plane estimates and their mean for one system.
struct BetaHat {
  std::vector<Vec2> per_image;
  Vec2 mean{};
};

namespace detail {

inline void require_inside(const AngularGrid &g, const StrongLensSystem &s) {
  if (s.images.empty()) throw InvalidArgument("strong-lensing system without images");
  for (const Vec2 t : s.images)
    if (!g.contains(t))
      throw InvalidArgument("image of source " + std::to_string(s.source_id) +
                            " lies outside the grid");
}

inline BetaHat beta_hat_from(const VectorField &alpha, double f, const StrongLensSystem &s) {
  require_inside(alpha.grid(), s);
  BetaHat b;
  for (const Vec2 t : s.images) {
    const Vec2 bi = t - sample(alpha, t) * f;
    b.per_image.push_back(bi);
    b.mean += bi;
  }
  b.mean = b.mean * (1.0 / static_cast<double>(s.images.size()));
  return b;
}

} // namespace detail

inline BetaHat beta_hat(const ScalarField &kappa, const LensScene &scene,
                        const StrongLensSystem &system) {
  return detail::beta_hat_from(deflection_from_kappa(kappa), kappa_rescale(scene, system.z_s),
                               system);
}

namespace detail {

/// Accumulates the strong-lensing terms given a precomputed deflection map.
/// `g_alpha` receives d(value)/d(alpha) at z_ref; the caller applies the
/// deflection adjoint once for every term.
inline double strong_geo(const VectorField &alpha, const std::vector<StrongLensSystem> &systems,
                         const std::vector<double> &rescale, double weight, VectorField &g_alpha) {
  if (systems.empty()) return 0.0;
  const double inv_n = 1.0 / static_cast<double>(systems.size());
  double value = 0.0;
  for (std::size_t i = 0; i < systems.size(); ++i) {
    const auto &s = systems[i];
    const auto b = beta_hat_from(alpha, rescale[i], s);
    const double inv_m = 1.0 / static_cast<double>(s.images.size());
    double term = 0.0;
    for (std::size_t j = 0; j < s.images.size(); ++j) {
      const Vec2 d = b.per_image[j] - b.mean;
      term += d.norm2();
      // d/d beta_ij of sum_j |beta_ij - mean|^2 is 2 (beta_ij - mean); the mean's
      // own contribution vanishes because the deviations sum to zero.
      const double c = -2.0 * rescale[i] * inv_n * inv_m * weight;
      const auto st = bilinear_stencil(alpha.grid(), s.images[j]);
      scatter(g_alpha.c1(), st, c * d.x);
      scatter(g_alpha.c2(), st, c * d.y);
    }
    value += inv_m * term;
  }
  return inv_n * value;
}

inline double strong_img(const VectorField &alpha, const std::vector<StrongLensSystem> &systems,
                         const std::vector<double> &rescale, const ScalarField &observed,
                         double weight, VectorField &g_alpha) {
  if (systems.empty()) return 0.0;
  const auto &g = alpha.grid();
  const double area = g.pixel_area();
  const double inv_n = 1.0 / static_cast<double>(systems.size());
  double value = 0.0;
  for (std::size_t i = 0; i < systems.size(); ++i) {
    const auto &s = systems[i];
    const auto b = beta_hat_from(alpha, rescale[i], s);
    const std::size_t m = s.images.size();
    const double inv_m = 1.0 / static_cast<double>(m);
    SersicSource src = s.source;
    src.center = b.mean;

    std::vector<Vec2> d_beta(m); // d(value)/d(beta_ij) through the image term
    Vec2 d_mean{};               // d(value)/d(mean beta)
    double term = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double p_obs = sample(observed, s.images[j]);
      const double p_hat = area * sersic_intensity(src, b.per_image[j]);
      const double r = p_obs - p_hat;
      term += r * r;
      const Vec2 grad = sersic_intensity_gradient(src, b.per_image[j]) * area;
      const double w = -2.0 * r * inv_n * inv_m * weight;
      d_beta[j] = grad * w;
      d_mean += grad * (-w);
    }
    value += inv_m * term;
    for (std::size_t j = 0; j < m; ++j) {
      const Vec2 total = d_beta[j] + d_mean * inv_m;
      const auto st = bilinear_stencil(g, s.images[j]);
      scatter(g_alpha.c1(), st, -rescale[i] * total.x);
      scatter(g_alpha.c2(), st, -rescale[i] * total.y);
    }
  }
  return inv_n * value;
}

inline std::vector<double> rescales(const LensScene &scene,
                                    const std::vector<StrongLensSystem> &systems) {
  std::vector<double> f;
  f.reserve(systems.size());
  for (const auto &s : systems) f.push_back(kappa_rescale(scene, s.z_s));
  return f;
}

} // namespace detail

inline LossResult loss_strong_geo(const ScalarField &kappa, const LensScene &scene,
                                  const std::vector<StrongLensSystem> &systems) {
  LossResult out{0.0, ScalarField(kappa.grid())};
  if (systems.empty()) return out;
  const auto alpha = deflection_from_kappa(kappa);
  VectorField g_alpha(kappa.grid());
  out.value = detail::strong_geo(alpha, systems, detail::rescales(scene, systems), 1.0, g_alpha);
  out.gradient = deflection_adjoint(g_alpha);
  return out;
}

inline LossResult loss_strong_img(const ScalarField &kappa, const LensScene &scene,
                                  const std::vector<StrongLensSystem> &systems,
                                  const PhotometryStack &photometry, Band band = Band::f125) {
  LossResult out{0.0, ScalarField(kappa.grid())};
  if (systems.empty()) return out;
  if (photometry.empty() || photometry.band(band).size() == 0)
    throw InvalidArgument("photometric loss needs the F" +
                          std::to_string(static_cast<int>(band)) + " band");
  if (!(photometry.grid() == kappa.grid()))
    throw InvalidArgument("photometry grid does not match the convergence grid");
  const auto alpha = deflection_from_kappa(kappa);
  VectorField g_alpha(kappa.grid());
  out.value = detail::strong_img(alpha, systems, detail::rescales(scene, systems),
                                 photometry.band(band), 1.0, g_alpha);
  out.gradient = deflection_adjoint(g_alpha);
  return out;
}

// ---------------------------------------------------------------------------
// Weak lensing

/// Gaussian RBF settings; unset fields take data-driven defaults.
struct RbfConfig {
  std::optional<double> length_scale; ///< arcsec; default 2 x median nearest-neighbour spacing
  std::optional<double> ridge;        ///< default 1e-6 + sigma_w2 / N

  void validate() const {
    if (length_scale && !(*length_scale > 0.0)) throw InvalidArgument("RBF length scale must be positive");
    if (ridge && !(*ridge > 0.0)) throw InvalidArgument("RBF ridge must be positive");
  }
};

inline double median_nearest_neighbour(const std::vector<WeakEntry> &entries) {
  if (entries.size() < 2) return 0.0;
  std::vector<double> nn(entries.size(), std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < entries.size(); ++i)
    for (std::size_t j = i + 1; j < entries.size(); ++j) {
      const double d = (entries[i].theta - entries[j].theta).norm();
      nn[i] = std::min(nn[i], d);
      nn[j] = std::min(nn[j], d);
    }
  const auto mid = nn.begin() + static_cast<long>(nn.size() / 2);
  std::nth_element(nn.begin(), mid, nn.end());
  return *mid;
}

/// Solved RBF weights for both shear components; evaluates anywhere.
class RbfModel {
public:
  RbfModel(std::vector<Vec2> centers, std::vector<Vec2> values, double length_scale, double ridge)
      : centers_(std::move(centers)), ell_(length_scale), ridge_(ridge) {
    if (centers_.size() != values.size()) throw InvalidArgument("RBF centers/values mismatch");
    if (!(ell_ > 0.0) || !(ridge_ > 0.0)) throw InvalidArgument("RBF needs positive length scale and ridge");
    const auto n = static_cast<Eigen::Index>(centers_.size());
    if (n == 0) return;
    // Gaussian kernel plus a constant term:
    //   [K + ridge I  1] [w]   [v]
    //   [1^T          0] [c] = [0]
    // solved by Cholesky of K + ridge I and the Schur complement of the constant.
    Eigen::MatrixXd k(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j)
        k(i, j) = kernel((centers_[static_cast<std::size_t>(i)] - centers_[static_cast<std::size_t>(j)]).norm2());
    k.diagonal().array() += ridge_;
    const Eigen::LLT<Eigen::MatrixXd> llt(k);
    if (llt.info() != Eigen::Success) throw NumericError("RBF system is not positive definite");
    Eigen::MatrixXd rhs(n, 2);
    for (Eigen::Index i = 0; i < n; ++i) {
      rhs(i, 0) = values[static_cast<std::size_t>(i)].x;
      rhs(i, 1) = values[static_cast<std::size_t>(i)].y;
    }
    const Eigen::VectorXd u = llt.solve(Eigen::VectorXd::Ones(n));
    const Eigen::MatrixXd z = llt.solve(rhs);
    const double denom = u.sum();
    if (!(denom > 0.0) || !std::isfinite(denom)) throw NumericError("RBF constant term is singular");
    const Eigen::RowVector2d c = z.colwise().sum() / denom;
    const Eigen::MatrixXd w = z - u * c;
    if (!w.allFinite()) throw NumericError("RBF solve produced non-finite weights");
    offset_ = {c(0), c(1)};
    weights_.resize(centers_.size());
    for (Eigen::Index i = 0; i < n; ++i) weights_[static_cast<std::size_t>(i)] = {w(i, 0), w(i, 1)};
  }

  double length_scale() const noexcept { return ell_; }
  double ridge() const noexcept { return ridge_; }
  Vec2 offset() const noexcept { return offset_; }
  const std::vector<Vec2> &weights() const noexcept { return weights_; }

  Vec2 operator()(Vec2 t) const {
    Vec2 s = offset_;
    for (std::size_t i = 0; i < centers_.size(); ++i) s += weights_[i] * kernel((t - centers_[i]).norm2());
    return s;
  }

  VectorField evaluate(const AngularGrid &g) const {
    VectorField out(g, Quantity::shear);
    parallel_for(g.n_pix(), [&](std::size_t r) {
      for (std::size_t c = 0; c < g.n_pix(); ++c) {
        const Vec2 v = (*this)(g.position(r, c));
        out.c1()[g.index(r, c)] = v.x;
        out.c2()[g.index(r, c)] = v.y;
      }
    });
    return out;
  }

private:
  double kernel(double r2) const { return std::exp(-0.5 * r2 / (ell_ * ell_)); }

  std::vector<Vec2> centers_;
  std::vector<Vec2> weights_;
  Vec2 offset_{};
  double ell_, ridge_;
};

/// Shear values rescaled from each galaxy's redshift to z_ref.
inline std::vector<Vec2> reference_shears(const WeakCatalog &cat, const LensScene &scene) {
  std::vector<Vec2> v;
  v.reserve(cat.entries.size());
  for (const auto &e : cat.entries) v.push_back(e.gamma * (1.0 / kappa_rescale(scene, e.z_s)));
  return v;
}

inline RbfModel fit_rbf(const WeakCatalog &cat, const RbfConfig &cfg, const LensScene &scene) {
  cfg.validate();
  std::vector<Vec2> centers;
  for (const auto &e : cat.entries) centers.push_back(e.theta);
  const double n = static_cast<double>(std::max<std::size_t>(cat.entries.size(), 1));
  double ell = cfg.length_scale.value_or(2.0 * median_nearest_neighbour(cat.entries));
  if (!(ell > 0.0)) ell = 1.0;
  const double ridge = cfg.ridge.value_or(1e-6 + cat.sigma_w2 / n);
  return RbfModel(std::move(centers), reference_shears(cat, scene), ell, ridge);
}

/// Dense shear map at z_ref interpolated from a catalog.
inline VectorField rbf_interpolate(const WeakCatalog &cat, const RbfConfig &cfg,
                                   const AngularGrid &grid, const LensScene &scene) {
  return fit_rbf(cat, cfg, scene).evaluate(grid);
}

/// Weak-lensing term with its interpolated target computed once.
class WeakTerm {
public:
  /// Variance used in place of an exactly zero sigma_w2.
  static constexpr double kVarianceFloor = 1e-8;

  WeakTerm(const WeakCatalog &cat, const RbfConfig &cfg, const AngularGrid &grid,
           const LensScene &scene)
      : sigma_w2_(cat.sigma_w2), empty_(cat.entries.empty()) {
    if (!empty_) target_ = rbf_interpolate(cat, cfg, grid, scene);
  }

  bool empty() const noexcept { return empty_; }
  double sigma_w2() const noexcept { return sigma_w2_; }
  const VectorField &target() const noexcept { return target_; }

  /// Adds weight * value to the return and weight * gradient to `grad`.
  double accumulate(const VectorField &shear, double weight, ScalarField &grad) const {
    if (empty_) return 0.0;
    const double inv = 1.0 / std::max(sigma_w2_, kVarianceFloor);
    VectorField res(shear.grid(), Quantity::shear);
    double value = 0.0;
    for (std::size_t i = 0; i < shear.size(); ++i) {
      res.c1()[i] = shear.c1()[i] - target_.c1()[i];
      res.c2()[i] = shear.c2()[i] - target_.c2()[i];
      value += res.c1()[i] * res.c1()[i] + res.c2()[i] * res.c2()[i];
    }
    const auto adj = shear_adjoint(res);
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += weight * 2.0 * inv * adj[i];
    return inv * value;
  }

private:
  double sigma_w2_;
  bool empty_;
  VectorField target_;
};

inline LossResult loss_weak(const ScalarField &kappa, const WeakTerm &term) {
  LossResult out{0.0, ScalarField(kappa.grid())};
  if (term.empty()) return out;
  out.value = term.accumulate(shear_from_kappa(kappa), 1.0, out.gradient);
  return out;
}

inline LossResult loss_weak(const ScalarField &kappa, const LensScene &scene,
                            const WeakCatalog &catalog, const RbfConfig &cfg = {}) {
  return loss_weak(kappa, WeakTerm(catalog, cfg, kappa.grid(), scene));
}

// ---------------------------------------------------------------------------
// Total

/// Everything the likelihood may use; absent pieces disable their term.
struct ObservationData {
  std::vector<StrongLensSystem> systems;
  std::optional<PhotometryStack> photometry;
  std::optional<WeakCatalog> weak;
  RbfConfig rbf{};
  Band photometric_band = Band::f125;
};

/// Weighted sum of the active terms, with cached per-dataset precomputation.
/// Safe for concurrent evaluation.
class NegLogLikelihood {
public:
  NegLogLikelihood(const LensScene &scene, const AngularGrid &grid, ObservationData data,
                   LossWeights weights)
      : scene_(scene), grid_(grid), data_(std::move(data)), weights_(weights) {
    weights_.validate();
    scene_.validate();
    rescale_ = detail::rescales(scene_, data_.systems);
    for (const auto &s : data_.systems) detail::require_inside(grid_, s);
    if (data_.photometry && !(data_.photometry->grid() == grid_))
      throw InvalidArgument("photometry grid does not match the reconstruction grid");
    if (data_.weak && weights_.lambda_w > 0.0)
      weak_ = std::make_shared<const WeakTerm>(*data_.weak, data_.rbf, grid_, scene_);
  }

  const LossWeights &weights() const noexcept { return weights_; }
  const AngularGrid &grid() const noexcept { return grid_; }
  bool geo_active() const { return weights_.lambda_geo > 0.0 && !data_.systems.empty(); }
  bool img_active() const {
    return weights_.lambda_img > 0.0 && !data_.systems.empty() && data_.photometry.has_value();
  }
  bool weak_active() const { return weights_.lambda_w > 0.0 && weak_ && !weak_->empty(); }
  bool active() const { return geo_active() || img_active() || weak_active(); }

  LossResult operator()(const ScalarField &kappa) const {
    if (!(kappa.grid() == grid_)) throw InvalidArgument("convergence grid mismatch");
    LossResult out{0.0, ScalarField(grid_)};
    if (geo_active() || img_active()) {
      const auto alpha = deflection_from_kappa(kappa);
      VectorField g_alpha(grid_);
      if (geo_active())
        out.value += weights_.lambda_geo *
                     detail::strong_geo(alpha, data_.systems, rescale_, weights_.lambda_geo, g_alpha);
      if (img_active())
        out.value += weights_.lambda_img *
                     detail::strong_img(alpha, data_.systems, rescale_,
                                        data_.photometry->band(data_.photometric_band),
                                        weights_.lambda_img, g_alpha);
      out.gradient = deflection_adjoint(g_alpha);
    }
    if (weak_active())
      out.value += weights_.lambda_w *
                   weak_->accumulate(shear_from_kappa(kappa), weights_.lambda_w, out.gradient);
    return out;
  }

private:
  LensScene scene_;
  AngularGrid grid_;
  ObservationData data_;
  LossWeights weights_;
  std::vector<double> rescale_;
  std::shared_ptr<const WeakTerm> weak_;
};

inline LossResult neg_log_likelihood(const ScalarField &kappa, const LensScene &scene,
                                     const ObservationData &data, const LossWeights &weights) {
  return NegLogLikelihood(scene, kappa.grid(), data, weights)(kappa);
}

} // namespace lensforge
