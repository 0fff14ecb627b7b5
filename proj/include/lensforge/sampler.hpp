#pragma once

// Decoupled annealing posterior sampling over normalized convergence maps with
// a pluggable score prior.

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lensforge/fft.hpp"
#include "lensforge/hash.hpp"
#include "lensforge/likelihood.hpp"
#include "lensforge/normalize.hpp"
#include "lensforge/parallel.hpp"
#include "lensforge/random.hpp"

namespace lensforge {

/// Score of the noise-smoothed prior, grad_x log p_sigma(x | conditioning).
/// Implementations must be safe to call concurrently.
class ScorePrior {
public:
  virtual ~ScorePrior() = default;
  virtual ScalarField score(const ScalarField &x, double sigma,
                            const PhotometryStack *conditioning) const = 0;
  virtual nlohmann::json describe() const = 0;
  /// Upper bound on the largest eigenvalue of -d(score)/dx at this noise
  /// level. 1/sigma^2 holds for any prior smoothed by N(0, sigma^2).
  virtual double curvature_bound(double sigma, const AngularGrid &) const {
    return 1.0 / (sigma * sigma);
  }
};

/// Stationary Gaussian random field with spectral density
/// S(k) = amplitude * |k|^slope, |k| in cycles per field; the DC mode uses |k| = 1.
class GrfPrior final : public ScorePrior {
public:
  GrfPrior(double power_slope, double amplitude, double mean = 0.0)
      : slope_(power_slope), amplitude_(amplitude), mean_(mean) {
    if (!(power_slope < 0.0) || !std::isfinite(power_slope))
      throw InvalidArgument("GRF power slope must be negative");
    if (!(amplitude > 0.0) || !std::isfinite(amplitude))
      throw InvalidArgument("GRF amplitude must be positive");
    if (!std::isfinite(mean)) throw InvalidArgument("GRF mean must be finite");
  }

  double power_slope() const noexcept { return slope_; }
  double amplitude() const noexcept { return amplitude_; }
  double mean() const noexcept { return mean_; }

  double spectrum(long fx, long fy) const {
    const double k2 = static_cast<double>(fx * fx + fy * fy);
    return k2 == 0.0 ? amplitude_ : amplitude_ * std::pow(k2, 0.5 * slope_);
  }

  ScalarField score(const ScalarField &x, double sigma,
                    const PhotometryStack * = nullptr) const override {
    if (!(sigma >= 0.0)) throw InvalidArgument("noise level must be non-negative");
    const double s2 = sigma * sigma;
    return filter(x, true, [&](double s) { return -1.0 / (s + s2); });
  }

  /// Prior draw using `rng` for white noise.
  ScalarField sample(const AngularGrid &g, Rng &rng) const {
    ScalarField w(g);
    for (auto &v : w.values()) v = rng.normal();
    auto out = filter(w, false, [](double s) { return std::sqrt(s); });
    for (auto &v : out.values()) v += mean_;
    return out;
  }

  double curvature_bound(double sigma, const AngularGrid &g) const override {
    const auto &t = spectrum_table(g.n_pix());
    return 1.0 / (*std::min_element(t.begin(), t.end()) + sigma * sigma);
  }

  nlohmann::json describe() const override {
    return {{"kind", "grf"}, {"power_slope", slope_}, {"amplitude", amplitude_}, {"mean", mean_}};
  }

private:
  template <class Gain>
  ScalarField filter(const ScalarField &x, bool centre, Gain gain) const {
    const std::size_t n = x.n_pix();
    std::vector<double> in(x.data());
    if (centre)
      for (auto &v : in) v -= mean_;
    std::vector<fft::Complex> spec(fft::half_spectrum_size(n));
    fft::forward(n, in, spec);
    const auto &table = spectrum_table(n);
    for (std::size_t i = 0; i < spec.size(); ++i) spec[i] *= gain(table[i]);
    ScalarField out(x.grid());
    fft::backward(n, spec, out.values());
    const double inv = 1.0 / static_cast<double>(n * n);
    for (auto &v : out.values()) v *= inv;
    return out;
  }

  /// S(k) over the half-spectrum layout, built once per grid size.
  const std::vector<double> &spectrum_table(std::size_t n) const {
    std::lock_guard lock(table_mutex_);
    auto &t = tables_[n];
    if (!t) {
      auto v = std::make_shared<std::vector<double>>(fft::half_spectrum_size(n));
      const std::size_t h = n / 2 + 1;
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < h; ++c)
          (*v)[r * h + c] = spectrum(fft::frequency(r, n), static_cast<long>(c));
      t = std::move(v);
    }
    return *t;
  }

  double slope_, amplitude_, mean_;
  mutable std::mutex table_mutex_;
  mutable std::map<std::size_t, std::shared_ptr<const std::vector<double>>> tables_;
};

/// Least-squares power-law fit to the radially binned periodogram
/// |DFT(x - mean)|^2 / n^2 of a set of normalized maps, bins |k| = 1..n/2 - 1.
inline GrfPrior fit_grf(const std::vector<ScalarField> &maps) {
  if (maps.empty()) throw InvalidArgument("fit_grf needs at least one map");
  const std::size_t n = maps.front().n_pix(), h = n / 2 + 1;
  if (n < 8) throw InvalidArgument("fit_grf needs maps of at least 8 pixels");
  std::vector<double> power(n / 2, 0.0), weight(n / 2, 0.0);
  double mean = 0.0;
  for (const auto &m : maps) {
    if (m.n_pix() != n) throw InvalidArgument("fit_grf maps must share a size");
    const double mu = m.mean();
    mean += mu;
    std::vector<double> in(m.data());
    for (auto &v : in) v -= mu;
    std::vector<fft::Complex> spec(fft::half_spectrum_size(n));
    fft::forward(n, in, spec);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < h; ++c) {
        const long fx = fft::frequency(r, n);
        const auto b = static_cast<std::size_t>(std::lround(std::hypot(double(fx), double(c))));
        if (b < 1 || b >= n / 2) continue;
        const double w = (c == 0 || c == n / 2) ? 1.0 : 2.0; // mirrored half of the spectrum
        power[b] += w * std::norm(spec[r * h + c]) / static_cast<double>(n * n);
        weight[b] += w;
      }
  }
  mean /= static_cast<double>(maps.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0, np = 0;
  for (std::size_t b = 1; b < n / 2; ++b) {
    const double p = power[b] / weight[b];
    if (!(p > 0.0)) throw NumericError("fit_grf: empty power in a radial bin");
    const double lx = std::log(double(b)), ly = std::log(p);
    sx += lx, sy += ly, sxx += lx * lx, sxy += lx * ly, np += 1;
  }
  const double slope = (np * sxy - sx * sy) / (np * sxx - sx * sx);
  return GrfPrior(slope, std::exp((sy - slope * sx) / np), mean);
}

/// GRF fitted with fit_grf to normalized convergence of validation mocks
/// (make_mock_cluster seeds 100..105, default options).
inline GrfPrior default_grf_prior() { return GrfPrior(-3.7051, 0.812837, 0.735936); }

struct NoiseSchedule {
  double sigma_max = 10.0;
  double sigma_min = 1e-3;
  std::size_t steps = 30;

  void validate() const {
    if (!(sigma_max > sigma_min) || !(sigma_min > 0.0) || !std::isfinite(sigma_max))
      throw InvalidArgument("noise schedule needs sigma_max > sigma_min > 0");
    if (steps < 2) throw InvalidArgument("noise schedule needs at least 2 steps");
  }
  /// Geometric interpolation from sigma_max (i = 0) to sigma_min (i = steps - 1).
  double sigma(std::size_t i) const {
    if (i == 0) return sigma_max;
    if (i + 1 == steps) return sigma_min;
    const double t = static_cast<double>(i) / static_cast<double>(steps - 1);
    return sigma_max * std::pow(sigma_min / sigma_max, t);
  }
};

/// How step 1 models p(x0 | x_t).
enum class Coupling {
  exact_score,       ///< prior score at sigma_min plus the Gaussian forward kernel
  gaussian_denoiser, ///< N(denoiser(x_t), sigma_t^2)
};

struct SamplerConfig {
  NoiseSchedule schedule{};
  std::size_t inner_steps = 100;
  double inner_lr = 2.8e-6;
  double tau = 2.6e-3;
  std::size_t n_samples = 20;
  std::uint64_t seed = 0;
  Coupling coupling = Coupling::exact_score;

  void validate() const {
    schedule.validate();
    if (inner_steps == 0) throw InvalidArgument("inner_steps must be positive");
    if (!(inner_lr > 0.0) || !std::isfinite(inner_lr)) throw InvalidArgument("inner_lr must be positive");
    if (!(tau > 0.0) || !std::isfinite(tau)) throw InvalidArgument("tau must be positive");
    if (n_samples == 0) throw InvalidArgument("n_samples must be positive");
  }

  nlohmann::json to_json() const {
    return {{"sigma_max", schedule.sigma_max},
            {"sigma_min", schedule.sigma_min},
            {"steps", schedule.steps},
            {"inner_steps", inner_steps},
            {"inner_lr", inner_lr},
            {"tau", tau},
            {"n_samples", n_samples},
            {"seed", seed},
            {"coupling", coupling == Coupling::exact_score ? "exact_score" : "gaussian_denoiser"}};
  }
};

/// Likelihood in normalized coordinates: value and gradient with respect to x.
using NormalizedObjective = std::function<LossResult(const ScalarField &)>;

/// Wraps a physical-space likelihood so it acts on normalized maps.
inline NormalizedObjective normalized_objective(std::shared_ptr<const NegLogLikelihood> nll,
                                                Normalization norm = {}) {
  return [nll = std::move(nll), norm](const ScalarField &x) {
    ScalarField k(x.grid(), Quantity::convergence);
    for (std::size_t i = 0; i < k.size(); ++i) k[i] = norm.inverse_unclamped(x[i]);
    auto r = (*nll)(k);
    for (std::size_t i = 0; i < k.size(); ++i) r.gradient[i] *= norm.derivative(x[i]);
    return r;
  };
}

/// One outer step of one chain, reported after re-noising.
struct StepRecord {
  std::size_t sample = 0;
  std::size_t step = 0;
  double sigma = 0.0;      ///< noise level of this step
  double next_sigma = 0.0; ///< level used for re-noising; 0 on the final step
  const ScalarField *x0 = nullptr;
  const ScalarField *x_next = nullptr; ///< null on the final step
};
/// Called concurrently from chains; must be thread-safe.
using StepObserver = std::function<void(const StepRecord &)>;

struct ReconstructionResult {
  std::vector<ScalarField> samples; ///< physical convergence
  ScalarField mean;
  ScalarField std;
  std::vector<ScalarField> normalized_samples;
  nlohmann::json manifest;
};

/// Per-pixel mean and uncorrected standard deviation.
inline std::pair<ScalarField, ScalarField> posterior_stats(const std::vector<ScalarField> &samples) {
  if (samples.empty()) throw InvalidArgument("posterior_stats needs at least one sample");
  const auto &g = samples.front().grid();
  ScalarField mean(g, samples.front().quantity()), sd(g, samples.front().quantity());
  const double n = static_cast<double>(samples.size());
  for (const auto &s : samples) {
    if (!(s.grid() == g)) throw InvalidArgument("posterior samples have mismatched grids");
    for (std::size_t i = 0; i < s.size(); ++i) mean[i] += s[i];
  }
  for (auto &v : mean.values()) v /= n;
  // Spread is taken about the first sample so identical samples give exactly zero.
  const auto &ref = samples.front();
  for (std::size_t i = 0; i < ref.size(); ++i) {
    double shift = 0.0;
    for (const auto &s : samples) shift += s[i] - ref[i];
    shift /= n;
    double acc = 0.0;
    for (const auto &s : samples) acc += (s[i] - ref[i] - shift) * (s[i] - ref[i] - shift);
    sd[i] = std::sqrt(acc / n);
  }
  return {std::move(mean), std::move(sd)};
}

namespace detail {

inline void check_state(const ScalarField &x, double sigma, std::size_t step, const char *what) {
  const double bound = 10.0 * std::max(1.0, sigma);
  for (double v : x.values())
    if (!std::isfinite(v) || std::abs(v) > bound)
      throw DivergedError(std::string("sampler diverged: ") + what, step, digest_of(x.values()));
}

inline void add_noise(ScalarField &x, double scale, Rng &rng) {
  for (auto &v : x.values()) v += scale * rng.normal();
}

inline constexpr std::uint64_t kInitStream = 0x696e6974;  // start state
inline constexpr std::uint64_t kRenoiseStream = 0x6e6f6973; // step-2 noise
inline constexpr std::uint64_t kInnerStream = 0x6c616e67;  // Langevin noise

} // namespace detail

/// One posterior chain. Exposed for tests and for callers that manage chains.
inline ScalarField daps_chain(const ScorePrior &prior, const NormalizedObjective &nll,
                              const SamplerConfig &cfg, const AngularGrid &grid,
                              const PhotometryStack *conditioning, std::size_t sample_index,
                              const ScalarField *init_mean = nullptr,
                              const StepObserver &observer = {}) {
  const auto &sch = cfg.schedule;
  const double lik_scale = 1.0 / (2.0 * cfg.tau * cfg.tau);
  const double s_clean = sch.sigma_min;
  const double prior_curv = prior.curvature_bound(s_clean, grid);

  ScalarField x(grid);
  {
    Rng rng(cfg.seed, {sample_index, detail::kInitStream});
    if (init_mean) x = *init_mean;
    detail::add_noise(x, sch.sigma_max, rng);
  }
  ScalarField x0(grid);
  for (std::size_t i = 0; i < sch.steps; ++i) {
    const double sigma = sch.sigma(i);
    const double s2 = sigma * sigma;
    // Half the inverse curvature of the prior coupling keeps the step stable.
    const double coupling_curv =
        cfg.coupling == Coupling::exact_score ? 1.0 / s2 + prior_curv : 1.0 / s2;
    const double eta = std::min(cfg.inner_lr, 0.5 / coupling_curv);
    const double kick = std::sqrt(2.0 * eta);

    // Step 1: Langevin on log p(x0 | x_t) + log p(y | x0), started at the denoiser.
    const auto sx = prior.score(x, sigma, conditioning);
    ScalarField xhat(grid);
    for (std::size_t p = 0; p < x.size(); ++p) xhat[p] = x[p] + s2 * sx[p];
    detail::check_state(xhat, sigma, i, "non-finite or runaway denoiser output");
    x0 = xhat;
    for (std::size_t j = 0; j < cfg.inner_steps; ++j) {
      ScalarField drift(grid);
      if (cfg.coupling == Coupling::exact_score) {
        const auto sp = prior.score(x0, s_clean, conditioning);
        for (std::size_t p = 0; p < x0.size(); ++p) drift[p] = sp[p] + (x[p] - x0[p]) / s2;
      } else {
        for (std::size_t p = 0; p < x0.size(); ++p) drift[p] = (xhat[p] - x0[p]) / s2;
      }
      if (nll) {
        const auto l = nll(x0);
        if (!std::isfinite(l.value))
          throw DivergedError("sampler diverged: non-finite likelihood", i, digest_of(x0.values()));
        for (std::size_t p = 0; p < x0.size(); ++p) drift[p] -= lik_scale * l.gradient[p];
      }
      Rng rng(cfg.seed, {sample_index, detail::kInnerStream, i, j});
      for (std::size_t p = 0; p < x0.size(); ++p) x0[p] += eta * drift[p] + kick * rng.normal();
      detail::check_state(x0, sigma, i, "non-finite or runaway state");
    }

    // Step 2: re-noise at the next level.
    if (i + 1 < sch.steps) {
      const double next = sch.sigma(i + 1);
      x = x0;
      Rng rng(cfg.seed, {sample_index, detail::kRenoiseStream, i});
      detail::add_noise(x, next, rng);
      if (observer) observer({sample_index, i, sigma, next, &x0, &x});
    } else if (observer) {
      observer({sample_index, i, sigma, 0.0, &x0, nullptr});
    }
  }
  return x0;
}

/// Runs cfg.n_samples independent chains in parallel.
inline ReconstructionResult daps_sample(const ScorePrior &prior, const NormalizedObjective &nll,
                                        const SamplerConfig &cfg, const AngularGrid &grid,
                                        const PhotometryStack *conditioning = nullptr,
                                        const StepObserver &observer = {},
                                        const Normalization &norm = {},
                                        const ScalarField *init_mean = nullptr) {
  cfg.validate();
  if (init_mean && !(init_mean->grid() == grid)) throw InvalidArgument("initial map grid mismatch");
  std::vector<ScalarField> xs(cfg.n_samples);
  parallel_for(cfg.n_samples, [&](std::size_t s) {
    xs[s] = daps_chain(prior, nll, cfg, grid, conditioning, s, init_mean, observer);
  });
  ReconstructionResult out;
  for (const auto &x : xs) out.samples.push_back(denormalize(x, norm));
  auto [mean, sd] = posterior_stats(out.samples);
  out.mean = std::move(mean);
  out.std = std::move(sd);
  out.normalized_samples = std::move(xs);
  out.manifest = {{"sampler", cfg.to_json()},
                  {"prior", prior.describe()},
                  {"likelihood", static_cast<bool>(nll)},
                  {"normalization", {{"epsilon", norm.epsilon}, {"lo", norm.lo}, {"hi", norm.hi}}}};
  return out;
}

} // namespace lensforge
