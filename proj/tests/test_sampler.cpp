#include <gtest/gtest.h>

#include <mutex>

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>

#include "lensforge/sampler.hpp"
#include "support.hpp"

using namespace lensforge;

namespace {

const AngularGrid kSmall = make_grid(16, 16.0);

// Dense stationary covariance written as an explicit cosine sum over all modes.
Eigen::MatrixXd dense_covariance(const GrfPrior &p, std::size_t n) {
  const std::size_t N = n * n;
  std::vector<double> lag(N, 0.0); // C as a function of (dr, dc) mod n
  for (std::size_t dr = 0; dr < n; ++dr)
    for (std::size_t dc = 0; dc < n; ++dc) {
      double s = 0.0;
      for (long fy = -static_cast<long>(n) / 2; fy < static_cast<long>(n) / 2; ++fy)
        for (long fx = -static_cast<long>(n) / 2; fx < static_cast<long>(n) / 2; ++fx) {
          const double k2 = static_cast<double>(fx * fx + fy * fy);
          const double S = k2 == 0.0 ? p.amplitude() : p.amplitude() * std::pow(k2, 0.5 * p.power_slope());
          s += S * std::cos(2.0 * M_PI * static_cast<double>(fy * static_cast<long>(dr) + fx * static_cast<long>(dc)) /
                            static_cast<double>(n));
        }
      lag[dr * n + dc] = s / static_cast<double>(N);
    }
  Eigen::MatrixXd C(N, N);
  for (std::size_t a = 0; a < N; ++a)
    for (std::size_t b = 0; b < N; ++b) {
      const std::size_t dr = (a / n + n - b / n) % n, dc = (a % n + n - b % n) % n;
      C(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = lag[dr * n + dc];
    }
  return C;
}

Eigen::VectorXd as_vec(const ScalarField &f) {
  return Eigen::Map<const Eigen::VectorXd>(f.data().data(), static_cast<Eigen::Index>(f.size()));
}

// Shapiro-Wilk W and its p-value (Royston's approximation, n >= 12).
double shapiro_wilk_p(std::vector<double> x) {
  const std::size_t n = x.size();
  std::sort(x.begin(), x.end());
  boost::math::normal nd;
  std::vector<double> m(n);
  double mm = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = boost::math::quantile(nd, (static_cast<double>(i + 1) - 0.375) / (static_cast<double>(n) + 0.25));
    mm += m[i] * m[i];
  }
  const double u = 1.0 / std::sqrt(static_cast<double>(n));
  const double an = -2.706056 * std::pow(u, 5) + 4.434685 * std::pow(u, 4) - 2.071190 * std::pow(u, 3) -
                    0.147981 * u * u + 0.221157 * u + m[n - 1] / std::sqrt(mm);
  const double an1 = -3.582633 * std::pow(u, 5) + 5.682633 * std::pow(u, 4) - 1.752461 * std::pow(u, 3) -
                     0.293762 * u * u + 0.042981 * u + m[n - 2] / std::sqrt(mm);
  const double phi = (mm - 2 * m[n - 1] * m[n - 1] - 2 * m[n - 2] * m[n - 2]) / (1 - 2 * an * an - 2 * an1 * an1);
  std::vector<double> a(n);
  for (std::size_t i = 2; i + 2 < n; ++i) a[i] = m[i] / std::sqrt(phi);
  a[n - 1] = an;
  a[n - 2] = an1;
  a[0] = -an;
  a[1] = -an1;
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    num += a[i] * x[i];
    den += (x[i] - mean) * (x[i] - mean);
  }
  const double w = num * num / den;
  const double L = std::log(static_cast<double>(n));
  const double mu = 0.0038915 * L * L * L - 0.083751 * L * L - 0.31082 * L - 1.5861;
  const double sg = std::exp(0.0030302 * L * L - 0.082676 * L - 0.4803);
  return boost::math::cdf(boost::math::complement(nd, (std::log(1.0 - w) - mu) / sg));
}

SamplerConfig prior_test_config(std::size_t samples, std::uint64_t seed) {
  SamplerConfig cfg;
  // Small steps keep the unadjusted-Langevin variance bias well under the
  // spectral tolerance; more inner steps restore mixing of the large scales.
  cfg.inner_lr = 1e-3;
  cfg.inner_steps = 1000;
  cfg.tau = 1.0;
  cfg.n_samples = samples;
  cfg.seed = seed;
  return cfg;
}

} // namespace

TEST(Normalize, RoundTripAndMonotone) {
  Normalization n;
  for (double k = 1e-5; k <= 5.0; k *= 1.37) EXPECT_NEAR(n.inverse(n.forward(k)), k, 1e-6 * k);
  EXPECT_TRUE(std::isfinite(n.forward(0.0)));
  EXPECT_EQ(n.forward(0.0), 0.0);
  double prev = -1.0;
  for (double k = 0.0; k < 9.0; k += 0.01) {
    EXPECT_GT(n.forward(k), prev);
    prev = n.forward(k);
  }
  EXPECT_EQ(n.forward(100.0), 1.0);
  EXPECT_GE(n.inverse(-3.0), 0.0);
}

TEST(GrfPrior, ZeroAndLinearity) {
  GrfPrior p(-2.0, 4.0);
  ScalarField zero(kSmall);
  const auto s0 = p.score(zero, 0.3);
  for (double v : s0.values()) EXPECT_EQ(v, 0.0);
  const auto x = lftest::random_field(kSmall, 4);
  auto ax = x;
  for (auto &v : ax.values()) v *= -2.5;
  const auto s = p.score(x, 0.3), sa = p.score(ax, 0.3);
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(sa[i], -2.5 * s[i], 1e-12 * (1.0 + std::abs(sa[i])));
}

TEST(GrfPrior, ScoreMatchesConjugateConditional) {
  GrfPrior p(-2.0, 4.0);
  const Eigen::MatrixXd C = dense_covariance(p, 16);
  const auto x = lftest::random_field(kSmall, 9);
  const Eigen::VectorXd xt = as_vec(x);
  for (double sigma : {0.05, 0.7, 10.0}) {
    const Eigen::MatrixXd A = C + sigma * sigma * Eigen::MatrixXd::Identity(C.rows(), C.cols());
    const Eigen::VectorXd e0 = C * A.ldlt().solve(xt); // E[x0 | x_t]
    const Eigen::VectorXd ref = (e0 - xt) / (sigma * sigma);
    const Eigen::VectorXd got = as_vec(p.score(x, sigma));
    EXPECT_LT((got - ref).norm() / ref.norm(), 1e-8) << "sigma " << sigma;
  }
}

TEST(GrfPrior, RejectsNonNegativeSlope) {
  EXPECT_THROW(GrfPrior(0.0, 1.0), InvalidArgument);
  EXPECT_THROW(GrfPrior(1.5, 1.0), InvalidArgument);
  EXPECT_THROW(GrfPrior(-2.0, 0.0), InvalidArgument);
}

TEST(PosteriorStats, Definitions) {
  const auto a = lftest::random_field(kSmall, 1), b = lftest::random_field(kSmall, 2);
  const auto [m2, s2] = posterior_stats({a, b});
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(m2[i], (a[i] + b[i]) / 2.0);
  const auto [m1, s1] = posterior_stats({a, a, a});
  for (double v : s1.values()) EXPECT_EQ(v, 0.0);

  std::vector<ScalarField> many;
  for (std::uint64_t s = 0; s < 13; ++s) many.push_back(lftest::random_field(kSmall, 100 + s, 3.0));
  const auto [m, sd] = posterior_stats(many);
  for (std::size_t i = 0; i < a.size(); ++i) {
    // Welford's streaming update as an independent route
    double mean = 0.0, m2acc = 0.0;
    for (std::size_t k = 0; k < many.size(); ++k) {
      const double d = many[k][i] - mean;
      mean += d / static_cast<double>(k + 1);
      m2acc += d * (many[k][i] - mean);
    }
    EXPECT_NEAR(m[i], mean, 1e-12);
    EXPECT_NEAR(sd[i], std::sqrt(m2acc / static_cast<double>(many.size())), 1e-12);
  }
}

TEST(Schedule, GeometricEndpoints) {
  NoiseSchedule s;
  EXPECT_EQ(s.sigma(0), 10.0);
  EXPECT_EQ(s.sigma(29), 1e-3);
  for (std::size_t i = 1; i + 1 < s.steps; ++i)
    EXPECT_NEAR(s.sigma(i) / s.sigma(i - 1), s.sigma(i + 1) / s.sigma(i), 1e-12);
  EXPECT_THROW((NoiseSchedule{1.0, 1.0, 10}.validate()), InvalidArgument);
  EXPECT_THROW((NoiseSchedule{1.0, 0.1, 1}.validate()), InvalidArgument);
}

TEST(Daps, ConjugateGaussianPosteriorMean) {
  GrfPrior p(-2.0, 4.0);
  const double noise2 = 0.01;
  Rng rng(3, {0});
  const auto truth = p.sample(kSmall, rng);
  ScalarField y = truth;
  for (auto &v : y.values()) v += std::sqrt(noise2) * rng.normal();

  SamplerConfig cfg = prior_test_config(50, 11);
  // exp(-nll / (2 tau^2)) equals the Gaussian observation likelihood
  const double w = cfg.tau * cfg.tau / noise2;
  NormalizedObjective nll = [&](const ScalarField &x) {
    LossResult r{0.0, ScalarField(x.grid())};
    for (std::size_t i = 0; i < x.size(); ++i) {
      r.value += w * (x[i] - y[i]) * (x[i] - y[i]);
      r.gradient[i] = 2.0 * w * (x[i] - y[i]);
    }
    return r;
  };
  const auto res = daps_sample(p, nll, cfg, kSmall);

  const Eigen::MatrixXd C = dense_covariance(p, 16);
  const Eigen::MatrixXd A = C + noise2 * Eigen::MatrixXd::Identity(C.rows(), C.cols());
  const Eigen::VectorXd post = C * A.ldlt().solve(as_vec(y));
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(post.size());
  for (const auto &s : res.normalized_samples) mean += as_vec(s);
  mean /= static_cast<double>(res.normalized_samples.size());
  const double rel = (mean - post).norm() / post.norm();
  // Monte Carlo floor: trace of the posterior covariance over the sample count
  const Eigen::MatrixXd cov = C - C * A.ldlt().solve(C);
  const double floor = std::sqrt(cov.trace() / 50.0) / post.norm();
  RecordProperty("relative_l2", std::to_string(rel));
  RecordProperty("monte_carlo_floor", std::to_string(floor));
  EXPECT_LT(rel, 0.05);
}

TEST(Daps, PriorOnlySpectrumMatchesTarget) {
  GrfPrior p(-2.0, 4.0);
  const auto cfg = prior_test_config(100, 5);
  const auto res = daps_sample(p, {}, cfg, kSmall);
  const std::size_t n = 16, h = n / 2 + 1;
  std::vector<double> ratio(n, 0.0), count(n, 0.0);
  for (const auto &x : res.normalized_samples) {
    std::vector<fft::Complex> spec(fft::half_spectrum_size(n));
    fft::forward(n, x.data(), spec);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < h; ++c) {
        const long fy = fft::frequency(r, n), fx = static_cast<long>(c);
        const double k = std::sqrt(static_cast<double>(fx * fx + fy * fy));
        const auto bin = static_cast<std::size_t>(std::lround(k));
        if (bin == 0 || bin > n / 2) continue;
        ratio[bin] += std::norm(spec[r * h + c]) / static_cast<double>(n * n) / p.spectrum(fx, fy);
        count[bin] += 1.0;
      }
  }
  for (std::size_t b = 1; b <= n / 2; ++b) {
    const double r = ratio[b] / count[b];
    EXPECT_NEAR(r, 1.0, 0.1) << "radial bin " << b;
  }
}

TEST(Daps, RenoiseDispersionTracksSchedule) {
  GrfPrior p(-2.0, 4.0);
  auto cfg = prior_test_config(20, 8);
  std::mutex mu;
  std::vector<std::pair<double, double>> pts; // (sigma, rms of x_next - x0)
  const StepObserver obs = [&](const StepRecord &r) {
    if (!r.x_next) return;
    double s = 0.0;
    for (std::size_t i = 0; i < r.x0->size(); ++i) s += std::pow((*r.x_next)[i] - (*r.x0)[i], 2);
    std::lock_guard lock(mu);
    pts.push_back({r.next_sigma, std::sqrt(s / static_cast<double>(r.x0->size()))});
  };
  daps_sample(p, {}, cfg, kSmall, nullptr, obs);
  double sxy = 0.0, sxx = 0.0;
  for (auto [x, y] : pts) {
    sxy += x * y;
    sxx += x * x;
  }
  EXPECT_NEAR(sxy / sxx, 1.0, 0.05);
}

TEST(Daps, PriorOnlyOutputsAreNormal) {
  GrfPrior p(-2.0, 4.0);
  const auto res = daps_sample(p, {}, prior_test_config(100, 21), kSmall);
  Rng rng(77, {0});
  for (int k = 0; k < 8; ++k) {
    const auto pix = static_cast<std::size_t>(rng.uniform(0.0, 256.0));
    std::vector<double> v;
    for (const auto &s : res.normalized_samples) v.push_back(s[pix]);
    EXPECT_GT(shapiro_wilk_p(v), 0.01) << "pixel " << pix;
  }
}

TEST(Daps, BitStableAcrossThreadCounts) {
  GrfPrior p(-2.0, 4.0, 0.5);
  const auto cfg = prior_test_config(6, 99);
  set_thread_count(1);
  const auto a = daps_sample(p, {}, cfg, kSmall);
  set_thread_count(4);
  const auto b = daps_sample(p, {}, cfg, kSmall);
  set_thread_count(0);
  for (std::size_t s = 0; s < a.samples.size(); ++s)
    EXPECT_EQ(digest_of(a.samples[s].values()), digest_of(b.samples[s].values()));
  for (const auto &s : a.samples)
    for (double v : s.values()) EXPECT_GE(v, 0.0);
}

TEST(Daps, NonFiniteLikelihoodDiverges) {
  GrfPrior p(-2.0, 4.0);
  auto cfg = prior_test_config(1, 1);
  NormalizedObjective bad = [](const ScalarField &x) {
    return LossResult{std::nan(""), ScalarField(x.grid())};
  };
  try {
    daps_sample(p, bad, cfg, kSmall);
    FAIL() << "expected DivergedError";
  } catch (const DivergedError &e) {
    EXPECT_EQ(e.step(), 0u);
  }
}

TEST(GrfFit, RecoversPowerLawFromDraws) {
  const GrfPrior truth(-3.0, 2.0, 0.5);
  const auto g = make_grid(64, 64.0);
  Rng rng(77, {1});
  std::vector<ScalarField> maps;
  for (int i = 0; i < 40; ++i) maps.push_back(truth.sample(g, rng));
  const auto fit = fit_grf(maps);
  EXPECT_NEAR(fit.power_slope(), -3.0, 0.1);
  EXPECT_NEAR(std::log(fit.amplitude()), std::log(2.0), 0.2);
  EXPECT_NEAR(fit.mean(), 0.5, 0.05);
  EXPECT_THROW(fit_grf({}), InvalidArgument);
}
