// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lensforge/lensforge.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace lensforge;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char *f, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------

// Pairwise sum over all source pixels, written from the continuum kernels with
// offsets taken from pixel centre positions.
void direct_fields(const ScalarField &k, std::vector<double> &a1, std::vector<double> &a2,
                   std::vector<double> &g1, std::vector<double> &g2) {
  const auto &g = k.grid();
  const std::size_t n = g.n_pix(), N = g.size();
  const double area = g.pixel_area();
  a1.assign(N, 0.0), a2.assign(N, 0.0), g1.assign(N, 0.0), g2.assign(N, 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    const Vec2 t = g.position(i / n, i % n);
    for (std::size_t j = 0; j < N; ++j) {
      if (i == j) continue;
      const Vec2 d = t - g.position(j / n, j % n);
      const double r2 = d.x * d.x + d.y * d.y, w = k[j] * area / M_PI;
      a1[i] += w * d.x / r2;
      a2[i] += w * d.y / r2;
      g1[i] -= w * (d.x * d.x - d.y * d.y) / (r2 * r2);
      g2[i] -= w * 2.0 * d.x * d.y / (r2 * r2);
    }
  }
}

Outcome operator_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto g = make_grid(32, 16.0);
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto k = lftest::random_field(g, 1000 + s);
    const auto alpha = deflection_from_kappa(k), gamma = shear_from_kappa(k);
    std::vector<double> a1, a2, g1, g2;
    direct_fields(k, a1, a2, g1, g2);
    worst = std::max({worst, lftest::interior_rel_err(g, alpha.c1(), a1, 3),
                      lftest::interior_rel_err(g, alpha.c2(), a2, 3),
                      lftest::interior_rel_err(g, gamma.c1(), g1, 3),
                      lftest::interior_rel_err(g, gamma.c2(), g2, 3)});
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-6 && secs < 30.0, fmt("max interior rel err %.3g, %.1f s", worst, secs)};
}

// ---------------------------------------------------------------------------

double nearest(const std::vector<Vec2> &found, Vec2 e) {
  double best = 1e300;
  for (const Vec2 f : found) best = std::min(best, (f - e).norm());
  return best;
}

Outcome analytic_lenses() {
  const auto g = make_grid(256, 100.0);
  const AnalyticLens sis{LensKind::sis, 8.0, {}};
  const auto a = deflection_from_kappa(analytic_kappa(sis, g));
  const double rmax = 0.5 * g.fov();
  double defl = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double r = g.position(i / 256, i % 256).norm();
    if (r < 0.1 * rmax || r > 0.4 * rmax) continue;
    defl = std::max(defl, std::abs(a.at(i).norm() - sis.einstein_radius) / sis.einstein_radius);
  }

  LensScene scene;
  double worst_px = 0.0;
  for (int c = 0; c < 20; ++c) {
    Rng rng(31, {static_cast<std::uint64_t>(c)});
    const bool point = c % 2 == 1;
    const double te = point ? rng.uniform(6.0, 12.0) : rng.uniform(8.0, 14.0);
    const double b = (point ? rng.uniform(0.1, 0.6) : rng.uniform(0.1, 0.5)) * te;
    const double phi = rng.uniform(0.0, 2.0 * M_PI);
    const Vec2 u{std::cos(phi), std::sin(phi)};
    const auto k = analytic_kappa(AnalyticLens{point ? LensKind::point_mass : LensKind::sis, te, {}}, g);
    std::vector<Vec2> expected;
    if (point) {
      const double root = std::sqrt(b * b + 4.0 * te * te);
      expected = {u * (0.5 * (b + root)), u * (0.5 * (b - root))};
    } else {
      expected = {u * (te + b), u * (b - te)};
    }
    const auto found = find_images(k, scene, scene.z_ref, u * b);
    for (const Vec2 e : expected) worst_px = std::max(worst_px, nearest(found, e) / g.pixel_scale());
  }
  return {defl < 0.02 && worst_px <= 0.5,
          fmt("SIS annulus deflection err %.3g%%, worst image offset %.3f px over 20 cases", 100.0 * defl, worst_px)};
}

// ---------------------------------------------------------------------------

Outcome kaiser_squires() {
  const auto g = make_grid(256, 100.0);
  const auto k = lftest::smooth_field(g, 11, 10);
  const auto khat = ks_invert(shear_from_kappa(k));
  std::vector<double> target(k.data());
  const double m = k.mean();
  for (auto &v : target) v -= m;
  const double err = lftest::interior_rel_err(g, khat.data(), target, 26);
  return {err <= 1e-3, fmt("interior rel err %.3g", err)};
}

// ---------------------------------------------------------------------------

const AngularGrid kGradGrid = make_grid(32, 16.0);

struct Instance {
  ScalarField x, kappa;
  std::vector<StrongLensSystem> systems;
  PhotometryStack photometry;
  WeakCatalog weak;
};

Instance gradient_instance(std::uint64_t seed) {
  Rng rng(seed, {0xacc});
  Normalization norm;
  Instance in;
  in.x = ScalarField(kGradGrid);
  in.kappa = ScalarField(kGradGrid, Quantity::convergence);
  for (std::size_t i = 0; i < kGradGrid.size(); ++i) {
    in.x[i] = rng.uniform(0.7, 0.85);
    in.kappa[i] = norm.inverse_unclamped(in.x[i]);
  }
  const double half = 0.4 * kGradGrid.fov();
  for (std::size_t s = 0; s < 4; ++s) {
    StrongLensSystem sys;
    sys.source_id = s;
    sys.z_s = rng.uniform(1.0, 3.0);
    for (std::size_t j = 0; j < 2 + s % 3; ++j) sys.images.push_back({rng.uniform(-half, half), rng.uniform(-half, half)});
    sys.source.r_e = rng.uniform(3.0, 6.0);
    sys.source.n = rng.uniform(0.6, 1.0);
    sys.source.e1 = rng.uniform(-0.2, 0.2);
    sys.source.e2 = rng.uniform(-0.2, 0.2);
    sys.source.total_flux = 1.0;
    in.systems.push_back(sys);
  }
  in.photometry = PhotometryStack(kGradGrid);
  for (Band b : kBands) in.photometry.band(b) = lftest::smooth_field(kGradGrid, seed + 7);
  for (auto &v : in.photometry.band(Band::f125).values()) v *= 1e-3;
  in.weak.sigma_w2 = 0.09;
  for (int k = 0; k < 120; ++k)
    in.weak.entries.push_back({{rng.uniform(-8.0, 8.0), rng.uniform(-8.0, 8.0)},
                               {0.3 * rng.normal(), 0.3 * rng.normal()},
                               rng.uniform(0.8, 3.0)});
  return in;
}

// Central differences in normalized units at 10 random pixels.
double worst_fd(const Instance &in, const std::function<LossResult(const ScalarField &)> &loss, std::uint64_t seed) {
  Normalization norm;
  const auto base = loss(in.kappa);
  Rng rng(seed, {0xfd});
  double worst = 0.0;
  const double h = 1e-4;
  for (int p = 0; p < 10; ++p) {
    const auto i = static_cast<std::size_t>(rng.uniform(0.0, static_cast<double>(kGradGrid.size())));
    const double analytic = base.gradient[i] * norm.derivative(in.x[i]);
    auto eval = [&](double dx) {
      ScalarField k = in.kappa;
      k[i] = norm.inverse_unclamped(in.x[i] + dx);
      return loss(k).value;
    };
    const double fd = (eval(h) - eval(-h)) / (2.0 * h);
    const double den = std::max(std::abs(fd), std::abs(analytic));
    worst = std::max(worst, den > 0.0 ? std::abs(fd - analytic) / den : 1.0);
  }
  return worst;
}

Outcome gradient_suite() {
  LensScene scene;
  double geo = 0.0, img = 0.0, weak = 0.0;
  for (std::uint64_t s = 1; s <= 5; ++s) {
    const auto in = gradient_instance(s);
    geo = std::max(geo, worst_fd(in, [&](const ScalarField &k) { return loss_strong_geo(k, scene, in.systems); }, s));
    img = std::max(img, worst_fd(in, [&](const ScalarField &k) {
                     return loss_strong_img(k, scene, in.systems, in.photometry);
                   }, s));
    const WeakTerm term(in.weak, {}, kGradGrid, scene);
    weak = std::max(weak, worst_fd(in, [&](const ScalarField &k) { return loss_weak(k, term); }, s));
  }
  return {geo <= 1e-4 && weak <= 1e-4 && img <= 1e-3,
          fmt("worst rel err geometric %.3g, weak %.3g, photometric %.3g", geo, weak, img)};
}

// ---------------------------------------------------------------------------

const AngularGrid kSmall = make_grid(16, 16.0);

// Stationary covariance of the GRF from an explicit cosine sum over modes.
Eigen::MatrixXd dense_covariance(const GrfPrior &p, long n) {
  const long N = n * n;
  std::vector<double> lag(static_cast<std::size_t>(N), 0.0);
  for (long dr = 0; dr < n; ++dr)
    for (long dc = 0; dc < n; ++dc) {
      double s = 0.0;
      for (long fy = -n / 2; fy < n / 2; ++fy)
        for (long fx = -n / 2; fx < n / 2; ++fx) {
          const double k2 = static_cast<double>(fx * fx + fy * fy);
          const double S = k2 == 0.0 ? p.amplitude() : p.amplitude() * std::pow(k2, 0.5 * p.power_slope());
          s += S * std::cos(2.0 * M_PI * static_cast<double>(fy * dr + fx * dc) / static_cast<double>(n));
        }
      lag[static_cast<std::size_t>(dr * n + dc)] = s / static_cast<double>(N);
    }
  Eigen::MatrixXd C(N, N);
  for (long a = 0; a < N; ++a)
    for (long b = 0; b < N; ++b)
      C(a, b) = lag[static_cast<std::size_t>(((a / n - b / n + n) % n) * n + (a % n - b % n + n) % n)];
  return C;
}

Eigen::VectorXd as_vec(const ScalarField &f) {
  return Eigen::Map<const Eigen::VectorXd>(f.data().data(), static_cast<Eigen::Index>(f.size()));
}

SamplerConfig small_config(std::size_t samples, std::uint64_t seed) {
  SamplerConfig cfg;
  cfg.inner_lr = 1e-3;
  cfg.inner_steps = 1000;
  cfg.tau = 1.0;
  cfg.n_samples = samples;
  cfg.seed = seed;
  return cfg;
}

// Gaussian observation y = x + n with per-pixel noise variance, as an objective
// whose exp(-nll / (2 tau^2)) is the likelihood.
NormalizedObjective gaussian_objective(const ScalarField &y, const std::vector<double> &noise2, double tau) {
  return [&y, &noise2, tau](const ScalarField &x) {
    LossResult r{0.0, ScalarField(x.grid())};
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double w = tau * tau / noise2[i];
      r.value += w * (x[i] - y[i]) * (x[i] - y[i]);
      r.gradient[i] = 2.0 * w * (x[i] - y[i]);
    }
    return r;
  };
}

Outcome sampler_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  GrfPrior p(-2.0, 4.0);
  Rng rng(3, {0});
  const auto truth = p.sample(kSmall, rng);
  ScalarField y = truth;
  const std::vector<double> noise2(kSmall.size(), 0.01);
  for (auto &v : y.values()) v += 0.1 * rng.normal();
  const auto cfg = small_config(50, 11);
  const auto res = daps_sample(p, gaussian_objective(y, noise2, cfg.tau), cfg, kSmall);
  const Eigen::MatrixXd C = dense_covariance(p, 16);
  const Eigen::MatrixXd A = C + 0.01 * Eigen::MatrixXd::Identity(C.rows(), C.cols());
  const Eigen::VectorXd post = C * A.ldlt().solve(as_vec(y));
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(post.size());
  for (const auto &s : res.normalized_samples) mean += as_vec(s);
  mean /= static_cast<double>(res.normalized_samples.size());
  const double rel = (mean - post).norm() / post.norm();

  // Prior-only radial power against the target spectrum.
  const auto prior_run = daps_sample(p, {}, small_config(100, 5), kSmall);
  const std::size_t n = 16, h = n / 2 + 1;
  std::vector<double> ratio(n, 0.0), count(n, 0.0);
  for (const auto &x : prior_run.normalized_samples) {
    std::vector<fft::Complex> spec(fft::half_spectrum_size(n));
    fft::forward(n, x.data(), spec);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < h; ++c) {
        const long fy = fft::frequency(r, n), fx = static_cast<long>(c);
        const auto bin = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(fx * fx + fy * fy))));
        if (bin == 0 || bin > n / 2) continue;
        ratio[bin] += std::norm(spec[r * h + c]) / static_cast<double>(n * n) / p.spectrum(fx, fy);
        count[bin] += 1.0;
      }
  }
  double spec_err = 0.0;
  for (std::size_t b = 1; b <= n / 2; ++b) spec_err = std::max(spec_err, std::abs(ratio[b] / count[b] - 1.0));
  const double secs = seconds_since(t0);
  return {rel < 0.05 && spec_err <= 0.1 && secs < 300.0,
          fmt("posterior mean rel L2 %.4f, worst spectral bin %.1f%%, %.0f s", rel, 100.0 * spec_err, secs)};
}

// ---------------------------------------------------------------------------

Outcome observation_statistics() {
  RedshiftDistribution d;
  Rng rng(2025, {1});
  std::vector<double> z(100000);
  double zmax = 0.0;
  for (auto &v : z) {
    v = d.sample(rng);
    zmax = std::max(zmax, v);
  }
  std::nth_element(z.begin(), z.begin() + 50000, z.end());
  const double med = z[50000];

  LensScene scene;
  const auto g = make_grid(32, 225.0);
  const ScalarField flat(g, Quantity::convergence, 0.01);
  const double lambda = 30.0 * (225.0 / 60.0) * (225.0 / 60.0);
  const auto cat = gen_weak_catalog(flat, scene, 30.0, 0.03, 77);
  const double count = static_cast<double>(cat.entries.size());

  const auto g2 = make_grid(32, 60.0);
  const auto k = lftest::smooth_field(g2, 3);
  const auto gamma = shear_from_kappa(k);
  const double s2 = 0.3;
  const auto noisy = gen_weak_catalog(k, scene, 100000.0, s2, 6);
  double acc = 0.0;
  for (const auto &e : noisy.entries) {
    const Vec2 t = sample(gamma, e.theta) * kappa_rescale(scene, e.z_s);
    acc += std::pow(e.gamma.x - t.x, 2) + std::pow(e.gamma.y - t.y, 2);
  }
  const double var_ratio = acc / (2.0 * static_cast<double>(noisy.entries.size())) / s2;
  const bool ok = std::abs(med - 1.75) <= 0.05 && zmax <= 5.0 && std::abs(count - lambda) <= 3.0 * std::sqrt(lambda) &&
                  std::abs(var_ratio - 1.0) <= 0.02;
  return {ok, fmt("median z %.3f, weak count %.0f vs %.1f, noise variance ratio %.4f", med, count, lambda, var_ratio)};
}

// ---------------------------------------------------------------------------

struct ClusterRun {
  double psnr_prior = 0.0, psnr_data = 0.0, pcc_data = 0.0, mass_light = 0.0;
};

std::vector<ClusterRun> ablation_runs() {
  std::vector<ClusterRun> out;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto m = make_mock_cluster(seed);
    ObservationData data;
    data.systems = gen_strong_systems(m.kappa, m.scene, 5, seed);
    data.weak = gen_weak_catalog(m.kappa, m.scene, 30.0, 0.03, seed);
    LossWeights w;
    w.lambda_w = 1e-6;
    const auto nll = std::make_shared<const NegLogLikelihood>(m.scene, m.grid, data, w);
    SamplerConfig cfg;
    cfg.n_samples = 8;
    cfg.seed = seed;
    const auto prior = default_grf_prior();
    const auto with_data = daps_sample(prior, normalized_objective(nll), cfg, m.grid);
    const auto prior_only = daps_sample(prior, {}, cfg, m.grid);
    ClusterRun r;
    r.psnr_prior = psnr_kappa(prior_only.mean, m.kappa);
    r.psnr_data = psnr_kappa(with_data.mean, m.kappa);
    r.pcc_data = pcc(with_data.mean, m.kappa);
    r.mass_light = mass_light_pcc(m.sigma, m.photometry);
    std::printf("  cluster %llu: PSNR prior %.2f dB, prior+SL+WL %.2f dB, PCC %.3f, mass-light PCC %.3f\n",
                static_cast<unsigned long long>(seed), r.psnr_prior, r.psnr_data, r.pcc_data, r.mass_light);
    std::fflush(stdout);
    out.push_back(r);
  }
  return out;
}

// One-sided binomial tail P(X >= wins) under a fair coin.
double sign_test_p(int wins, int n) {
  double p = 0.0, c = 1.0;
  for (int k = 0; k <= n; ++k) {
    if (k > 0) c = c * (n - k + 1) / k;
    if (k >= wins) p += c;
  }
  return p / std::pow(2.0, n);
}

Outcome ablation(const std::vector<ClusterRun> &runs) {
  std::vector<double> a, b;
  int wins = 0;
  for (const auto &r : runs) {
    a.push_back(r.psnr_prior);
    b.push_back(r.psnr_data);
    wins += r.psnr_data > r.psnr_prior;
  }
  const double ma = median(a), mb = median(b), p = sign_test_p(wins, static_cast<int>(runs.size()));
  return {mb > ma && p < 0.05,
          fmt("median PSNR prior %.2f dB, prior+SL+WL %.2f dB, %.0f/10 improved, sign test p = %.4f", ma, mb, wins, p)};
}

// ---------------------------------------------------------------------------

Outcome calibration() {
  GrfPrior p(-2.0, 4.0);
  std::vector<ScalarField> means, stds, truths;
  for (std::uint64_t k = 0; k < 8; ++k) {
    Rng rng(90 + k, {0xca1});
    const auto truth = p.sample(kSmall, rng);
    std::vector<double> noise2(kSmall.size());
    ScalarField y = truth;
    for (std::size_t i = 0; i < y.size(); ++i) {
      noise2[i] = std::exp(rng.uniform(std::log(0.003), std::log(0.3)));
      y[i] += std::sqrt(noise2[i]) * rng.normal();
    }
    const auto cfg = small_config(20, 200 + k);
    const auto res = daps_sample(p, gaussian_objective(y, noise2, cfg.tau), cfg, kSmall);
    auto [m, s] = posterior_stats(res.normalized_samples);
    means.push_back(std::move(m));
    stds.push_back(std::move(s));
    truths.push_back(truth);
  }
  const auto c = calibration_curve(means, stds, truths);
  return {!c.degenerate && c.slope >= 0.8 && c.slope <= 1.2, fmt("slope %.3f, r2 %.3f", c.slope, c.r2)};
}

// ---------------------------------------------------------------------------

Outcome baseline_sanity(const std::vector<ClusterRun> &runs) {
  ClusterOptions opt;
  opt.self_consistent = true;
  const auto m = make_mock_cluster(0, opt);
  const double self = pcc(ltm_baseline(m.sources, m.grid), m.kappa);
  std::vector<double> ml, rec;
  for (const auto &r : runs) {
    ml.push_back(r.mass_light);
    rec.push_back(r.pcc_data);
  }
  const double mml = median(ml), mrec = median(rec);
  return {self >= 0.95 && mml < mrec,
          fmt("self-consistent LTM PCC %.4f, median mass-light PCC %.3f, median reconstruction PCC %.3f", self, mml,
              mrec)};
}

// ---------------------------------------------------------------------------

Outcome protocol_conformance() {
  GrfPrior p(-2.0, 4.0);
  protocol::ExternalScorePrior ext(std::string(GRF_PROVIDER) + " --slope -2 --amplitude 4");
  SamplerConfig cfg;
  cfg.inner_lr = 1e-3;
  cfg.inner_steps = 40;
  cfg.tau = 1.0;
  cfg.n_samples = 2;
  cfg.seed = 5;
  const auto a = daps_sample(p, {}, cfg, kSmall), b = daps_sample(ext, {}, cfg, kSmall);
  double worst = 0.0;
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t i = 0; i < kSmall.size(); ++i)
      worst = std::max(worst, std::abs(a.normalized_samples[s][i] - b.normalized_samples[s][i]));

  const protocol::ScoreFunction fn = [&p](const protocol::ScoreRequest &q, const std::vector<double> &x,
                                          const std::vector<double> &) {
    return p.score(ScalarField(make_grid(q.rows, 1.0), Quantity::generic, x), q.sigma).data();
  };
  const auto x = lftest::random_field(kSmall, 3);
  const auto raster = protocol::encode_f32({&x.data()});
  const std::vector<std::pair<std::string, io::Bytes>> cases = {
      {"not json", raster},
      {"[1,2,3]", raster},
      {R"({"op":"sample","sigma":1,"shape":[16,16]})", raster},
      {R"({"op":"score","shape":[16,16]})", raster},
      {R"({"op":"score","sigma":-1,"shape":[16,16]})", raster},
      {R"({"op":"score","sigma":1,"shape":[16,-4]})", raster},
      {R"({"op":"score","sigma":1,"shape":[16,16],"cond_channels":3})", raster},
      {R"({"op":"score","sigma":1,"shape":[16,16]})", io::Bytes(raster.begin(), raster.end() - 1)},
      {R"({"op":"score","sigma":1,"shape":[12,16]})", io::Bytes(4 * 12 * 16, 0)},
  };
  std::size_t structured = 0;
  for (const auto &[head, body] : cases) {
    const auto reply = protocol::handle_request(io::Bytes(head.begin(), head.end()), body, fn);
    protocol::FrameBuffer fb;
    fb.feed(reply.data(), reply.size());
    const auto f = fb.next();
    if (!f) continue;
    const auto j = protocol::parse_json(*f, "reply");
    structured += j.is_object() && j.value("ok", true) == false && j.contains("error") && j["error"].is_string();
  }
  bool garbage_raises = false;
  try {
    protocol::ExternalScorePrior bad("printf 'garbage'");
  } catch (const ProtocolError &) {
    garbage_raises = true;
  }
  return {worst <= 1e-6 && structured == cases.size() && garbage_raises,
          fmt("max sample diff %.3g, %.0f/%.0f malformed requests answered with error replies, garbage handshake ",
              worst, static_cast<double>(structured), static_cast<double>(cases.size())) +
              (garbage_raises ? "raises" : "does not raise")};
}

// ---------------------------------------------------------------------------

int run_cli(const std::string &args, const std::string &env) {
  const std::string cmd = env + " " + LENSFORGE_CLI + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome reproducibility() {
  const auto root = fs::temp_directory_path() / ("lensforge_accept_" + std::to_string(::getpid()));
  fs::remove_all(root);
  const auto a = root / "a", b = root / "b";
  if (run_cli("pipeline --seed 3 --samples 2 --threads 1 --out " + a.string(), "") != 0 ||
      run_cli("pipeline --seed 3 --samples 2 --out " + b.string(), "LENSFORGE_THREADS=4") != 0)
    return {false, "pipeline run failed"};
  std::size_t files = 0, differ = 0;
  for (const auto &e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto rel = e.path().lexically_relative(a);
    ++files;
    if (!fs::exists(b / rel)) {
      ++differ;
      continue;
    }
    if (rel.string().ends_with(".manifest.json")) {
      auto ja = read_json_file(e.path()), jb = read_json_file(b / rel);
      ja.erase("wall_time_s");
      jb.erase("wall_time_s");
      differ += ja != jb;
    } else {
      differ += io::read_file(e.path()) != io::read_file(b / rel);
    }
  }
  fs::remove_all(root);
  return {files > 10 && differ == 0,
          fmt("%.0f artifacts compared across 1 and 4 threads, %.0f differ", static_cast<double>(files),
              static_cast<double>(differ))};
}

} // namespace

int main() {
  int failures = 0;
  auto report = [&](const char *name, const std::function<Outcome()> &check) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception &e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
    std::fflush(stdout);
  };

  report("operator-oracle equivalence", operator_oracle);
  report("analytic lenses", analytic_lenses);
  report("kaiser-squires round trip", kaiser_squires);
  report("likelihood gradients", gradient_suite);
  report("sampler correctness", sampler_correctness);
  report("observation statistics", observation_statistics);

  std::vector<ClusterRun> runs;
  std::string ablation_error;
  try {
    runs = ablation_runs();
  } catch (const std::exception &e) {
    ablation_error = e.what();
  }
  auto needs_runs = [&](Outcome (*f)(const std::vector<ClusterRun> &)) {
    return [&, f]() -> Outcome {
      if (!ablation_error.empty()) return {false, "ablation runs failed: " + ablation_error};
      return f(runs);
    };
  };
  report("end-to-end ablation ordering", needs_runs(ablation));
  report("calibration", calibration);
  report("baseline sanity", needs_runs(baseline_sanity));
  report("protocol conformance", protocol_conformance);
  report("reproducibility", reproducibility);

  std::printf("%d of 11 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
