// lensforge command-line driver: mock -> observe -> reconstruct -> baseline -> eval.
//
// Exit codes: 0 success, 1 other failure, 2 invalid flags or configuration,
// 3 file I/O or malformed input file, 4 sampler divergence.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lensforge/lensforge.hpp"

namespace fs = std::filesystem;
using namespace lensforge;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// JSON configuration files for CLI11. A top-level object named after a
// subcommand configures that subcommand; nested objects flatten into
// dash-joined option names ({"rbf": {"length_scale": 2}} -> --rbf-length-scale).
// A top-level "scene" object applies to every subcommand that takes a scene.

class JsonConfig : public CLI::Config {
public:
  JsonConfig(std::set<std::string> sections, std::set<std::string> scene_users)
      : sections_(std::move(sections)), scene_users_(std::move(scene_users)) {}

  std::string to_config(const CLI::App *, bool, bool, std::string) const override { return "{}\n"; }

  std::vector<CLI::ConfigItem> from_config(std::istream &in) const override {
    std::stringstream ss;
    ss << in.rdbuf();
    const auto j = json::parse(ss.str(), nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw CLI::ConversionError("configuration must be a JSON object");
    std::vector<CLI::ConfigItem> items;
    for (const auto &[key, value] : j.items()) {
      if (key == "scene") {
        if (!value.is_object()) throw CLI::ConversionError("'scene' must be a JSON object");
        for (const auto &sub : scene_users_) flatten(value, {sub}, "", items);
      } else if (sections_.count(key)) {
        if (!value.is_object()) throw CLI::ConversionError("section '" + key + "' must be a JSON object");
        flatten(value, {key}, "", items);
      } else {
        items.push_back({{}, dashed(key), inputs(value)});
      }
    }
    return items;
  }

private:
  static std::string dashed(std::string s) {
    for (auto &c : s)
      if (c == '_') c = '-';
    return s;
  }
  static std::vector<std::string> inputs(const json &v) {
    if (v.is_string()) return {v.get<std::string>()};
    if (v.is_array()) {
      std::vector<std::string> out;
      for (const auto &e : v) out.push_back(e.is_string() ? e.get<std::string>() : e.dump());
      return out;
    }
    return {v.dump()};
  }
  static void flatten(const json &obj, const std::vector<std::string> &parents, const std::string &prefix,
                      std::vector<CLI::ConfigItem> &items) {
    for (const auto &[k, v] : obj.items()) {
      if (v.is_object())
        flatten(v, parents, prefix + k + "_", items);
      else
        items.push_back({parents, dashed(prefix + k), inputs(v)});
    }
  }

  std::set<std::string> sections_, scene_users_;
};

// ---------------------------------------------------------------------------
// Shared helpers

struct SceneArgs {
  LensScene scene{};

  void add(CLI::App *app) {
    app->add_option("--h0", scene.cosmology.h0, "Hubble constant, km/s/Mpc")->capture_default_str();
    app->add_option("--omega-m", scene.cosmology.omega_m, "matter density")->capture_default_str();
    app->add_option("--z-lens", scene.z_lens, "lens redshift")->capture_default_str();
    app->add_option("--z-ref", scene.z_ref, "reference source redshift of stored maps")->capture_default_str();
  }
  json to_json() const { return lensforge::to_json(scene); }
};

class Timer {
public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void write_scalar(const ScalarField &f, const fs::path &path, RunManifest &m, const fs::path &root) {
  write_raster(f, path);
  m.add_output(path, root);
}

void write_json(const json &j, const fs::path &path, RunManifest &m, const fs::path &root) {
  write_json_file(path, j);
  m.add_output(path, root);
}

void finish(RunManifest &m, const Timer &t, const fs::path &out) {
  m.wall_time_s = t.seconds();
  m.write(out / (m.command + ".manifest.json"));
}

json optional_json(const std::optional<double> &v) { return v ? json(*v) : json(nullptr); }

/// Parses a catalog file; schema errors are reported against the file.
template <class Parse> auto load_catalog(const fs::path &path, Parse parse) {
  const auto j = read_json_file(path);
  try {
    return parse(j);
  } catch (const CatalogError &e) {
    throw IoError(std::string("malformed catalog (") + e.what() + ")", path.string());
  }
}

void make_dir(const fs::path &p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create directory (" + ec.message() + ")", p.string());
}

// ---------------------------------------------------------------------------
// mock

struct MockArgs {
  std::uint64_t seed = 0;
  std::size_t n_particles = ClusterOptions{}.n_particles;
  std::optional<double> mass; ///< log10 virial mass, Msun; default draws from the option range
  std::size_t views = 1;
  std::size_t n_pix = ClusterOptions{}.n_pix;
  double fov = ClusterOptions{}.fov;
  std::size_t substructures = ClusterOptions{}.substructure_count;
  bool self_consistent = false;
  SceneArgs scene;
  fs::path out;

  void add(CLI::App *app, bool standalone) {
    if (standalone) {
      app->add_option("--seed", seed, "halo seed")->capture_default_str();
      app->add_option("--views", views, "number of projection directions")->capture_default_str()->check(CLI::PositiveNumber);
      app->add_flag("--self-consistent", self_consistent, "replace surface density by scaled F125 light");
      app->add_option("--out", out, "output directory")->required();
      scene.add(app);
    }
    app->add_option("--n-particles", n_particles, "particles per halo")->capture_default_str()->check(CLI::PositiveNumber);
    app->add_option("--mass", mass, "log10 virial mass in Msun (default: drawn per seed)");
    app->add_option("--n-pix", n_pix, "map size in pixels")->capture_default_str()->check(CLI::Range(8, 4096));
    app->add_option("--fov", fov, "field of view, arcsec")->capture_default_str()->check(CLI::PositiveNumber);
    app->add_option("--substructures", substructures, "substructure clumps")->capture_default_str();
  }
  ClusterOptions options() const {
    ClusterOptions o;
    o.n_particles = n_particles;
    if (mass) o.log_mass_min = o.log_mass_max = *mass;
    o.n_pix = n_pix;
    o.fov = fov;
    o.substructure_count = substructures;
    o.self_consistent = self_consistent;
    return o;
  }
  json to_json() const {
    return {{"n_particles", n_particles}, {"mass", optional_json(mass)}, {"views", views},
            {"n_pix", n_pix}, {"fov", fov}, {"substructures", substructures},
            {"self_consistent", self_consistent}, {"scene", scene.to_json()}};
  }
};

fs::path view_dir(const fs::path &out, std::size_t v) { return out / ("view" + std::to_string(v)); }

void run_mock(const MockArgs &a) {
  Timer t;
  const auto opt = a.options();
  const auto &scene = a.scene.scene;
  make_dir(a.out);
  RunManifest m;
  m.command = "mock";
  m.seed = a.seed;
  m.config = a.to_json();

  const auto halo = make_cluster_halo(a.seed, opt, scene);
  write_cloud(halo.cloud, a.out / "cloud.pcl1");
  m.add_output(a.out / "cloud.pcl1", a.out);
  const auto dirs = hemisphere_directions(a.views);
  for (std::size_t v = 0; v < a.views; ++v) {
    const auto c = project_cluster(halo, dirs[v], opt, scene);
    const auto d = view_dir(a.out, v);
    make_dir(d);
    write_scalar(c.kappa, d / "kappa.f32r", m, a.out);
    write_scalar(c.sigma, d / "sigma.f32r", m, a.out);
    write_raster(c.photometry, d / "photometry.f32r");
    m.add_output(d / "photometry.f32r", a.out);
    write_json(ltm_sources_json(c.sources), d / "ltm_sources.json", m, a.out);
    auto info = c.describe();
    info["virial_mass_msun"] = halo.virial_mass_msun;
    info["mass_light_pcc"] = mass_light_pcc(c.sigma, c.photometry);
    write_json(info, d / "truth.json", m, a.out);
  }
  std::printf("mock: seed %llu, virial mass %.4g Msun, %zu view(s) in %s\n",
              static_cast<unsigned long long>(a.seed), halo.virial_mass_msun, a.views, a.out.string().c_str());
  finish(m, t, a.out);
}

// ---------------------------------------------------------------------------
// observe

struct ObserveArgs {
  fs::path kappa;
  std::optional<fs::path> photometry;
  std::size_t strong = 5;
  double weak_density = 30.0;
  double sigma_w2 = 0.03;
  std::uint64_t seed = 0;
  SceneArgs scene;
  fs::path out;

  void add(CLI::App *app, bool standalone) {
    if (standalone) {
      app->add_option("--kappa", kappa, "true convergence raster")->required();
      app->add_option("--photometry", photometry, "cluster light raster to receive lensed arcs");
      app->add_option("--seed", seed, "observation seed")->capture_default_str();
      app->add_option("--out", out, "output directory")->required();
      scene.add(app);
    }
    app->add_option("--strong", strong, "multiple-image systems (0, or 5 to 20)")->capture_default_str();
    app->add_option("--weak-density", weak_density, "weak-lensing galaxies per arcmin^2")->capture_default_str();
    app->add_option("--sigma-w2", sigma_w2, "shape-noise variance per shear component")->capture_default_str();
  }
  json to_json() const {
    return {{"strong", strong}, {"weak_density", weak_density}, {"sigma_w2", sigma_w2}, {"scene", scene.to_json()}};
  }
};

void run_observe(const ObserveArgs &a) {
  Timer t;
  const auto &scene = a.scene.scene;
  if (a.strong != 0 && (a.strong < 5 || a.strong > 20))
    throw InvalidArgument("--strong must be 0 or between 5 and 20");
  RunManifest m;
  m.command = "observe";
  m.seed = a.seed;
  m.config = a.to_json();
  const auto kappa = read_scalar_raster(a.kappa);
  m.add_input("kappa", a.kappa);
  PhotometryStack phot(kappa.grid());
  if (a.photometry) {
    phot = read_photometry_raster(*a.photometry);
    if (!(phot.grid() == kappa.grid())) throw InvalidArgument("photometry and convergence grids differ");
    m.add_input("photometry", *a.photometry);
  }
  make_dir(a.out);

  std::vector<StrongLensSystem> systems;
  if (a.strong > 0) systems = gen_strong_systems(kappa, scene, a.strong, a.seed);
  WeakCatalog weak;
  weak.sigma_w2 = a.sigma_w2;
  if (a.weak_density > 0.0) weak = gen_weak_catalog(kappa, scene, a.weak_density, a.sigma_w2, a.seed);
  inject_lensed_sources(phot, kappa, scene, systems);

  write_json(strong_catalog_json(systems), a.out / "strong.json", m, a.out);
  write_json(to_json(weak), a.out / "weak.json", m, a.out);
  write_raster(phot, a.out / "photometry.f32r");
  m.add_output(a.out / "photometry.f32r", a.out);
  write_json({{"strong", "strong.json"}, {"weak", "weak.json"}, {"photometry", "photometry.f32r"},
              {"scene", to_json(scene)}},
             a.out / "obs.json", m, a.out);
  std::printf("observe: %zu strong systems, %zu weak galaxies in %s\n", systems.size(), weak.entries.size(),
              a.out.string().c_str());
  finish(m, t, a.out);
}

// ---------------------------------------------------------------------------
// reconstruct

/// Library weights with the weak term rescaled: summed over every pixel with a
/// 1/sigma_w^2 prefactor, the weak loss is ~10^5 times the strong-lensing loss,
/// and lambda_w >= 1e-3 drives the sampler to divergence on 64-pixel maps.
LossWeights cli_weights() {
  LossWeights w;
  w.lambda_w = 1e-6;
  return w;
}

struct ReconstructArgs {
  std::string kappa_init = "auto";
  std::optional<fs::path> strong, weak, photometry;
  std::string prior = "grf";
  std::string score_cmd;
  double grf_slope = default_grf_prior().power_slope();
  double grf_amplitude = default_grf_prior().amplitude();
  double grf_mean = default_grf_prior().mean();
  LossWeights weights = cli_weights();
  std::optional<double> rbf_length_scale, rbf_ridge;
  SamplerConfig sampler{};
  std::string coupling = "exact_score";
  std::size_t n_pix = 64;
  double fov = 50.0;
  SceneArgs scene;
  fs::path out;

  void add(CLI::App *app, bool standalone) {
    if (standalone) {
      app->add_option("--kappa-init", kappa_init, "'auto' or a convergence raster to start chains from")
          ->capture_default_str();
      app->add_option("--strong", strong, "strong-lensing catalog JSON");
      app->add_option("--weak", weak, "weak-lensing catalog JSON");
      app->add_option("--photometry", photometry, "observed photometry raster");
      app->add_option("--seed", sampler.seed, "sampler seed")->capture_default_str();
      app->add_option("--n-pix", n_pix, "grid size when no raster input fixes it")->capture_default_str();
      app->add_option("--fov", fov, "field of view when no raster input fixes it")->capture_default_str();
      app->add_option("--out", out, "output directory")->required();
      scene.add(app);
    }
    app->add_option("--prior", prior, "score prior")->check(CLI::IsMember({"grf", "external"}))->capture_default_str();
    app->add_option("--score-cmd", score_cmd, "external score provider command");
    app->add_option("--grf-slope", grf_slope, "GRF spectral slope")->capture_default_str();
    app->add_option("--grf-amplitude", grf_amplitude, "GRF spectral amplitude")->capture_default_str();
    app->add_option("--grf-mean", grf_mean, "GRF mean, normalized units")->capture_default_str();
    app->add_option("--samples", sampler.n_samples, "posterior samples")->capture_default_str()->check(CLI::PositiveNumber);
    app->add_option("--lambda-geo", weights.lambda_geo, "strong-lensing position weight")->capture_default_str();
    app->add_option("--lambda-img", weights.lambda_img, "strong-lensing photometric weight")->capture_default_str();
    app->add_option("--lambda-w", weights.lambda_w, "weak-lensing weight")->capture_default_str();
    app->add_option("--rbf-length-scale", rbf_length_scale, "shear interpolation length scale, arcsec");
    app->add_option("--rbf-ridge", rbf_ridge, "shear interpolation ridge");
    app->add_option("--tau", sampler.tau, "likelihood temperature")->capture_default_str();
    app->add_option("--lr", sampler.inner_lr, "inner Langevin step size")->capture_default_str();
    app->add_option("--inner-steps", sampler.inner_steps, "Langevin steps per noise level")->capture_default_str();
    app->add_option("--sigma-max", sampler.schedule.sigma_max, "largest noise level")->capture_default_str();
    app->add_option("--sigma-min", sampler.schedule.sigma_min, "smallest noise level")->capture_default_str();
    app->add_option("--steps", sampler.schedule.steps, "noise levels")->capture_default_str();
    app->add_option("--coupling", coupling, "prior coupling in the inner loop")
        ->check(CLI::IsMember({"exact_score", "gaussian_denoiser"}))
        ->capture_default_str();
  }
  SamplerConfig config() const {
    auto c = sampler;
    c.coupling = coupling == "exact_score" ? Coupling::exact_score : Coupling::gaussian_denoiser;
    return c;
  }
  json to_json() const {
    json j{{"kappa_init", kappa_init == "auto" ? "auto" : "file"},
           {"prior", prior},
           {"lambda_geo", weights.lambda_geo},
           {"lambda_img", weights.lambda_img},
           {"lambda_w", weights.lambda_w},
           {"rbf", {{"length_scale", optional_json(rbf_length_scale)}, {"ridge", optional_json(rbf_ridge)}}},
           {"sampler", config().to_json()},
           {"n_pix", n_pix},
           {"fov", fov},
           {"scene", scene.to_json()}};
    if (prior == "grf") j["grf"] = {{"slope", grf_slope}, {"amplitude", grf_amplitude}, {"mean", grf_mean}};
    else j["score_cmd"] = score_cmd;
    return j;
  }
};

void run_reconstruct(const ReconstructArgs &a) {
  Timer t;
  const auto &scene = a.scene.scene;
  RunManifest m;
  m.command = "reconstruct";
  m.seed = a.sampler.seed;
  m.config = a.to_json();

  ObservationData data;
  std::optional<ScalarField> init;
  std::optional<AngularGrid> grid;
  if (a.photometry) {
    data.photometry = read_photometry_raster(*a.photometry);
    grid = data.photometry->grid();
    m.add_input("photometry", *a.photometry);
  }
  if (a.kappa_init != "auto") {
    const auto k = read_scalar_raster(a.kappa_init);
    if (grid && !(k.grid() == *grid)) throw InvalidArgument("--kappa-init grid differs from the photometry grid");
    grid = k.grid();
    init = normalize(k);
    m.add_input("kappa_init", a.kappa_init);
  }
  if (!grid) grid = AngularGrid(a.n_pix, a.fov);
  if (a.strong) {
    data.systems = load_catalog(*a.strong, strong_catalog_from_json);
    m.add_input("strong", *a.strong);
  }
  if (a.weak) {
    data.weak = load_catalog(*a.weak, weak_catalog_from_json);
    m.add_input("weak", *a.weak);
  }
  data.rbf.length_scale = a.rbf_length_scale;
  data.rbf.ridge = a.rbf_ridge;
  data.rbf.validate();

  const auto cfg = a.config();
  cfg.validate();
  if (a.weights.all_zero())
    std::fprintf(stderr, "lensforge: warning: all likelihood weights are zero; sampling the prior only\n");
  auto nll = std::make_shared<const NegLogLikelihood>(scene, *grid, data, a.weights);
  NormalizedObjective objective;
  if (nll->active()) objective = normalized_objective(nll);
  else if (!a.weights.all_zero())
    std::fprintf(stderr, "lensforge: warning: no observations match the non-zero weights; sampling the prior only\n");

  std::unique_ptr<ScorePrior> prior;
  if (a.prior == "grf") {
    prior = std::make_unique<GrfPrior>(a.grf_slope, a.grf_amplitude, a.grf_mean);
  } else {
    if (a.score_cmd.empty()) throw InvalidArgument("--prior external requires --score-cmd");
    prior = std::make_unique<protocol::ExternalScorePrior>(a.score_cmd);
  }
  const PhotometryStack *cond = data.photometry ? &*data.photometry : nullptr;
  const auto r = daps_sample(*prior, objective, cfg, *grid, cond, {}, {}, init ? &*init : nullptr);

  make_dir(a.out);
  write_scalar(r.mean, a.out / "mean.f32r", m, a.out);
  write_scalar(r.std, a.out / "std.f32r", m, a.out);
  make_dir(a.out / "samples");
  for (std::size_t s = 0; s < r.samples.size(); ++s) {
    char name[32];
    std::snprintf(name, sizeof name, "sample_%03zu.f32r", s);
    write_scalar(r.samples[s], a.out / "samples" / name, m, a.out);
  }
  std::printf("reconstruct: %zu samples (%s) in %s\n", r.samples.size(),
              objective ? "posterior" : "prior only", a.out.string().c_str());
  finish(m, t, a.out);
}

// ---------------------------------------------------------------------------
// baseline

struct BaselineArgs {
  fs::path sources;
  std::optional<fs::path> like, sigma, photometry;
  std::size_t n_pix = 64;
  double fov = 50.0;
  double mass_per_flux = kDefaultMassPerFlux;
  int oversample = 4;
  fs::path out;

  void add(CLI::App *app) {
    app->add_option("--sources", sources, "LTM source list JSON")->required();
    app->add_option("--like", like, "raster whose grid the baseline map uses");
    app->add_option("--n-pix", n_pix, "grid size without --like")->capture_default_str();
    app->add_option("--fov", fov, "field of view without --like")->capture_default_str();
    app->add_option("--mass-per-flux", mass_per_flux, "convergence arcsec^2 per Jy of F125")->capture_default_str();
    app->add_option("--oversample", oversample, "sub-pixel samples per axis")->capture_default_str()->check(CLI::PositiveNumber);
    app->add_option("--sigma", sigma, "surface density raster for the mass-light correlation");
    app->add_option("--photometry", photometry, "photometry raster for the mass-light correlation");
    app->add_option("--out", out, "output directory")->required();
  }
  json to_json() const {
    return {{"n_pix", n_pix}, {"fov", fov}, {"mass_per_flux", mass_per_flux}, {"oversample", oversample}};
  }
};

void run_baseline(const BaselineArgs &a) {
  Timer t;
  RunManifest m;
  m.command = "baseline";
  m.config = a.to_json();
  const auto sources = load_catalog(a.sources, ltm_sources_from_json);
  m.add_input("sources", a.sources);
  AngularGrid grid(a.n_pix, a.fov);
  if (a.like) {
    grid = std::visit([](const auto &f) { return f.grid(); }, read_raster(*a.like));
    m.add_input("like", *a.like);
  }
  if (a.sigma.has_value() != a.photometry.has_value())
    throw InvalidArgument("--sigma and --photometry must be given together");
  make_dir(a.out);
  const auto kappa = ltm_baseline(sources, grid, a.mass_per_flux, a.oversample);
  write_scalar(kappa, a.out / "ltm_kappa.f32r", m, a.out);
  if (a.sigma) {
    const auto sigma = read_scalar_raster(*a.sigma);
    const auto phot = read_photometry_raster(*a.photometry);
    m.add_input("sigma", *a.sigma);
    m.add_input("photometry", *a.photometry);
    const double r = mass_light_pcc(sigma, phot);
    write_json({{"mass_light_pcc", r}}, a.out / "mass_light.json", m, a.out);
    std::printf("baseline: mass-light PCC %.4f\n", r);
  }
  std::printf("baseline: %zu components in %s\n", sources.size(), a.out.string().c_str());
  finish(m, t, a.out);
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::vector<fs::path> estimates;
  std::vector<std::string> names;
  fs::path truth;
  std::optional<fs::path> mask_from, std_map;
  HeldoutRule rule{};
  std::size_t bins = 10;
  fs::path out;

  void add(CLI::App *app) {
    app->add_option("--estimate", estimates, "estimated convergence raster (repeatable)")->required();
    app->add_option("--name", names, "label per estimate (repeatable)");
    app->add_option("--truth", truth, "true convergence raster")->required();
    app->add_option("--mask-from", mask_from, "obs.json whose catalogs define held-out pixels");
    app->add_option("--std", std_map, "posterior std raster of the first estimate, for calibration");
    app->add_option("--percentile", rule.photometry_percentile, "photometry percentile of the held-out mask")
        ->capture_default_str();
    app->add_option("--exclusion-px", rule.exclusion_radius_px, "exclusion radius around catalog positions, pixels")
        ->capture_default_str();
    app->add_option("--bins", bins, "calibration bins")->capture_default_str();
    app->add_option("--out", out, "output directory")->required();
  }
  json to_json() const {
    return {{"names", names},
            {"percentile", rule.photometry_percentile},
            {"exclusion_px", rule.exclusion_radius_px},
            {"bins", bins},
            {"mask", mask_from.has_value()}};
  }
};

ScalarField mask_from_observation(const fs::path &obs_path, const AngularGrid &grid, const HeldoutRule &rule,
                                  RunManifest &m) {
  const auto obs = read_json_file(obs_path);
  const auto base = obs_path.parent_path();
  auto member = [&](const char *key) -> std::optional<fs::path> {
    if (!obs.contains(key) || obs[key].is_null()) return std::nullopt;
    if (!obs[key].is_string()) throw CatalogError(std::string("obs.json field '") + key + "' must be a path");
    return base / obs[key].get<std::string>();
  };
  m.add_input("observation", obs_path);
  std::vector<StrongLensSystem> systems;
  std::optional<WeakCatalog> weak;
  std::optional<PhotometryStack> phot;
  if (auto p = member("strong")) {
    systems = load_catalog(*p, strong_catalog_from_json);
    m.add_input("strong", *p);
  }
  if (auto p = member("weak")) {
    weak = load_catalog(*p, weak_catalog_from_json);
    m.add_input("weak", *p);
  }
  if (auto p = member("photometry")) {
    phot = read_photometry_raster(*p);
    m.add_input("photometry", *p);
  }
  return heldout_mask(grid, phot ? &*phot : nullptr, systems, weak ? &*weak : nullptr, rule);
}

void run_eval(const EvalArgs &a) {
  Timer t;
  RunManifest m;
  m.command = "eval";
  m.config = a.to_json();
  if (!a.names.empty() && a.names.size() != a.estimates.size())
    throw InvalidArgument("--name must be given once per --estimate");
  const auto truth = read_scalar_raster(a.truth);
  m.add_input("truth", a.truth);
  make_dir(a.out);
  std::optional<ScalarField> mask;
  if (a.mask_from) {
    mask = mask_from_observation(*a.mask_from, truth.grid(), a.rule, m);
    write_scalar(*mask, a.out / "heldout_mask.f32r", m, a.out);
  }
  MetricReport report;
  std::vector<ScalarField> est;
  for (std::size_t i = 0; i < a.estimates.size(); ++i) {
    est.push_back(read_scalar_raster(a.estimates[i]));
    const auto name = a.names.empty() ? a.estimates[i].stem().string() : a.names[i];
    m.add_input("estimate:" + name, a.estimates[i]);
    report.entries.push_back(evaluate_kappa(name, est.back(), truth, mask ? &*mask : nullptr));
  }
  write_json(report.to_json(), a.out / "metrics.json", m, a.out);
  io::write_file_atomic(a.out / "metrics.csv", report.to_csv());
  m.add_output(a.out / "metrics.csv", a.out);
  if (a.std_map) {
    const auto sd = read_scalar_raster(*a.std_map);
    m.add_input("std", *a.std_map);
    const auto curve = calibration_curve({est.front()}, {sd}, {truth}, a.bins);
    write_json(curve.to_json(), a.out / "calibration.json", m, a.out);
  }
  for (const auto &e : report.entries)
    std::printf("eval: %-16s PSNR %7.3f  SSIM %.4f  PCC %.4f\n", e.name.c_str(), e.psnr, e.ssim, e.pcc);
  finish(m, t, a.out);
}

// ---------------------------------------------------------------------------
// pipeline

struct PipelineArgs {
  std::uint64_t seed = 0;
  MockArgs mock;
  ObserveArgs observe;
  ReconstructArgs reconstruct;
  SceneArgs scene;
  fs::path out;

  void add(CLI::App *app) {
    app->add_option("--seed", seed, "seed for every stage")->capture_default_str();
    app->add_option("--out", out, "output directory")->required();
    mock.add(app, false);
    observe.add(app, false);
    reconstruct.add(app, false);
    scene.add(app);
  }
};

void run_pipeline(PipelineArgs a) {
  Timer t;
  RunManifest m;
  m.command = "pipeline";
  m.seed = a.seed;
  make_dir(a.out);
  const auto mock_dir = a.out / "mock", obs_dir = a.out / "observe", rec_dir = a.out / "reconstruct",
             base_dir = a.out / "baseline", eval_dir = a.out / "eval";

  a.mock.seed = a.seed;
  a.mock.scene = a.scene;
  a.mock.out = mock_dir;
  run_mock(a.mock);
  const auto view = view_dir(mock_dir, 0);

  a.observe.seed = a.seed;
  a.observe.scene = a.scene;
  a.observe.kappa = view / "kappa.f32r";
  a.observe.photometry = view / "photometry.f32r";
  a.observe.out = obs_dir;
  run_observe(a.observe);

  a.reconstruct.sampler.seed = a.seed;
  a.reconstruct.scene = a.scene;
  a.reconstruct.strong = obs_dir / "strong.json";
  a.reconstruct.weak = obs_dir / "weak.json";
  a.reconstruct.photometry = obs_dir / "photometry.f32r";
  a.reconstruct.out = rec_dir;
  run_reconstruct(a.reconstruct);

  BaselineArgs b;
  b.sources = view / "ltm_sources.json";
  b.like = view / "kappa.f32r";
  b.sigma = view / "sigma.f32r";
  b.photometry = view / "photometry.f32r";
  b.out = base_dir;
  run_baseline(b);

  EvalArgs e;
  e.estimates = {rec_dir / "mean.f32r", base_dir / "ltm_kappa.f32r"};
  e.names = {"reconstruction", "ltm_baseline"};
  e.truth = view / "kappa.f32r";
  e.mask_from = obs_dir / "obs.json";
  e.std_map = rec_dir / "std.f32r";
  e.out = eval_dir;
  run_eval(e);

  m.config = {{"mock", a.mock.to_json()},
              {"observe", a.observe.to_json()},
              {"reconstruct", a.reconstruct.to_json()},
              {"baseline", b.to_json()},
              {"eval", e.to_json()}};
  for (const auto &dir : {mock_dir, obs_dir, rec_dir, base_dir, eval_dir})
    for (const auto &entry : fs::recursive_directory_iterator(dir))
      if (entry.is_regular_file()) m.add_output(entry.path(), a.out);
  // Stage manifests carry wall times; their digests would break run-to-run identity.
  for (auto it = m.outputs.begin(); it != m.outputs.end();)
    it = it->first.ends_with(".manifest.json") ? m.outputs.erase(it) : std::next(it);
  finish(m, t, a.out);
}

int fail(int code, const std::string &msg) {
  std::fprintf(stderr, "lensforge: error: %s\n", msg.c_str());
  return code;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"lensforge: cluster mass mapping by diffusion posterior sampling"};
  app.require_subcommand(1);
  app.fallthrough();
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.set_version_flag("--version", std::string(LENSFORGE_VERSION));
  unsigned threads = 0;
  app.add_option("--threads", threads, "worker thread cap (default: LENSFORGE_THREADS or all cores)");
  app.set_config("--config", "", "JSON run configuration; command-line flags take precedence");
  app.config_formatter(std::make_shared<JsonConfig>(
      std::set<std::string>{"mock", "observe", "reconstruct", "baseline", "eval", "pipeline"},
      std::set<std::string>{"mock", "observe", "reconstruct", "pipeline"}));

  MockArgs mock;
  ObserveArgs observe;
  ReconstructArgs reconstruct;
  BaselineArgs baseline;
  EvalArgs eval;
  PipelineArgs pipeline;
  auto *c_mock = app.add_subcommand("mock", "sample a mock cluster and write truth maps");
  mock.add(c_mock, true);
  auto *c_observe = app.add_subcommand("observe", "simulate strong, weak and photometric observations");
  observe.add(c_observe, true);
  auto *c_rec = app.add_subcommand("reconstruct", "draw posterior convergence samples");
  reconstruct.add(c_rec, true);
  auto *c_base = app.add_subcommand("baseline", "light-traces-mass convergence map");
  baseline.add(c_base);
  auto *c_eval = app.add_subcommand("eval", "metrics against a true convergence map");
  eval.add(c_eval);
  auto *c_pipe = app.add_subcommand("pipeline", "mock, observe, reconstruct, baseline and eval on one seed");
  pipeline.add(c_pipe);

  try {
    app.parse(argc, argv);
  } catch (const CLI::FileError &e) {
    return fail(3, e.what());
  } catch (const CLI::ParseError &e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  if (threads > 0) set_thread_count(threads);

  try {
    if (c_mock->parsed()) run_mock(mock);
    else if (c_observe->parsed()) run_observe(observe);
    else if (c_rec->parsed()) run_reconstruct(reconstruct);
    else if (c_base->parsed()) run_baseline(baseline);
    else if (c_eval->parsed()) run_eval(eval);
    else if (c_pipe->parsed()) run_pipeline(pipeline);
  } catch (const DivergedError &e) {
    return fail(4, std::string("sampler diverged at outer step ") + std::to_string(e.step()) + ": " + e.what());
  } catch (const IoError &e) {
    return fail(3, e.what());
  } catch (const FormatError &e) {
    return fail(3, e.what());
  } catch (const CatalogError &e) {
    return fail(3, e.what());
  } catch (const InvalidArgument &e) {
    return fail(2, e.what());
  } catch (const std::exception &e) {
    return fail(1, e.what());
  }
  return 0;
}
