#pragma once

// JSON forms of the observation catalogs, LTM source lists and scene
// parameters. Angles are arcseconds throughout.

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "lensforge/evaluate.hpp"
#include "lensforge/io.hpp"
#include "lensforge/observe.hpp"

namespace lensforge {

namespace detail {

inline nlohmann::json vec_json(Vec2 v) { return nlohmann::json::array({v.x, v.y}); }

inline Vec2 vec_from(const nlohmann::json &j, const char *what) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number())
    throw CatalogError(std::string(what) + " must be a [t1, t2] pair");
  return {j[0].get<double>(), j[1].get<double>()};
}

inline double num(const nlohmann::json &j, const char *key) {
  if (!j.is_object() || !j.contains(key) || !j[key].is_number())
    throw CatalogError(std::string("catalog field '") + key + "' missing or not a number");
  return j[key].get<double>();
}

inline double num_or(const nlohmann::json &j, const char *key, double fallback) {
  return j.contains(key) ? num(j, key) : fallback;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Strong lensing. The source position is generation-only and never written.

inline nlohmann::json to_json(const StrongLensSystem &s) {
  nlohmann::json images = nlohmann::json::array();
  for (Vec2 t : s.images) images.push_back(detail::vec_json(t));
  nlohmann::json j{{"source_id", s.source_id},
                   {"z_s", s.z_s},
                   {"images", images},
                   {"sersic",
                    {{"r_e", s.source.r_e},
                     {"n", s.source.n},
                     {"e1", s.source.e1},
                     {"e2", s.source.e2},
                     {"total_flux", s.source.total_flux},
                     {"band", static_cast<int>(s.source.band)}}}};
  if (!s.image_flux.empty()) j["image_flux"] = s.image_flux;
  return j;
}

inline StrongLensSystem strong_system_from_json(const nlohmann::json &j) {
  if (!j.is_object()) throw CatalogError("strong system must be a JSON object");
  StrongLensSystem s;
  const double id = detail::num(j, "source_id");
  if (id < 0 || id != std::floor(id)) throw CatalogError("source_id must be a non-negative integer");
  s.source_id = static_cast<std::size_t>(id);
  s.z_s = detail::num(j, "z_s");
  if (!j.contains("images") || !j["images"].is_array()) throw CatalogError("strong system lacks images");
  for (const auto &t : j["images"]) s.images.push_back(detail::vec_from(t, "image position"));
  if (j.contains("sersic")) {
    const auto &q = j["sersic"];
    s.source.r_e = detail::num_or(q, "r_e", s.source.r_e);
    s.source.n = detail::num_or(q, "n", s.source.n);
    s.source.e1 = detail::num_or(q, "e1", 0.0);
    s.source.e2 = detail::num_or(q, "e2", 0.0);
    s.source.total_flux = detail::num_or(q, "total_flux", s.source.total_flux);
    s.source.band = band_from_id(static_cast<int>(detail::num_or(q, "band", 125)));
  }
  if (j.contains("image_flux")) {
    if (!j["image_flux"].is_array()) throw CatalogError("image_flux must be an array");
    for (const auto &v : j["image_flux"]) {
      if (!v.is_number()) throw CatalogError("image_flux entries must be numbers");
      s.image_flux.push_back(v.get<double>());
    }
  }
  return s;
}

inline nlohmann::json strong_catalog_json(const std::vector<StrongLensSystem> &systems) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto &s : systems) arr.push_back(to_json(s));
  return arr;
}

inline std::vector<StrongLensSystem> strong_catalog_from_json(const nlohmann::json &j) {
  if (!j.is_array()) throw CatalogError("strong catalog must be a JSON array");
  std::vector<StrongLensSystem> out;
  for (const auto &s : j) out.push_back(strong_system_from_json(s));
  return out;
}

// ---------------------------------------------------------------------------
// Weak lensing

inline nlohmann::json to_json(const WeakCatalog &c) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto &e : c.entries)
    entries.push_back({{"theta", detail::vec_json(e.theta)}, {"gamma", detail::vec_json(e.gamma)}, {"z_s", e.z_s}});
  return {{"sigma_w2", c.sigma_w2}, {"entries", entries}};
}

inline WeakCatalog weak_catalog_from_json(const nlohmann::json &j) {
  WeakCatalog c;
  c.sigma_w2 = detail::num(j, "sigma_w2");
  if (!(c.sigma_w2 >= 0.0)) throw CatalogError("sigma_w2 must be non-negative");
  if (!j.contains("entries") || !j["entries"].is_array()) throw CatalogError("weak catalog lacks entries");
  for (const auto &e : j["entries"]) {
    if (!e.is_object()) throw CatalogError("weak entry must be a JSON object");
    c.entries.push_back({detail::vec_from(e.value("theta", nlohmann::json()), "theta"),
                         detail::vec_from(e.value("gamma", nlohmann::json()), "gamma"),
                         detail::num(e, "z_s")});
  }
  return c;
}

// ---------------------------------------------------------------------------
// LTM sources

inline nlohmann::json to_json(const LtmSource &s) {
  return {{"center", detail::vec_json(s.center)}, {"flux", s.flux}, {"core_radius", s.core_radius},
          {"cut_radius", s.cut_radius}, {"e1", s.e1}, {"e2", s.e2}};
}

inline nlohmann::json ltm_sources_json(const std::vector<LtmSource> &sources) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto &s : sources) arr.push_back(to_json(s));
  return arr;
}

inline std::vector<LtmSource> ltm_sources_from_json(const nlohmann::json &j) {
  if (!j.is_array()) throw CatalogError("LTM source list must be a JSON array");
  std::vector<LtmSource> out;
  for (const auto &e : j) {
    LtmSource s;
    s.center = detail::vec_from(e.value("center", nlohmann::json()), "center");
    s.flux = detail::num(e, "flux");
    s.core_radius = detail::num(e, "core_radius");
    s.cut_radius = detail::num(e, "cut_radius");
    s.e1 = detail::num_or(e, "e1", 0.0);
    s.e2 = detail::num_or(e, "e2", 0.0);
    s.validate();
    out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scene

inline nlohmann::json to_json(const LensScene &s) {
  return {{"h0", s.cosmology.h0}, {"omega_m", s.cosmology.omega_m}, {"z_lens", s.z_lens}, {"z_ref", s.z_ref}};
}

/// Overrides the fields present in `j`; the rest keep their values in `base`.
inline LensScene scene_from_json(const nlohmann::json &j, LensScene base = {}) {
  if (!j.is_object()) throw CatalogError("scene must be a JSON object");
  base.cosmology.h0 = detail::num_or(j, "h0", base.cosmology.h0);
  base.cosmology.omega_m = detail::num_or(j, "omega_m", base.cosmology.omega_m);
  base.z_lens = detail::num_or(j, "z_lens", base.z_lens);
  base.z_ref = detail::num_or(j, "z_ref", base.z_ref);
  base.validate();
  return base;
}

// ---------------------------------------------------------------------------
// Files

inline nlohmann::json read_json_file(const std::filesystem::path &path) {
  const auto bytes = io::read_file(path);
  auto j = nlohmann::json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (j.is_discarded()) throw CatalogError("invalid JSON in " + path.string());
  return j;
}

inline void write_json_file(const std::filesystem::path &path, const nlohmann::json &j) {
  io::write_file_atomic(path, j.dump(2) + "\n");
}

} // namespace lensforge
