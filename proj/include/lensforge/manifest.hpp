#pragma once

// Run manifests: what was run, on which inputs, producing which outputs.

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "lensforge/hash.hpp"
#include "lensforge/io.hpp"

#ifndef LENSFORGE_VERSION
#define LENSFORGE_VERSION "0.0.0"
#endif

namespace lensforge {

inline std::string file_digest(const std::filesystem::path &path) {
  const auto b = io::read_file(path);
  return hex_digest(digest_of(b.data(), b.size()));
}

/// Keys serialize in sorted order, so two manifests of the same run differ
/// only in wall_time_s.
struct RunManifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::map<std::string, std::string> inputs;  ///< label -> content digest
  std::map<std::string, std::string> outputs; ///< path relative to the output root -> digest
  std::uint64_t seed = 0;
  std::string tool_version = LENSFORGE_VERSION;
  double wall_time_s = 0.0;

  void add_input(const std::string &label, const std::filesystem::path &path) {
    inputs[label] = file_digest(path);
  }
  void add_output(const std::filesystem::path &path, const std::filesystem::path &root) {
    outputs[path.lexically_relative(root).generic_string()] = file_digest(path);
  }

  nlohmann::json to_json() const {
    return {{"command", command}, {"config", config},   {"inputs", inputs},
            {"outputs", outputs}, {"seed", seed},       {"tool_version", tool_version},
            {"wall_time_s", wall_time_s}};
  }
  std::string dump() const { return to_json().dump(2) + "\n"; }
  void write(const std::filesystem::path &path) const { io::write_file_atomic(path, dump()); }
};

} // namespace lensforge
