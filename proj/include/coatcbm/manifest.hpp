// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "coatcbm/common.hpp"

#include "json.hpp"

#include <map>
#include <string>

namespace coatcbm {

inline constexpr const char* kVersion = "0.1.0";

/// Provenance record written next to the outputs of every command. Hashes are
/// SHA-256 of file contents (directories are hashed recursively), so reruns on
/// identical inputs reproduce every hash; only `wall_time_s` varies.
struct RunManifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::map<std::string, std::string> inputs;
  std::map<std::string, std::string> outputs;
  double wall_time_s = 0;

  void add_input(const std::string& label, const fs::path& path);
  void add_output(const std::string& label, const fs::path& path);
  nlohmann::json to_json() const;
  void write(const fs::path& path) const;
};

}  // namespace coatcbm
