// SPDX-License-Identifier: Apache-2.0
#include "coatcbm/manifest.hpp"

#include "coatcbm/hash.hpp"

#include <fstream>

namespace coatcbm {

void RunManifest::add_input(const std::string& label, const fs::path& path) {
  inputs[label] = hash_path(path);
}

void RunManifest::add_output(const std::string& label, const fs::path& path) {
  outputs[label] = hash_path(path);
}

nlohmann::json RunManifest::to_json() const {
  return {{"command", command},
          {"artifact_version", kVersion},
          {"config", config},
          {"inputs", inputs},
          {"outputs", outputs},
          {"wall_time_s", wall_time_s}};
}

void RunManifest::write(const fs::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write run manifest " + path.string());
  out << to_json().dump(2) << '\n';
}

}  // namespace coatcbm
