// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "coatcbm/tensorio.hpp"

#include <memory>
#include <string>
#include <string_view>

namespace coatcbm {

/// Incremental SHA-256 (OpenSSL EVP).
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, std::size_t size);
  void update(std::string_view s) { update(s.data(), s.size()); }
  std::string hex_digest();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

std::string sha256_hex(std::string_view data);

/// Hash of a bundle's entries in name order: name, shape and little-endian
/// value bytes. Equals for bitwise-equal bundles.
void hash_bundle(Sha256& h, const TensorBundle& bundle);

/// Hash over every regular file below `path` (relative path + contents,
/// sorted by path). A single file hashes its contents only. Files named
/// run_manifest.json are skipped because they carry wall-clock times.
std::string hash_path(const fs::path& path);

}  // namespace coatcbm
