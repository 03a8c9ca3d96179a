// SPDX-License-Identifier: Apache-2.0
#include "coatcbm/hash.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cstdio>
#include <fstream>
#include <vector>

namespace coatcbm {

struct Sha256::Impl {
  EVP_MD_CTX* ctx = nullptr;
};

Sha256::Sha256() : impl_(std::make_unique<Impl>()) {
  impl_->ctx = EVP_MD_CTX_new();
  if (!impl_->ctx || EVP_DigestInit_ex(impl_->ctx, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256: EVP initialization failed");
}

Sha256::~Sha256() { EVP_MD_CTX_free(impl_->ctx); }

void Sha256::update(const void* data, std::size_t size) {
  if (size > 0) EVP_DigestUpdate(impl_->ctx, data, size);
}

std::string Sha256::hex_digest() {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(impl_->ctx, md.data(), &len);
  std::string out;
  out.reserve(len * 2);
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    out += buf;
  }
  return out;
}

std::string sha256_hex(std::string_view data) {
  Sha256 h;
  h.update(data);
  return h.hex_digest();
}

void hash_bundle(Sha256& h, const TensorBundle& bundle) {
  for (const auto& [name, t] : bundle) {
    h.update(name);
    h.update("\0", 1);
    for (auto s : t.shape) {
      const auto v = static_cast<std::uint64_t>(s);
      h.update(&v, sizeof v);
    }
    for (float f : t.data) {
      auto bits = std::bit_cast<std::uint32_t>(f);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
      h.update(&bits, sizeof bits);
    }
  }
}

namespace {

void hash_file(Sha256& h, const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read " + p.string());
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
  }
}

}  // namespace

std::string hash_path(const fs::path& path) {
  Sha256 h;
  if (fs::is_regular_file(path)) {
    hash_file(h, path);
    return h.hex_digest();
  }
  if (!fs::is_directory(path)) throw DataError("cannot hash missing path " + path.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(path))
    if (e.is_regular_file() && e.path().filename() != "run_manifest.json")
      files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    h.update(fs::relative(f, path).generic_string());
    h.update("\0", 1);
    hash_file(h, f);
  }
  return h.hex_digest();
}

}  // namespace coatcbm
