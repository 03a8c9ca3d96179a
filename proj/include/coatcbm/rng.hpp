// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace coatcbm {

/// SplitMix64 generator with a Box-Muller standard normal.
///
/// The stream is fully specified so ports in other languages draw from the
/// same distributions:
///   state += 0x9E3779B97F4A7C15
///   z = state; z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9;
///   z = (z ^ (z >> 27)) * 0x94D049BB133111EB; return z ^ (z >> 31)
/// uniform() maps the top 53 bits to [0, 1). normal() draws u1 in (0, 1] as
/// 1 - uniform() and u2 = uniform(), returns sqrt(-2 ln u1) cos(2 pi u2) and
/// caches sqrt(-2 ln u1) sin(2 pi u2) for the next call.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Uniform integer in [0, bound). Modulo reduction; bias is below 2^-40 for
  // the bounds used here.
  std::uint64_t below(std::uint64_t bound) { return next() % bound; }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Derives an independent stream seed for a named purpose.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  SplitMix64 g(seed ^ (0xA0761D6478BD642FULL * (stream + 1)));
  return g.next();
}

template <typename Container>
void shuffle(Container& items, SplitMix64& rng) {
  for (auto i = static_cast<std::uint64_t>(items.size()); i > 1; --i) {
    const auto j = rng.below(i);
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace coatcbm
