// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

namespace coatcbm {

/// Size limits for a random gradient-check instance. Each dimension is drawn
/// uniformly from [1, max] (at least 2 for concepts and classes).
struct GradcheckDims {
  int max_concepts = 4;
  int max_dim = 8;
  int max_key_dim = 4;
  int max_text_dim = 4;
  int max_patches = 3;
  int max_classes = 3;
  int max_batch = 3;

  static GradcheckDims parse(const std::string& name);  // "small" or "medium"
};

struct GradcheckResult {
  double max_rel_err = 0;
  long coordinates = 0;
  std::string worst;  // "<param>[r,c]" of the largest error
};

/// Compares the analytic gradient of the f64 training objective against
/// central differences on one random instance derived from `seed`.
GradcheckResult gradcheck(std::uint64_t seed, const GradcheckDims& dims, double lambda = 0.5,
                          double step = 1e-5);

}  // namespace coatcbm
