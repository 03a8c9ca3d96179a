// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "coatcbm/tensorio.hpp"

#include "json.hpp"

#include <cstdint>
#include <vector>

namespace coatcbm {

/// Planted-concept synthetic data. Every concept c owns a unit direction u_c
/// in feature space and a unit text embedding t_c. An image of class y holds
/// `planted_patches_per_concept` patches equal to signal_scale * u_c + noise
/// for each positive concept c of y; every other token (including the global
/// token) is pure Gaussian noise.
struct SynthConfig {
  std::uint64_t seed = 0;
  int n_classes = 10;
  int concepts_per_class = 5;
  int dim = 32;
  int text_dim = 16;
  int n_patches = 16;
  int train_per_class = 50;
  int val_per_class = -1;  // -1: round(0.2 * train_per_class), at least 1
  int test_per_class = 20;
  double signal_scale = 2.0;
  double noise_std = 0.3;
  int planted_patches_per_concept = 3;

  int n_concepts() const { return n_classes * concepts_per_class; }
  int resolved_val_per_class() const;
  void validate() const;
};

nlohmann::json to_json(const SynthConfig& cfg);
SynthConfig synth_config_from_json(const nlohmann::json& j, SynthConfig base = {});

/// Oracle relevance judgments. On synthetic data an image is relevant to
/// exactly the positives of its class.
struct GroundTruth {
  std::vector<std::vector<int>> class_to_concepts;
  std::vector<std::vector<int>> train_image_concepts;
  std::vector<std::vector<int>> val_image_concepts;
  std::vector<std::vector<int>> test_image_concepts;
};

struct SynthData {
  Dataset train;
  Dataset val;
  Dataset test;
  ConceptBank bank;
  GroundTruth truth;
};

SynthData generate(const SynthConfig& cfg);

/// Unit rows; orthonormalized by modified Gram-Schmidt when rows <= cols.
Matrix<double> random_unit_rows(int rows, int cols, std::uint64_t seed);

nlohmann::json to_json(const GroundTruth& truth);

}  // namespace coatcbm
