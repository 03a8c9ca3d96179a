// SPDX-License-Identifier: Apache-2.0
#include "coatcbm/synth.hpp"

#include "coatcbm/rng.hpp"

#include <cmath>
#include <numeric>
#include <string>

namespace coatcbm {

using json = nlohmann::json;

int SynthConfig::resolved_val_per_class() const {
  if (val_per_class >= 0) return val_per_class;
  return std::max(1, static_cast<int>(std::lround(0.2 * train_per_class)));
}

void SynthConfig::validate() const {
  if (n_classes < 1 || concepts_per_class < 1 || dim < 1 || text_dim < 1 || n_patches < 1)
    throw DataError("synth: class, concept and dimension counts must be positive");
  if (train_per_class < 1 || test_per_class < 1 || resolved_val_per_class() < 1)
    throw DataError("synth: per-class sample counts must be positive");
  if (planted_patches_per_concept < 1)
    throw DataError("synth: planted_patches_per_concept must be >= 1");
  if (planted_patches_per_concept * concepts_per_class > n_patches)
    throw DataError("synth: planted_patches_per_concept * concepts_per_class exceeds n_patches");
  if (!(signal_scale > 0)) throw DataError("synth: signal_scale must be > 0");
  if (!(noise_std >= 0)) throw DataError("synth: noise_std must be >= 0");
}

json to_json(const SynthConfig& c) {
  return {{"seed", c.seed},
          {"n_classes", c.n_classes},
          {"concepts_per_class", c.concepts_per_class},
          {"d", c.dim},
          {"d_c", c.text_dim},
          {"n_patches", c.n_patches},
          {"train_per_class", c.train_per_class},
          {"val_per_class", c.resolved_val_per_class()},
          {"test_per_class", c.test_per_class},
          {"signal_scale", c.signal_scale},
          {"noise_std", c.noise_std},
          {"planted_patches_per_concept", c.planted_patches_per_concept}};
}

SynthConfig synth_config_from_json(const json& j, SynthConfig c) {
  if (!j.is_object()) throw DataError("synth config must be a JSON object");
  bool text_dim_given = false;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "n_classes") c.n_classes = v.get<int>();
      else if (key == "concepts_per_class") c.concepts_per_class = v.get<int>();
      else if (key == "d") c.dim = v.get<int>();
      else if (key == "d_c") {
        c.text_dim = v.get<int>();
        text_dim_given = true;
      } else if (key == "n_patches") c.n_patches = v.get<int>();
      else if (key == "train_per_class") c.train_per_class = v.get<int>();
      else if (key == "val_per_class") c.val_per_class = v.get<int>();
      else if (key == "test_per_class") c.test_per_class = v.get<int>();
      else if (key == "signal_scale") c.signal_scale = v.get<double>();
      else if (key == "noise_std") c.noise_std = v.get<double>();
      else if (key == "planted_patches_per_concept") c.planted_patches_per_concept = v.get<int>();
      else throw DataError("unknown synth config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed synth config: ") + e.what());
  }
  if (!text_dim_given && j.contains("d")) c.text_dim = std::max(1, c.dim / 2);
  return c;
}

Matrix<double> random_unit_rows(int rows, int cols, std::uint64_t seed) {
  SplitMix64 rng(seed);
  Matrix<double> m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = rng.normal();
  const bool orthogonalize = rows <= cols;
  for (Index r = 0; r < rows; ++r) {
    if (orthogonalize)
      for (Index p = 0; p < r; ++p) m.row(r) -= m.row(r).dot(m.row(p)) * m.row(p);
    m.row(r) /= m.row(r).norm();
  }
  return m;
}

namespace {

// Concepts are numbered class-major: class y owns [y * cpc, (y + 1) * cpc).
int concept_index(const SynthConfig& cfg, int y, int k) {
  return y * cfg.concepts_per_class + k;
}

Dataset make_split(const SynthConfig& cfg, const Matrix<double>& directions, int per_class,
                   std::uint64_t seed, const std::string& split_name) {
  SplitMix64 rng(seed);
  Dataset ds;
  ds.n_patches = cfg.n_patches;
  ds.dim = cfg.dim;
  ds.n_classes = cfg.n_classes;
  const int rows = cfg.n_patches + 1;
  std::vector<int> slots(static_cast<std::size_t>(cfg.n_patches));
  for (int y = 0; y < cfg.n_classes; ++y) {
    for (int k = 0; k < per_class; ++k) {
      Matrix<double> z(rows, cfg.dim);
      for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cfg.dim; ++c) z(r, c) = cfg.noise_std * rng.normal();
      std::iota(slots.begin(), slots.end(), 1);
      shuffle(slots, rng);
      const int planted = cfg.planted_patches_per_concept * cfg.concepts_per_class;
      for (int j = 0; j < planted; ++j) {
        const int concept_id = concept_index(cfg, y, j / cfg.planted_patches_per_concept);
        z.row(slots[static_cast<std::size_t>(j)]) += cfg.signal_scale * directions.row(concept_id);
      }
      ds.features.push_back(z.cast<float>());
      ds.labels.push_back(y);
      ds.descriptions.push_back(split_name + " image " + std::to_string(ds.labels.size() - 1) +
                                " of class_" + std::to_string(y));
    }
  }
  return ds;
}

std::vector<std::vector<int>> image_concepts(const Dataset& ds, const ConceptBank& bank) {
  std::vector<std::vector<int>> out;
  out.reserve(ds.size());
  for (int y : ds.labels) out.push_back(bank.positives(y));
  return out;
}

}  // namespace

SynthData generate(const SynthConfig& cfg) {
  cfg.validate();
  const int n = cfg.n_concepts();
  const Matrix<double> directions = random_unit_rows(n, cfg.dim, derive_seed(cfg.seed, 100));
  const Matrix<double> text = random_unit_rows(n, cfg.text_dim, derive_seed(cfg.seed, 101));

  SynthData out;
  auto& bank = out.bank;
  for (int y = 0; y < cfg.n_classes; ++y) {
    bank.class_names.push_back("class_" + std::to_string(y));
    std::vector<int> pos;
    for (int k = 0; k < cfg.concepts_per_class; ++k) {
      const int c = concept_index(cfg, y, k);
      pos.push_back(c);
      bank.concepts.push_back("class_" + std::to_string(y) + " concept " + std::to_string(k));
    }
    bank.class_to_concepts.push_back(std::move(pos));
  }
  bank.text_embeddings = text.cast<float>();
  bank.validate();

  out.train = make_split(cfg, directions, cfg.train_per_class, derive_seed(cfg.seed, 200), "train");
  out.val = make_split(cfg, directions, cfg.resolved_val_per_class(), derive_seed(cfg.seed, 201),
                       "val");
  out.test = make_split(cfg, directions, cfg.test_per_class, derive_seed(cfg.seed, 202), "test");

  out.truth.class_to_concepts = bank.class_to_concepts;
  out.truth.train_image_concepts = image_concepts(out.train, bank);
  out.truth.val_image_concepts = image_concepts(out.val, bank);
  out.truth.test_image_concepts = image_concepts(out.test, bank);
  return out;
}

json to_json(const GroundTruth& t) {
  return {{"class_to_concepts", t.class_to_concepts},
          {"image_concepts",
           {{"train", t.train_image_concepts},
            {"val", t.val_image_concepts},
            {"test", t.test_image_concepts}}}};
}

}  // namespace coatcbm
