// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "coatcbm/common.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace coatcbm {

/// A dense f32 tensor stored row-major.
struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  std::int64_t element_count() const;
  friend bool operator==(const Tensor&, const Tensor&) = default;
};

using TensorBundle = std::map<std::string, Tensor>;

/// Writes `manifest.json` plus one raw little-endian binary32 file per entry.
void write_bundle(const TensorBundle& bundle, const fs::path& dir);

/// Reads and validates a bundle written by write_bundle.
TensorBundle read_bundle(const fs::path& dir);

/// Bitwise comparison (NaN payloads included).
bool bitwise_equal(const TensorBundle& a, const TensorBundle& b);

template <typename Derived>
Tensor to_tensor(const Eigen::MatrixBase<Derived>& m) {
  Tensor t;
  t.shape = {static_cast<std::int64_t>(m.rows()), static_cast<std::int64_t>(m.cols())};
  t.data.resize(static_cast<std::size_t>(m.size()));
  std::size_t k = 0;
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) t.data[k++] = static_cast<float>(m(r, c));
  return t;
}

template <typename Derived>
Tensor to_tensor_1d(const Eigen::MatrixBase<Derived>& v) {
  Tensor t;
  t.shape = {static_cast<std::int64_t>(v.size())};
  t.data.resize(static_cast<std::size_t>(v.size()));
  for (Index i = 0; i < v.size(); ++i) t.data[static_cast<std::size_t>(i)] = static_cast<float>(v(i));
  return t;
}

/// Reads a rank-2 tensor into a matrix. `name` appears in diagnostics.
Matrix<float> to_matrix(const Tensor& t, const std::string& name);
Vector<float> to_vector(const Tensor& t, const std::string& name);

const Tensor& require_entry(const TensorBundle& b, const std::string& name);

// ---------------------------------------------------------------------------
// Datasets

/// Frozen encoder features for M images. Each feature matrix is
/// (n_patches + 1) x dim with row 0 the global token.
struct Dataset {
  int n_patches = 0;
  int dim = 0;
  int n_classes = 0;
  std::vector<Matrix<float>> features;
  std::vector<int> labels;
  // Optional free-text descriptions per image, used by the remote judge.
  std::vector<std::string> descriptions;

  std::size_t size() const { return labels.size(); }
  void validate() const;
};

void write_dataset(const Dataset& ds, const fs::path& dir);
Dataset load_dataset(const fs::path& dir);

// ---------------------------------------------------------------------------
// Concept banks

struct ConceptBank {
  std::vector<std::string> concepts;
  std::vector<std::string> class_names;
  std::vector<std::vector<int>> class_to_concepts;
  Matrix<float> text_embeddings;  // n x d_c

  int n_concepts() const { return static_cast<int>(concepts.size()); }
  int n_classes() const { return static_cast<int>(class_names.size()); }
  int embedding_dim() const { return static_cast<int>(text_embeddings.cols()); }
  const std::vector<int>& positives(int label) const;
  std::vector<char> positive_mask(int label) const;
  void validate() const;
};

void write_concept_bank(const ConceptBank& bank, const fs::path& dir);
ConceptBank load_concept_bank(const fs::path& dir);

}  // namespace coatcbm
