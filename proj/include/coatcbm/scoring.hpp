// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "coatcbm/common.hpp"
#include "coatcbm/tensorio.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

namespace coatcbm {

// Embeddings with a norm below this score 0.
inline constexpr double kMinNorm = 1e-12;

/// Row-wise cosine similarity between visual embeddings E and text
/// embeddings T, both n x d_c.
template <typename Scalar>
Vector<Scalar> concept_scores(const Matrix<Scalar>& embeddings, const Matrix<Scalar>& text) {
  if (embeddings.rows() != text.rows() || embeddings.cols() != text.cols())
    throw DataError("concept_scores: embeddings (" + std::to_string(embeddings.rows()) + ", " +
                    std::to_string(embeddings.cols()) + ") vs text (" +
                    std::to_string(text.rows()) + ", " + std::to_string(text.cols()) + ")");
  Vector<Scalar> s(embeddings.rows());
  for (Index i = 0; i < embeddings.rows(); ++i) {
    const Scalar ne = embeddings.row(i).norm();
    const Scalar nt = text.row(i).norm();
    if (ne < Scalar(kMinNorm) || nt < Scalar(kMinNorm)) {
      s(i) = Scalar(0);
    } else {
      s(i) = embeddings.row(i).dot(text.row(i)) / (ne * nt);
    }
  }
  return s;
}

/// Linear classifier over the concept score vector.
template <typename Scalar>
struct Head {
  Matrix<Scalar> weight;  // |Y| x n
  Vector<Scalar> bias;    // |Y|

  static Head zeros(int n_classes, int n_concepts) {
    return {Matrix<Scalar>::Zero(n_classes, n_concepts), Vector<Scalar>::Zero(n_classes)};
  }

  template <typename Other>
  Head<Other> cast() const {
    return {weight.template cast<Other>(), bias.template cast<Other>()};
  }
};

template <typename Scalar>
struct Prediction {
  Vector<Scalar> logits;
  int label = 0;
};

/// Index of the maximum; ties resolve to the lowest index.
template <typename Derived>
int argmax_lowest(const Eigen::MatrixBase<Derived>& v) {
  int best = 0;
  for (Index i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = static_cast<int>(i);
  return best;
}

template <typename Scalar>
Prediction<Scalar> predict(const Head<Scalar>& head, const Vector<Scalar>& scores) {
  if (head.weight.cols() != scores.size() || head.bias.size() != head.weight.rows())
    throw DataError("predict: head is (" + std::to_string(head.weight.rows()) + ", " +
                    std::to_string(head.weight.cols()) + ") but score vector has " +
                    std::to_string(scores.size()) + " entries");
  Prediction<Scalar> p;
  p.logits.noalias() = head.weight * scores;
  p.logits += head.bias;
  p.label = argmax_lowest(p.logits);
  return p;
}

/// Returns a copy of `scores` with the edits applied, each clamped to [-1, 1].
template <typename Scalar>
Vector<Scalar> intervene(const Vector<Scalar>& scores, const std::map<int, double>& edits) {
  Vector<Scalar> out = scores;
  for (const auto& [idx, value] : edits) {
    if (idx < 0 || idx >= scores.size())
      throw DataError("intervene: concept index " + std::to_string(idx) + " out of range [0, " +
                      std::to_string(scores.size()) + ")");
    out(idx) = static_cast<Scalar>(std::clamp(value, -1.0, 1.0));
  }
  return out;
}

/// Indices of the k highest scores, descending; ties by ascending index.
template <typename Scalar>
std::vector<int> top_k_indices(const Vector<Scalar>& scores, int k) {
  const int n = static_cast<int>(scores.size());
  if (k < 1 || k > n)
    throw DataError("top_k: k = " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return scores(a) > scores(b); });
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

struct RankedConcept {
  int index = 0;
  std::string text;
  double score = 0.0;
};

template <typename Scalar>
std::vector<RankedConcept> top_k(const Vector<Scalar>& scores, const ConceptBank& bank, int k) {
  if (scores.size() != bank.n_concepts())
    throw DataError("top_k: score vector length does not match concept bank");
  std::vector<RankedConcept> out;
  for (int i : top_k_indices(scores, k))
    out.push_back({i, bank.concepts[static_cast<std::size_t>(i)], static_cast<double>(scores(i))});
  return out;
}

}  // namespace coatcbm
