// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "coatcbm/coat.hpp"
#include "coatcbm/scoring.hpp"

namespace coatcbm {

/// Attention module plus linear head: the full inference path from frozen
/// features to a class prediction.
template <typename Scalar>
struct Model {
  CoatParams<Scalar> coat;
  Head<Scalar> head;

  template <typename Other>
  Model<Other> cast() const {
    return {coat.template cast<Other>(), head.template cast<Other>()};
  }
};

template <typename Scalar>
Vector<Scalar> image_scores(const Matrix<Scalar>& features, const CoatParams<Scalar>& coat,
                            const Matrix<Scalar>& text) {
  return concept_scores(attend(features, coat).embeddings, text);
}

template <typename Scalar>
Prediction<Scalar> classify(const Matrix<Scalar>& features, const Model<Scalar>& model,
                            const Matrix<Scalar>& text) {
  return predict(model.head, image_scores(features, model.coat, text));
}

}  // namespace coatcbm
