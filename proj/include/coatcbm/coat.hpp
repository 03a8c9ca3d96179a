// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "coatcbm/common.hpp"
#include "coatcbm/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace coatcbm {

/// Learnable parameters of the concept-wise attention module.
///
/// Each of the n_q queries attends over the (optionally global-augmented)
/// visual tokens through shared key and value projections. Concept i reads
/// the embedding of query group_of[i]; with n_q == n the map is the identity.
template <typename Scalar>
struct CoatParams {
  Matrix<Scalar> queries;     // n_q x d_k
  Matrix<Scalar> key_proj;    // d x d_k
  Matrix<Scalar> value_proj;  // d x d_c
  std::vector<int> group_of;  // concept -> query
  bool include_global = true;

  int n_concepts() const { return static_cast<int>(group_of.size()); }
  int n_queries() const { return static_cast<int>(queries.rows()); }
  int dim() const { return static_cast<int>(key_proj.rows()); }
  int key_dim() const { return static_cast<int>(queries.cols()); }
  int value_dim() const { return static_cast<int>(value_proj.cols()); }

  template <typename Other>
  CoatParams<Other> cast() const {
    return {queries.template cast<Other>(), key_proj.template cast<Other>(),
            value_proj.template cast<Other>(), group_of, include_global};
  }

  void validate() const {
    const int nq = n_queries();
    const int n = n_concepts();
    if (nq < 1 || n < 1) throw DataError("coat params: empty queries or concepts");
    if (nq > n) throw DataError("coat params: more queries than concepts");
    if (key_proj.cols() != queries.cols())
      throw DataError("coat params: W_K width " + std::to_string(key_proj.cols()) +
                      " != query dim " + std::to_string(queries.cols()));
    if (value_proj.rows() != key_proj.rows())
      throw DataError("coat params: W_K and W_V disagree on input dim");
    std::vector<char> hit(static_cast<std::size_t>(nq), 0);
    for (int i = 0; i < n; ++i) {
      const int g = group_of[static_cast<std::size_t>(i)];
      if (g < 0 || g >= nq)
        throw DataError("coat params: concept " + std::to_string(i) + " maps to query " +
                        std::to_string(g) + " out of range");
      if (nq == n && g != i) throw DataError("coat params: n_q == n requires identity grouping");
      hit[static_cast<std::size_t>(g)] = 1;
    }
    if (std::find(hit.begin(), hit.end(), 0) != hit.end())
      throw DataError("coat params: some query serves no concept");
    if (!queries.allFinite() || !key_proj.allFinite() || !value_proj.allFinite())
      throw NumericError("coat params: non-finite values");
  }
};

/// Number of queries for a grouping ratio: max(1, round(ratio * n)).
inline int query_count(int n_concepts, double group_ratio) {
  if (!(group_ratio > 0.0 && group_ratio <= 1.0))
    throw DataError("group_ratio must lie in (0, 1]");
  return std::max(1, static_cast<int>(std::lround(group_ratio * n_concepts)));
}

/// Concept i is served by query floor(i * n_q / n).
inline std::vector<int> group_assignment(int n_concepts, int n_queries) {
  std::vector<int> g(static_cast<std::size_t>(n_concepts));
  for (int i = 0; i < n_concepts; ++i)
    g[static_cast<std::size_t>(i)] =
        static_cast<int>((static_cast<std::int64_t>(i) * n_queries) / n_concepts);
  return g;
}

/// Fan-in Gaussian initialization, drawn in the order Q, W_K, W_V (row-major
/// within each) from a single SplitMix64 stream.
template <typename Scalar>
CoatParams<Scalar> init_params(std::uint64_t seed, int n_concepts, int dim, int key_dim,
                               int value_dim, double group_ratio = 1.0) {
  if (n_concepts < 1 || dim < 1 || key_dim < 1 || value_dim < 1)
    throw DataError("init_params: dimensions must be positive");
  const int nq = query_count(n_concepts, group_ratio);
  SplitMix64 rng(seed);
  auto draw = [&rng](Index rows, Index cols, double std) {
    Matrix<Scalar> m(rows, cols);
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < cols; ++c) m(r, c) = static_cast<Scalar>(std * rng.normal());
    return m;
  };
  CoatParams<Scalar> p;
  p.queries = draw(nq, key_dim, 1.0 / std::sqrt(static_cast<double>(key_dim)));
  p.key_proj = draw(dim, key_dim, 1.0 / std::sqrt(static_cast<double>(dim)));
  p.value_proj = draw(dim, value_dim, 1.0 / std::sqrt(static_cast<double>(dim)));
  p.group_of = group_assignment(n_concepts, nq);
  return p;
}

/// Forward state of one image through the attention module. keys/values are
/// retained for the backward pass.
template <typename Scalar>
struct AttentionTrace {
  Matrix<Scalar> alphas;            // n_q x (N_p + 1); column 0 is the global token
  Matrix<Scalar> query_embeddings;  // n_q x d_c
  Matrix<Scalar> embeddings;        // n x d_c, row i = query_embeddings.row(group_of[i])
  Matrix<Scalar> keys;              // tokens x d_k
  Matrix<Scalar> values;            // tokens x d_c
  Index first_token = 0;            // 1 when the global token is excluded
};

/// Softmax with max subtraction.
template <typename Derived>
Vector<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  const Scalar m = logits.maxCoeff();
  Vector<Scalar> e = (logits.array() - m).exp().matrix();
  return e / e.sum();
}

template <typename Scalar>
AttentionTrace<Scalar> attend(const Matrix<Scalar>& z, const CoatParams<Scalar>& params) {
  const Index min_rows = params.include_global ? 1 : 2;
  if (z.rows() < min_rows || z.cols() != params.dim())
    throw DataError("attend: feature set shaped (" + std::to_string(z.rows()) + ", " +
                    std::to_string(z.cols()) + "), expected (N_p+1, " +
                    std::to_string(params.dim()) + ") with at least one attended token");
  if (!z.allFinite()) throw NumericError("attend: non-finite feature values");

  AttentionTrace<Scalar> t;
  t.first_token = params.include_global ? 0 : 1;
  const auto tokens = z.bottomRows(z.rows() - t.first_token);
  t.keys.noalias() = tokens * params.key_proj;
  t.values.noalias() = tokens * params.value_proj;

  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(params.key_dim()));
  const Matrix<Scalar> logits = (params.queries * t.keys.transpose()) * scale;  // n_q x tokens

  t.alphas = Matrix<Scalar>::Zero(params.n_queries(), z.rows());
  t.query_embeddings.resize(params.n_queries(), params.value_dim());
  for (Index q = 0; q < params.n_queries(); ++q) {
    const Vector<Scalar> a = softmax(logits.row(q).transpose());
    t.alphas.row(q).tail(a.size()) = a.transpose();
    t.query_embeddings.row(q).noalias() = (t.values.transpose() * a).transpose();
  }

  t.embeddings.resize(params.n_concepts(), params.value_dim());
  for (int i = 0; i < params.n_concepts(); ++i)
    t.embeddings.row(i) = t.query_embeddings.row(params.group_of[static_cast<std::size_t>(i)]);
  return t;
}

}  // namespace coatcbm
