// SPDX-License-Identifier: Apache-2.0
#include "coatcbm/coat.hpp"
#include "coatcbm/rng.hpp"
#include "oracles.hpp"

#include "doctest.h"

#include <cmath>
#include <numeric>

using namespace coatcbm;

namespace {

Matrix<double> random_tokens(SplitMix64& rng, int rows, int d) {
  Matrix<double> z(rows, d);
  for (Index k = 0; k < z.size(); ++k) z.data()[k] = rng.normal();
  return z;
}

struct Instance {
  CoatParams<double> params;
  Matrix<double> z;
};

Instance random_instance(std::uint64_t seed) {
  SplitMix64 rng(seed);
  const int n = 1 + static_cast<int>(rng.below(6));
  const int d = 1 + static_cast<int>(rng.below(8));
  const int dk = 1 + static_cast<int>(rng.below(4));
  const int dc = 1 + static_cast<int>(rng.below(4));
  const int np = 1 + static_cast<int>(rng.below(5));
  const double ratio = std::vector<double>{0.1, 0.5, 1.0}[rng.below(3)];
  Instance inst{init_params<double>(rng.next(), n, d, dk, dc, ratio), random_tokens(rng, np + 1, d)};
  // Larger queries give peaked attention, which exercises the max subtraction.
  inst.params.queries *= 1 + 4 * rng.uniform();
  inst.params.include_global = rng.below(4) != 0;
  return inst;
}

}  // namespace

TEST_CASE("query counts and group maps") {
  CHECK(query_count(5, 1.0) == 5);
  CHECK(group_assignment(5, 5) == std::vector<int>{0, 1, 2, 3, 4});
  CHECK(query_count(4, 0.5) == 2);
  CHECK(group_assignment(4, 2) == std::vector<int>{0, 0, 1, 1});
  CHECK(query_count(50, 0.1) == 5);
  CHECK(query_count(3, 0.1) == 1);
  CHECK_THROWS_AS(query_count(4, 0.0), DataError);
  CHECK_THROWS_AS(query_count(4, 1.5), DataError);
}

TEST_CASE("initialization is seeded") {
  const auto a = init_params<double>(9, 4, 6, 3, 2, 0.5);
  const auto b = init_params<double>(9, 4, 6, 3, 2, 0.5);
  const auto c = init_params<double>(10, 4, 6, 3, 2, 0.5);
  CHECK(a.queries == b.queries);
  CHECK(a.key_proj == b.key_proj);
  CHECK(a.value_proj == b.value_proj);
  CHECK(a.group_of == std::vector<int>{0, 0, 1, 1});
  CHECK(a.queries != c.queries);
  CHECK(a.queries.rows() == 2);
  CHECK_NOTHROW(a.validate());
}

TEST_CASE("a single token receives all attention") {
  CoatParams<double> p = init_params<double>(1, 3, 4, 2, 3);
  Matrix<double> z(1, 4);
  z << 0.3, -1.2, 2.0, 0.7;
  const auto t = attend(z, p);
  for (Index q = 0; q < t.alphas.rows(); ++q) CHECK(t.alphas(q, 0) == 1.0);
  const Matrix<double> value = z * p.value_proj;
  for (Index i = 0; i < t.embeddings.rows(); ++i) CHECK(t.embeddings.row(i) == value.row(0));
}

TEST_CASE("softmax over logits 0 and ln 3 gives one quarter and three quarters") {
  const Vector<double> a = softmax(Vector<double>{{0.0, std::log(3.0)}});
  CHECK(a(0) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(a(1) == doctest::Approx(0.75).epsilon(1e-15));

  // The same through attend: one query, d = d_k = 1, unit projections.
  CoatParams<double> p;
  p.queries = Matrix<double>::Ones(1, 1);
  p.key_proj = Matrix<double>::Ones(1, 1);
  p.value_proj = Matrix<double>{{1.0, -2.0}};
  p.group_of = {0};
  Matrix<double> z(2, 1);
  z << 0.0, std::log(3.0);
  const auto t = attend(z, p);
  CHECK(t.alphas(0, 0) == doctest::Approx(0.25));
  CHECK(t.alphas(0, 1) == doctest::Approx(0.75));
  const Vector<double> v1 = (z.row(0) * p.value_proj).transpose();
  const Vector<double> v2 = (z.row(1) * p.value_proj).transpose();
  const Vector<double> expected = 0.25 * v1 + 0.75 * v2;
  CHECK(t.embeddings(0, 0) == doctest::Approx(expected(0)));
  CHECK(t.embeddings(0, 1) == doctest::Approx(expected(1)));
}

TEST_CASE("softmax is stable for large logits") {
  const Vector<double> a = softmax(Vector<double>{{1000.0, 1000.0, -1000.0}});
  CHECK(a.allFinite());
  CHECK(a(0) == doctest::Approx(0.5));
  CHECK(a(2) == 0.0);
}

TEST_CASE("attention agrees with the token-by-token oracle") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Instance inst = random_instance(seed);
    const auto t = attend(inst.z, inst.params);
    const auto ref = oracle::attend(inst.z, inst.params);
    CAPTURE(seed);
    for (Index q = 0; q < t.alphas.rows(); ++q)
      for (std::size_t k = 0; k < ref.alphas[q].size(); ++k)
        CHECK(std::abs(t.alphas(q, t.first_token + static_cast<Index>(k)) -
                       static_cast<double>(ref.alphas[q][k])) < 1e-12);
    for (Index i = 0; i < t.embeddings.rows(); ++i)
      for (Index c = 0; c < t.embeddings.cols(); ++c)
        CHECK(std::abs(t.embeddings(i, c) - static_cast<double>(ref.embeddings[i][c])) < 1e-12);
  }
}

TEST_CASE("attention rows are stochastic and embeddings lie in the value hull") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Instance inst = random_instance(seed + 1000);
    const auto t = attend(inst.z, inst.params);
    CAPTURE(seed);
    CHECK((t.alphas.array() >= 0).all());
    for (Index q = 0; q < t.alphas.rows(); ++q) CHECK(std::abs(t.alphas.row(q).sum() - 1) < 1e-6);
    for (Index c = 0; c < t.values.cols(); ++c) {
      const double lo = t.values.col(c).minCoeff(), hi = t.values.col(c).maxCoeff();
      const double slack = 1e-12 * (1 + std::abs(lo) + std::abs(hi));
      CHECK((t.embeddings.col(c).array() >= lo - slack).all());
      CHECK((t.embeddings.col(c).array() <= hi + slack).all());
    }
  }
}

TEST_CASE("permuting tokens permutes attention and leaves embeddings unchanged") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Instance inst = random_instance(seed + 2000);
    inst.params.include_global = true;  // every row is an ordinary token here
    SplitMix64 rng(seed);
    std::vector<Index> perm(static_cast<std::size_t>(inst.z.rows()));
    std::iota(perm.begin(), perm.end(), Index{0});
    shuffle(perm, rng);
    Matrix<double> zp(inst.z.rows(), inst.z.cols());
    for (Index r = 0; r < zp.rows(); ++r) zp.row(r) = inst.z.row(perm[static_cast<std::size_t>(r)]);
    const auto a = attend(inst.z, inst.params);
    const auto b = attend(zp, inst.params);
    CAPTURE(seed);
    for (Index q = 0; q < a.alphas.rows(); ++q)
      for (Index r = 0; r < zp.rows(); ++r)
        CHECK(std::abs(b.alphas(q, r) - a.alphas(q, perm[static_cast<std::size_t>(r)])) < 1e-12);
    CHECK((a.embeddings - b.embeddings).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("with ratio 1 every concept gets the output of its own query") {
  SplitMix64 rng(5);
  const auto p = init_params<double>(3, 5, 6, 3, 4, 1.0);
  const Matrix<double> z = random_tokens(rng, 4, 6);
  const auto grouped = attend(z, p);
  for (int i = 0; i < 5; ++i) {
    CoatParams<double> single = p;
    single.queries = p.queries.row(i);
    single.group_of = {0};
    const auto t = attend(z, single);
    CHECK(t.embeddings.row(0) == grouped.embeddings.row(i));
    CHECK(t.alphas.row(0) == grouped.alphas.row(i));
  }
}

TEST_CASE("concepts in one group share an embedding") {
  SplitMix64 rng(6);
  const auto p = init_params<double>(3, 6, 5, 2, 3, 0.5);
  const auto t = attend(random_tokens(rng, 3, 5), p);
  CHECK(p.group_of == std::vector<int>{0, 0, 1, 1, 2, 2});
  CHECK(t.embeddings.row(0) == t.embeddings.row(1));
  CHECK(t.embeddings.row(4) == t.embeddings.row(5));
}

TEST_CASE("excluding the global token ignores row 0") {
  SplitMix64 rng(7);
  auto p = init_params<double>(2, 3, 4, 2, 2);
  p.include_global = false;
  Matrix<double> z = random_tokens(rng, 4, 4);
  const auto a = attend(z, p);
  z.row(0) *= 100;
  const auto b = attend(z, p);
  CHECK(a.embeddings == b.embeddings);
  CHECK((a.alphas.col(0).array() == 0).all());
}

TEST_CASE("attend rejects bad inputs") {
  auto p = init_params<double>(2, 3, 4, 2, 2);
  CHECK_THROWS_AS(attend(Matrix<double>(Matrix<double>::Zero(3, 5)), p), DataError);
  Matrix<double> z = Matrix<double>::Zero(3, 4);
  z(1, 1) = std::nan("");
  CHECK_THROWS_AS(attend(z, p), NumericError);
  p.include_global = false;
  CHECK_THROWS_AS(attend(Matrix<double>(Matrix<double>::Zero(1, 4)), p), DataError);
}

TEST_CASE("parameter validation") {
  auto p = init_params<double>(2, 4, 4, 2, 2, 0.5);
  SUBCASE("group index out of range") {
    p.group_of[3] = 2;
    CHECK_THROWS_AS(p.validate(), DataError);
  }
  SUBCASE("unused query") {
    p.group_of = {0, 0, 0, 0};
    CHECK_THROWS_AS(p.validate(), DataError);
  }
  SUBCASE("key width mismatch") {
    p.key_proj = Matrix<double>::Zero(4, 3);
    CHECK_THROWS_AS(p.validate(), DataError);
  }
}

TEST_CASE("f32 and f64 attention agree") {
  SplitMix64 rng(8);
  const auto p = init_params<double>(4, 5, 8, 4, 4, 1.0);
  const Matrix<double> z = random_tokens(rng, 6, 8);
  const auto a = attend(z, p);
  const auto b = attend<float>(z.cast<float>(), p.cast<float>());
  CHECK((a.embeddings - b.embeddings.cast<double>()).cwiseAbs().maxCoeff() < 1e-5);
}
