// SPDX-License-Identifier: Apache-2.0
#include "coatcbm/gradcheck.hpp"

#include "coatcbm/cco.hpp"
#include "coatcbm/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace coatcbm {

GradcheckDims GradcheckDims::parse(const std::string& name) {
  if (name == "small") return {};
  if (name == "medium") return {12, 16, 8, 8, 6, 4, 4};
  throw DataError("unknown gradcheck dims '" + name + "' (expected small or medium)");
}

namespace {

int draw(SplitMix64& rng, int lo, int hi) {
  return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
}

void fill_normal(Matrix<double>& m, SplitMix64& rng) {
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) m(r, c) = rng.normal();
}

}  // namespace

GradcheckResult gradcheck(std::uint64_t seed, const GradcheckDims& dims, double lambda,
                          double step) {
  SplitMix64 rng(derive_seed(seed, 7));
  const int n = draw(rng, 2, std::max(2, dims.max_concepts));
  const int d = draw(rng, 1, dims.max_dim);
  const int d_k = draw(rng, 1, dims.max_key_dim);
  const int d_c = draw(rng, 1, dims.max_text_dim);
  const int n_patches = draw(rng, 1, dims.max_patches);
  const int n_classes = draw(rng, 2, std::max(2, dims.max_classes));
  const int batch = draw(rng, 1, dims.max_batch);

  ConceptBank bank;
  for (int i = 0; i < n; ++i) bank.concepts.push_back("concept_" + std::to_string(i));
  for (int y = 0; y < n_classes; ++y) {
    bank.class_names.push_back("class_" + std::to_string(y));
    std::vector<int> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), 0);
    shuffle(all, rng);
    all.resize(static_cast<std::size_t>(draw(rng, 1, n)));
    std::sort(all.begin(), all.end());
    bank.class_to_concepts.push_back(all);
  }
  Matrix<double> text(n, d_c);
  fill_normal(text, rng);
  bank.text_embeddings = text.cast<float>();

  Model<double> model{init_params<double>(rng.next(), n, d, d_k, d_c, 1.0),
                      Head<double>::zeros(n_classes, n)};
  fill_normal(model.head.weight, rng);
  for (Index y = 0; y < model.head.bias.size(); ++y) model.head.bias(y) = rng.normal();

  std::vector<Matrix<double>> features;
  std::vector<int> labels;
  for (int b = 0; b < batch; ++b) {
    Matrix<double> z(n_patches + 1, d);
    fill_normal(z, rng);
    features.push_back(z);
    labels.push_back(draw(rng, 0, n_classes - 1));
  }
  std::vector<std::size_t> order(features.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  LossConfig cfg;
  cfg.lambda = lambda;
  cfg.precision = Precision::f64;
  const Matrix<double> text_d = bank.text_embeddings.cast<double>();
  // Differences are taken in extended precision so that rounding noise in the
  // objective does not swamp small gradient coordinates.
  using Wide = long double;
  std::vector<Matrix<Wide>> wide_features;
  for (const auto& z : features) wide_features.push_back(z.cast<Wide>());
  const Matrix<Wide> wide_text = text_d.cast<Wide>();
  auto objective = [&] {
    const Model<Wide> wide = model.cast<Wide>();
    return static_cast<double>(total_loss(wide_features, labels,
                                          std::span<const std::size_t>(order), wide, wide_text,
                                          bank, cfg)
                                   .loss);
  };
  const auto analytic = total_loss(features, labels, std::span<const std::size_t>(order), model,
                                   text_d, bank, cfg)
                            .grads;

  GradcheckResult result;
  auto check = [&](auto& param, const auto& grad, const char* name) {
    for (Index r = 0; r < param.rows(); ++r) {
      for (Index c = 0; c < param.cols(); ++c) {
        const double saved = param(r, c);
        param(r, c) = saved + step;
        const double plus = objective();
        param(r, c) = saved - step;
        const double minus = objective();
        param(r, c) = saved;
        const double fd = (plus - minus) / (2 * step);
        const double a = grad(r, c);
        const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8});
        ++result.coordinates;
        if (!(rel <= result.max_rel_err)) {
          result.max_rel_err = std::isnan(rel) ? INFINITY : rel;
          result.worst = std::string(name) + "[" + std::to_string(r) + "," + std::to_string(c) + "]";
        }
      }
    }
  };
  check(model.coat.queries, analytic.queries, "Q");
  check(model.coat.key_proj, analytic.key_proj, "W_K");
  check(model.coat.value_proj, analytic.value_proj, "W_V");
  check(model.head.weight, analytic.head_weight, "head_W");
  check(model.head.bias, analytic.head_bias, "head_b");
  return result;
}

}  // namespace coatcbm
