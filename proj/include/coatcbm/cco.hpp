// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "coatcbm/coat.hpp"
#include "coatcbm/model.hpp"
#include "coatcbm/scoring.hpp"
#include "coatcbm/tensorio.hpp"

#include <cmath>
#include <span>
#include <string>
#include <thread>
#include <vector>

namespace coatcbm {

/// Partition of concept indices into the positives of a class and the rest.
struct PosNegSplit {
  std::vector<int> positives;
  std::vector<int> negatives;

  static PosNegSplit from_mask(const std::vector<char>& mask) {
    PosNegSplit s;
    for (std::size_t i = 0; i < mask.size(); ++i)
      (mask[i] ? s.positives : s.negatives).push_back(static_cast<int>(i));
    return s;
  }
  static PosNegSplit for_class(const ConceptBank& bank, int label) {
    return from_mask(bank.positive_mask(label));
  }
};

enum class LossMode { cco, bce, none };

inline std::string to_string(LossMode m) {
  switch (m) {
    case LossMode::cco: return "cco";
    case LossMode::bce: return "bce";
    case LossMode::none: return "none";
  }
  return "cco";
}

inline LossMode parse_loss_mode(const std::string& s) {
  if (s == "cco") return LossMode::cco;
  if (s == "bce") return LossMode::bce;
  if (s == "none") return LossMode::none;
  throw DataError("unknown loss_mode '" + s + "' (expected cco, bce or none)");
}

struct LossConfig {
  double lambda = 0.5;
  double tau = 1.0;
  double tau_bce = 1.0;
  LossMode mode = LossMode::cco;
  Precision precision = Precision::f32;

  void validate() const {
    if (!(tau > 0)) throw DataError("tau must be > 0");
    if (!(tau_bce > 0)) throw DataError("tau_bce must be > 0");
    if (!(lambda >= 0)) throw DataError("lambda must be >= 0");
  }
  // The concept term is skipped outright when it carries zero weight.
  bool concept_term_active() const { return mode != LossMode::none && lambda != 0.0; }
};

namespace detail {

template <typename Scalar>
Scalar log_sum_exp(const Vector<Scalar>& x, const std::vector<int>& idx, Scalar shift) {
  Scalar acc = 0;
  for (int i : idx) acc += std::exp(x(i) - shift);
  return shift + std::log(acc);
}

}  // namespace detail

/// Multi-positive contrastive loss over the concept scores:
///   -log( sum_pos exp(s/tau) / sum_all exp(s/tau) )
/// evaluated in log space with max subtraction in both sums. Returns 0
/// when there are no positives. When `grad` is non-null it receives dL/ds.
template <typename Scalar>
Scalar cco_loss(const Vector<Scalar>& scores, const PosNegSplit& split, Scalar tau,
                Vector<Scalar>* grad = nullptr) {
  if (grad) grad->setZero(scores.size());
  if (split.positives.empty()) return Scalar(0);
  if (split.negatives.empty()) return Scalar(0);
  const Vector<Scalar> x = scores / tau;
  const Scalar m = x.maxCoeff();
  // The positive sum gets its own shift: with a small tau every positive may
  // sit far below the overall maximum and would underflow against it.
  Scalar m_pos = x(split.positives.front());
  for (int i : split.positives) m_pos = std::max(m_pos, x(i));
  const Scalar lse_pos = detail::log_sum_exp(x, split.positives, m_pos);
  Scalar all_acc = 0;
  for (Index i = 0; i < x.size(); ++i) all_acc += std::exp(x(i) - m);
  const Scalar lse_all = m + std::log(all_acc);
  if (grad) {
    for (Index i = 0; i < x.size(); ++i) (*grad)(i) = std::exp(x(i) - lse_all) / tau;
    for (int i : split.positives) (*grad)(i) -= std::exp(x(i) - lse_pos) / tau;
  }
  return lse_all - lse_pos;
}

/// Softmax cross-entropy of `logits` against class `label`.
template <typename Scalar>
Scalar cls_loss(const Vector<Scalar>& logits, int label, Vector<Scalar>* grad = nullptr) {
  if (label < 0 || label >= logits.size())
    throw DataError("cls_loss: label " + std::to_string(label) + " out of range");
  const Scalar m = logits.maxCoeff();
  const Scalar lse = m + std::log((logits.array() - m).exp().sum());
  if (grad) {
    *grad = (logits.array() - lse).exp().matrix();
    (*grad)(label) -= Scalar(1);
  }
  return lse - logits(label);
}

/// Mean binary cross-entropy between sigmoid(s / tau_bce) and the positive
/// indicator, computed as softplus(x) - y x.
template <typename Scalar>
Scalar bce_loss(const Vector<Scalar>& scores, const PosNegSplit& split, Scalar tau_bce,
                Vector<Scalar>* grad = nullptr) {
  const Index n = scores.size();
  std::vector<char> target(static_cast<std::size_t>(n), 0);
  for (int i : split.positives) target[static_cast<std::size_t>(i)] = 1;
  Scalar total = 0;
  if (grad) grad->resize(n);
  for (Index i = 0; i < n; ++i) {
    const Scalar x = scores(i) / tau_bce;
    const Scalar y = target[static_cast<std::size_t>(i)] ? Scalar(1) : Scalar(0);
    const Scalar softplus = std::max(x, Scalar(0)) + std::log1p(std::exp(-std::abs(x)));
    total += softplus - y * x;
    if (grad) {
      const Scalar sig = x >= 0 ? Scalar(1) / (Scalar(1) + std::exp(-x))
                                : std::exp(x) / (Scalar(1) + std::exp(x));
      (*grad)(i) = (sig - y) / (tau_bce * static_cast<Scalar>(n));
    }
  }
  return total / static_cast<Scalar>(n);
}

/// Partial derivatives of the objective with respect to every trainable tensor.
template <typename Scalar>
struct Gradients {
  Matrix<Scalar> queries;
  Matrix<Scalar> key_proj;
  Matrix<Scalar> value_proj;
  Matrix<Scalar> head_weight;
  Vector<Scalar> head_bias;

  static Gradients zeros_like(const Model<Scalar>& m) {
    return {Matrix<Scalar>::Zero(m.coat.queries.rows(), m.coat.queries.cols()),
            Matrix<Scalar>::Zero(m.coat.key_proj.rows(), m.coat.key_proj.cols()),
            Matrix<Scalar>::Zero(m.coat.value_proj.rows(), m.coat.value_proj.cols()),
            Matrix<Scalar>::Zero(m.head.weight.rows(), m.head.weight.cols()),
            Vector<Scalar>::Zero(m.head.bias.size())};
  }
  void set_zero() {
    queries.setZero();
    key_proj.setZero();
    value_proj.setZero();
    head_weight.setZero();
    head_bias.setZero();
  }
  Gradients& operator+=(const Gradients& o) {
    queries += o.queries;
    key_proj += o.key_proj;
    value_proj += o.value_proj;
    head_weight += o.head_weight;
    head_bias += o.head_bias;
    return *this;
  }
  Gradients& operator/=(Scalar c) {
    queries /= c;
    key_proj /= c;
    value_proj /= c;
    head_weight /= c;
    head_bias /= c;
    return *this;
  }
  bool all_finite() const {
    return queries.allFinite() && key_proj.allFinite() && value_proj.allFinite() &&
           head_weight.allFinite() && head_bias.allFinite();
  }
};

struct BatchStats {
  double cls_loss = 0;      // mean over batch
  double concept_loss = 0;  // mean over batch (cco or bce, unweighted)
  int skipped_cco = 0;      // samples whose class had no positives
  int correct = 0;
};

template <typename Scalar>
struct LossResult {
  Scalar loss = 0;
  Gradients<Scalar> grads;
  BatchStats stats;
};

/// Per-sample objective cls + lambda * concept_loss and its exact gradient,
/// written into `g` (overwritten).
template <typename Scalar>
struct SampleResult {
  Scalar loss = 0;
  Scalar cls = 0;
  Scalar concept_loss = 0;
  bool skipped = false;
  bool correct = false;
};

template <typename Scalar>
SampleResult<Scalar> sample_loss_grad(const Matrix<Scalar>& features, int label,
                                      const Model<Scalar>& model, const Matrix<Scalar>& text,
                                      const PosNegSplit& split, const LossConfig& cfg,
                                      Gradients<Scalar>& g) {
  const auto& coat = model.coat;
  const auto trace = attend(features, coat);
  const Vector<Scalar> s = concept_scores(trace.embeddings, text);
  const auto pred = predict(model.head, s);

  SampleResult<Scalar> r;
  Vector<Scalar> dlogits;
  r.cls = cls_loss(pred.logits, label, &dlogits);
  r.correct = pred.label == label;
  r.loss = r.cls;

  g.head_weight.noalias() = dlogits * s.transpose();
  g.head_bias = dlogits;
  Vector<Scalar> ds = model.head.weight.transpose() * dlogits;

  if (cfg.concept_term_active()) {
    const Scalar lambda = static_cast<Scalar>(cfg.lambda);
    Vector<Scalar> dconcept;
    if (cfg.mode == LossMode::cco) {
      r.skipped = split.positives.empty();
      r.concept_loss = cco_loss(s, split, static_cast<Scalar>(cfg.tau), &dconcept);
    } else {
      r.concept_loss = bce_loss(s, split, static_cast<Scalar>(cfg.tau_bce), &dconcept);
    }
    r.loss += lambda * r.concept_loss;
    ds += lambda * dconcept;
  }

  // cosine backward, accumulated per query group
  Matrix<Scalar> dquery_emb = Matrix<Scalar>::Zero(coat.n_queries(), coat.value_dim());
  for (Index i = 0; i < s.size(); ++i) {
    const auto e = trace.embeddings.row(i);
    const auto t = text.row(i);
    const Scalar ne = e.norm();
    const Scalar nt = t.norm();
    if (ne < Scalar(kMinNorm) || nt < Scalar(kMinNorm)) continue;
    const auto q = coat.group_of[static_cast<std::size_t>(i)];
    dquery_emb.row(q) += ds(i) * (t / (ne * nt) - (s(i) / (ne * ne)) * e);
  }

  // attention backward
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(coat.key_dim()));
  const Index n_tokens = trace.keys.rows();
  Matrix<Scalar> dkeys = Matrix<Scalar>::Zero(n_tokens, coat.key_dim());
  Matrix<Scalar> dvalues = Matrix<Scalar>::Zero(n_tokens, coat.value_dim());
  for (Index q = 0; q < coat.n_queries(); ++q) {
    const Vector<Scalar> a = trace.alphas.row(q).tail(n_tokens).transpose();
    const Vector<Scalar> de = dquery_emb.row(q).transpose();
    dvalues.noalias() += a * de.transpose();
    const Vector<Scalar> dalpha = trace.values * de;
    const Vector<Scalar> dlogit = a.cwiseProduct(dalpha) -
                                  a * a.dot(dalpha);
    dkeys.noalias() += scale * dlogit * coat.queries.row(q);
    g.queries.row(q).noalias() = scale * (trace.keys.transpose() * dlogit).transpose();
  }
  const auto tokens = features.bottomRows(features.rows() - trace.first_token);
  g.key_proj.noalias() = tokens.transpose() * dkeys;
  g.value_proj.noalias() = tokens.transpose() * dvalues;
  return r;
}

/// Mean over the selected samples of cls_loss + lambda * concept loss, with
/// exact analytic gradients. Per-sample gradients are computed independently
/// (optionally on `threads` workers) and summed in ascending position order
/// within `batch`, so the result does not depend on the thread count.
template <typename Scalar>
LossResult<Scalar> total_loss(const std::vector<Matrix<Scalar>>& features,
                              const std::vector<int>& labels, std::span<const std::size_t> batch,
                              const Model<Scalar>& model, const Matrix<Scalar>& text,
                              const ConceptBank& bank, const LossConfig& cfg, int threads = 1) {
  if (batch.empty()) throw DataError("total_loss: empty batch");
  if (text.rows() != model.coat.n_concepts() || text.cols() != model.coat.value_dim())
    throw DataError("total_loss: text embeddings do not match the attention module");
  if (model.head.weight.cols() != model.coat.n_concepts())
    throw DataError("total_loss: head width does not match concept count");

  const std::size_t count = batch.size();
  std::vector<SampleResult<Scalar>> results(count);
  const std::size_t workers =
      std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(threads), count));

  auto run_one = [&](std::size_t k, Gradients<Scalar>& g) {
    const std::size_t idx = batch[k];
    const int y = labels[idx];
    results[k] = sample_loss_grad(features[idx], y, model, text, PosNegSplit::for_class(bank, y),
                                  cfg, g);
    if (!std::isfinite(static_cast<double>(results[k].loss)) || !g.all_finite())
      throw NumericError("non-finite loss or gradient at sample " + std::to_string(idx));
  };

  LossResult<Scalar> out;
  out.grads = Gradients<Scalar>::zeros_like(model);
  if (workers == 1) {
    auto g = Gradients<Scalar>::zeros_like(model);
    for (std::size_t k = 0; k < count; ++k) {
      run_one(k, g);
      out.grads += g;
    }
  } else {
    std::vector<Gradients<Scalar>> per(count, Gradients<Scalar>::zeros_like(model));
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t k = w; k < count; k += workers) run_one(k, per[k]);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
    for (std::size_t k = 0; k < count; ++k) out.grads += per[k];
  }

  Scalar loss_sum = 0;
  double cls_sum = 0, concept_sum = 0;
  for (const auto& r : results) {
    loss_sum += r.loss;
    cls_sum += static_cast<double>(r.cls);
    concept_sum += static_cast<double>(r.concept_loss);
    out.stats.skipped_cco += r.skipped ? 1 : 0;
    out.stats.correct += r.correct ? 1 : 0;
  }
  const auto denom = static_cast<Scalar>(count);
  out.loss = loss_sum / denom;
  out.grads /= denom;
  out.stats.cls_loss = cls_sum / static_cast<double>(count);
  out.stats.concept_loss = concept_sum / static_cast<double>(count);
  return out;
}

/// Forward-only mean of cls_loss + lambda * concept loss over a dataset.
template <typename Scalar>
double mean_objective(const std::vector<Matrix<Scalar>>& features, const std::vector<int>& labels,
                      const Model<Scalar>& model, const Matrix<Scalar>& text,
                      const ConceptBank& bank, const LossConfig& cfg) {
  if (labels.empty()) return 0.0;
  double total = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const Vector<Scalar> s = image_scores(features[i], model.coat, text);
    double loss = static_cast<double>(cls_loss(predict(model.head, s).logits, labels[i]));
    if (cfg.concept_term_active()) {
      const auto split = PosNegSplit::for_class(bank, labels[i]);
      const Scalar concept_term =
          cfg.mode == LossMode::cco ? cco_loss(s, split, static_cast<Scalar>(cfg.tau))
                                    : bce_loss(s, split, static_cast<Scalar>(cfg.tau_bce));
      loss += cfg.lambda * static_cast<double>(concept_term);
    }
    total += loss;
  }
  return total / static_cast<double>(labels.size());
}

}  // namespace coatcbm
