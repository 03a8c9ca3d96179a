// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "coatcbm/cco.hpp"
#include "coatcbm/model.hpp"
#include "coatcbm/tensorio.hpp"

#include "json.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace coatcbm {

struct TrainConfig {
  std::uint64_t seed = 0;
  int epochs = 30;
  int batch_size = 32;
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  double lambda = 0.5;
  double tau = 1.0;
  double tau_bce = 1.0;
  double group_ratio = 1.0;
  int d_k = 64;
  int d_c = 0;  // 0: take from the concept bank
  Precision precision = Precision::f32;
  int eval_every = 1;
  LossMode loss_mode = LossMode::cco;
  bool include_global = true;
  int threads = 1;  // not part of the snapshot; results do not depend on it

  LossConfig loss() const { return {lambda, tau, tau_bce, loss_mode, precision}; }
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
/// Overlays the keys present in `j` onto `base`; unknown keys are an error.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

/// Decoupled weight decay Adam. Bias terms of the head are not decayed.
struct AdamWOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <typename Scalar>
class AdamW {
 public:
  explicit AdamW(AdamWOptions opt) : opt_(opt) {}

  // One step on a single tensor. `step` is the 1-based step counter.
  template <typename ParamT, typename GradT, typename StateT>
  void update(ParamT& theta, const GradT& grad, StateT& m, StateT& v, long step,
              bool decay) const {
    const Scalar b1 = static_cast<Scalar>(opt_.beta1);
    const Scalar b2 = static_cast<Scalar>(opt_.beta2);
    const Scalar lr = static_cast<Scalar>(opt_.lr);
    const Scalar eps = static_cast<Scalar>(opt_.eps);
    const Scalar wd = decay ? static_cast<Scalar>(opt_.weight_decay) : Scalar(0);
    const Scalar c1 = Scalar(1) - static_cast<Scalar>(std::pow(opt_.beta1, step));
    const Scalar c2 = Scalar(1) - static_cast<Scalar>(std::pow(opt_.beta2, step));
    m.array() = b1 * m.array() + (Scalar(1) - b1) * grad.array();
    v.array() = b2 * v.array() + (Scalar(1) - b2) * grad.array().square();
    theta.array() -=
        lr * ((m.array() / c1) / ((v.array() / c2).sqrt() + eps) + wd * theta.array());
  }

  void step(Model<Scalar>& model, const Gradients<Scalar>& g) {
    if (!g.all_finite()) throw NumericError("adamw: non-finite gradients");
    if (!initialized_) {
      state_m_ = Gradients<Scalar>::zeros_like(model);
      state_v_ = Gradients<Scalar>::zeros_like(model);
      initialized_ = true;
    }
    ++t_;
    update(model.coat.queries, g.queries, state_m_.queries, state_v_.queries, t_, true);
    update(model.coat.key_proj, g.key_proj, state_m_.key_proj, state_v_.key_proj, t_, true);
    update(model.coat.value_proj, g.value_proj, state_m_.value_proj, state_v_.value_proj, t_,
           true);
    update(model.head.weight, g.head_weight, state_m_.head_weight, state_v_.head_weight, t_,
           true);
    update(model.head.bias, g.head_bias, state_m_.head_bias, state_v_.head_bias, t_, false);
  }

  long steps() const { return t_; }

 private:
  AdamWOptions opt_;
  Gradients<Scalar> state_m_;
  Gradients<Scalar> state_v_;
  long t_ = 0;
  bool initialized_ = false;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0;  // mean over samples
  double val_accuracy = -1;  // -1 when not evaluated this epoch
  double val_loss = -1;
};

/// Best-validation snapshot of a training run. Parameters are kept at the
/// on-disk precision (f32).
struct Checkpoint {
  Model<float> model;
  TrainConfig config;
  int epoch = 0;
  double val_accuracy = 0;
  double val_loss = 0;  // tie-break among equal val_accuracy
  std::string hash;
  std::vector<EpochLog> history;

  TensorBundle to_bundle() const;
  std::string compute_hash() const;
};

Checkpoint train(const Dataset& train_set, const Dataset& val_set, const ConceptBank& bank,
                 const TrainConfig& cfg);

/// Writes the parameter bundle, `coat.json`, `checkpoint.json` and a copy of
/// the concept bank under `bank/`.
void save_checkpoint(const Checkpoint& ckpt, const ConceptBank& bank, const fs::path& dir);

struct LoadedCheckpoint {
  Checkpoint checkpoint;
  ConceptBank bank;
};
LoadedCheckpoint load_checkpoint(const fs::path& dir);

/// Concept scores and predictions for every sample of a dataset.
struct ScoredSet {
  Matrix<double> scores;  // M x n
  std::vector<int> predictions;
  std::vector<int> labels;
};

ScoredSet score_dataset(const Dataset& ds, const Model<float>& model, const ConceptBank& bank);

struct EvalReport {
  double accuracy = 0;
  std::vector<double> per_class_accuracy;  // NaN for classes without samples
  double mean_positive_score = 0;
  double mean_negative_score = 0;
};

EvalReport evaluate(const ScoredSet& scored, const ConceptBank& bank);
EvalReport evaluate(const Dataset& ds, const Model<float>& model, const ConceptBank& bank);

}  // namespace coatcbm
