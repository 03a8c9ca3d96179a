// SPDX-License-Identifier: Apache-2.0
#include "coatcbm/trainer.hpp"

#include "coatcbm/hash.hpp"
#include "coatcbm/rng.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <tuple>

namespace coatcbm {

using json = nlohmann::json;

void TrainConfig::validate() const {
  if (epochs < 0) throw DataError("epochs must be >= 0");
  if (batch_size < 1) throw DataError("batch_size must be >= 1");
  if (!(lr > 0)) throw DataError("lr must be > 0");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
    throw DataError("betas must lie in [0, 1)");
  if (!(eps > 0)) throw DataError("eps must be > 0");
  if (!(weight_decay >= 0)) throw DataError("weight_decay must be >= 0");
  if (d_k < 1) throw DataError("d_k must be >= 1");
  if (d_c < 0) throw DataError("d_c must be >= 0");
  if (eval_every < 1) throw DataError("eval_every must be >= 1");
  if (threads < 1) throw DataError("threads must be >= 1");
  query_count(1, group_ratio);
  loss().validate();
}

json to_json(const TrainConfig& c) {
  return {{"seed", c.seed},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"betas", {c.beta1, c.beta2}},
          {"eps", c.eps},
          {"weight_decay", c.weight_decay},
          {"lambda", c.lambda},
          {"tau", c.tau},
          {"tau_bce", c.tau_bce},
          {"group_ratio", c.group_ratio},
          {"d_k", c.d_k},
          {"d_c", c.d_c},
          {"precision", to_string(c.precision)},
          {"eval_every", c.eval_every},
          {"loss_mode", to_string(c.loss_mode)},
          {"include_global", c.include_global}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  if (!j.is_object()) throw DataError("train config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "epochs") c.epochs = v.get<int>();
      else if (key == "batch_size") c.batch_size = v.get<int>();
      else if (key == "lr") c.lr = v.get<double>();
      else if (key == "betas") {
        const auto b = v.get<std::vector<double>>();
        if (b.size() != 2) throw DataError("betas must have two entries");
        c.beta1 = b[0];
        c.beta2 = b[1];
      } else if (key == "eps") c.eps = v.get<double>();
      else if (key == "weight_decay") c.weight_decay = v.get<double>();
      else if (key == "lambda") c.lambda = v.get<double>();
      else if (key == "tau") c.tau = v.get<double>();
      else if (key == "tau_bce") c.tau_bce = v.get<double>();
      else if (key == "group_ratio") c.group_ratio = v.get<double>();
      else if (key == "d_k") c.d_k = v.get<int>();
      else if (key == "d_c") c.d_c = v.get<int>();
      else if (key == "precision") c.precision = parse_precision(v.get<std::string>());
      else if (key == "eval_every") c.eval_every = v.get<int>();
      else if (key == "loss_mode") c.loss_mode = parse_loss_mode(v.get<std::string>());
      else if (key == "include_global") c.include_global = v.get<bool>();
      else if (key == "threads") c.threads = v.get<int>();
      else throw DataError("unknown train config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed train config: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------

ScoredSet score_dataset(const Dataset& ds, const Model<float>& model, const ConceptBank& bank) {
  const int n = bank.n_concepts();
  if (model.coat.n_concepts() != n || model.head.weight.cols() != n)
    throw DataError("model and concept bank disagree on the concept count");
  if (model.coat.dim() != ds.dim)
    throw DataError("model expects feature dim " + std::to_string(model.coat.dim()) +
                    ", dataset has " + std::to_string(ds.dim));
  if (model.head.weight.rows() != ds.n_classes)
    throw DataError("model head has " + std::to_string(model.head.weight.rows()) +
                    " classes, dataset has " + std::to_string(ds.n_classes));
  ScoredSet out;
  out.scores.resize(static_cast<Index>(ds.size()), n);
  out.labels = ds.labels;
  out.predictions.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Vector<float> s = image_scores(ds.features[i], model.coat, bank.text_embeddings);
    out.scores.row(static_cast<Index>(i)) = s.cast<double>().transpose();
    out.predictions.push_back(predict(model.head, s).label);
  }
  return out;
}

EvalReport evaluate(const ScoredSet& scored, const ConceptBank& bank) {
  EvalReport r;
  const auto m = scored.labels.size();
  const int n_classes = bank.n_classes();
  std::vector<int> hits(static_cast<std::size_t>(n_classes), 0), totals(hits.size(), 0);
  double pos_sum = 0, neg_sum = 0;
  std::size_t pos_count = 0, neg_count = 0, correct = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const int y = scored.labels[i];
    const bool ok = scored.predictions[i] == y;
    correct += ok;
    hits[static_cast<std::size_t>(y)] += ok;
    totals[static_cast<std::size_t>(y)] += 1;
    const auto mask = bank.positive_mask(y);
    for (Index c = 0; c < scored.scores.cols(); ++c) {
      if (mask[static_cast<std::size_t>(c)]) {
        pos_sum += scored.scores(static_cast<Index>(i), c);
        ++pos_count;
      } else {
        neg_sum += scored.scores(static_cast<Index>(i), c);
        ++neg_count;
      }
    }
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  r.accuracy = m ? static_cast<double>(correct) / static_cast<double>(m) : nan;
  for (int y = 0; y < n_classes; ++y) {
    const auto k = static_cast<std::size_t>(y);
    r.per_class_accuracy.push_back(totals[k] ? static_cast<double>(hits[k]) / totals[k] : nan);
  }
  r.mean_positive_score = pos_count ? pos_sum / static_cast<double>(pos_count) : nan;
  r.mean_negative_score = neg_count ? neg_sum / static_cast<double>(neg_count) : nan;
  return r;
}

EvalReport evaluate(const Dataset& ds, const Model<float>& model, const ConceptBank& bank) {
  return evaluate(score_dataset(ds, model, bank), bank);
}

// ---------------------------------------------------------------------------

TensorBundle Checkpoint::to_bundle() const {
  return {{"Q", to_tensor(model.coat.queries)},
          {"W_K", to_tensor(model.coat.key_proj)},
          {"W_V", to_tensor(model.coat.value_proj)},
          {"head_W", to_tensor(model.head.weight)},
          {"head_b", to_tensor_1d(model.head.bias)}};
}

namespace {

json coat_sidecar(const CoatParams<float>& p) {
  return {{"group_of", p.group_of}, {"n_queries", p.n_queries()},
          {"include_global", p.include_global}};
}

}  // namespace

std::string Checkpoint::compute_hash() const {
  Sha256 h;
  hash_bundle(h, to_bundle());
  h.update(coat_sidecar(model.coat).dump());
  h.update(to_json(config).dump());
  return h.hex_digest();
}

namespace {

template <typename Scalar>
Checkpoint train_impl(const Dataset& train_set, const Dataset& val_set, const ConceptBank& bank,
                      const TrainConfig& cfg) {
  const int n = bank.n_concepts();
  const int d_c = bank.embedding_dim();
  const Matrix<Scalar> text = bank.text_embeddings.cast<Scalar>();

  std::vector<Matrix<Scalar>> features;
  features.reserve(train_set.size());
  for (const auto& z : train_set.features) features.push_back(z.template cast<Scalar>());

  Model<Scalar> model{init_params<Scalar>(cfg.seed, n, train_set.dim, cfg.d_k, d_c,
                                          cfg.group_ratio),
                      Head<Scalar>::zeros(bank.n_classes(), n)};
  model.coat.include_global = cfg.include_global;

  Checkpoint best;
  best.config = cfg;
  best.model = model.template cast<float>();
  best.epoch = 0;
  const auto loss_cfg = cfg.loss();
  auto validate = [&](const Model<float>& snapshot) {
    return std::make_pair(
        evaluate(val_set, snapshot, bank).accuracy,
        mean_objective(val_set.features, val_set.labels, snapshot, bank.text_embeddings, bank,
                       loss_cfg));
  };
  std::tie(best.val_accuracy, best.val_loss) = validate(best.model);
  best.history.push_back(
      {0, std::numeric_limits<double>::quiet_NaN(), best.val_accuracy, best.val_loss});

  AdamW<Scalar> opt({cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay});
  SplitMix64 shuffle_rng(derive_seed(cfg.seed, 1));
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle(order, shuffle_rng);
    double loss_sum = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t len =
          std::min(order.size() - start, static_cast<std::size_t>(cfg.batch_size));
      const std::span<const std::size_t> batch(order.data() + start, len);
      const auto res =
          total_loss(features, train_set.labels, batch, model, text, bank, loss_cfg, cfg.threads);
      loss_sum += static_cast<double>(res.loss) * static_cast<double>(len);
      opt.step(model, res.grads);
    }
    EpochLog log{epoch, loss_sum / static_cast<double>(order.size()), -1.0, -1.0};
    if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
      const auto snapshot = model.template cast<float>();
      std::tie(log.val_accuracy, log.val_loss) = validate(snapshot);
      // Highest val accuracy; equal accuracy goes to the lower val objective,
      // remaining ties to the earliest epoch.
      const bool better = log.val_accuracy > best.val_accuracy ||
                          (log.val_accuracy == best.val_accuracy && log.val_loss < best.val_loss);
      if (better) {
        best.model = snapshot;
        best.epoch = epoch;
        best.val_accuracy = log.val_accuracy;
        best.val_loss = log.val_loss;
      }
    }
    best.history.push_back(log);
  }
  best.hash = best.compute_hash();
  return best;
}

}  // namespace

Checkpoint train(const Dataset& train_set, const Dataset& val_set, const ConceptBank& bank,
                 const TrainConfig& cfg) {
  cfg.validate();
  train_set.validate();
  val_set.validate();
  bank.validate();
  if (train_set.size() == 0 || val_set.size() == 0)
    throw DataError("train: training and validation sets must be nonempty");
  if (train_set.n_classes != bank.n_classes() || val_set.n_classes != bank.n_classes())
    throw DataError("train: dataset class count does not match the concept bank");
  if (val_set.dim != train_set.dim) throw DataError("train: train/val feature dims differ");
  if (cfg.d_c != 0 && cfg.d_c != bank.embedding_dim())
    throw DataError("train: d_c = " + std::to_string(cfg.d_c) +
                    " but the concept bank embeds in " + std::to_string(bank.embedding_dim()));
  if (cfg.precision == Precision::f64) return train_impl<double>(train_set, val_set, bank, cfg);
  return train_impl<float>(train_set, val_set, bank, cfg);
}

// ---------------------------------------------------------------------------

void save_checkpoint(const Checkpoint& ckpt, const ConceptBank& bank, const fs::path& dir) {
  write_bundle(ckpt.to_bundle(), dir);
  {
    std::ofstream out(dir / "coat.json");
    out << coat_sidecar(ckpt.model.coat).dump(2) << '\n';
  }
  json history = json::array();
  for (const auto& h : ckpt.history) {
    json e = {{"epoch", h.epoch}};
    e["train_loss"] = std::isfinite(h.train_loss) ? json(h.train_loss) : json(nullptr);
    e["val_accuracy"] = h.val_accuracy >= 0 ? json(h.val_accuracy) : json(nullptr);
    e["val_loss"] = h.val_loss >= 0 ? json(h.val_loss) : json(nullptr);
    history.push_back(e);
  }
  json meta = {{"epoch", ckpt.epoch},
               {"val_accuracy", ckpt.val_accuracy},
               {"val_loss", ckpt.val_loss},
               {"config", to_json(ckpt.config)},
               {"hash", ckpt.hash},
               {"history", history}};
  std::ofstream out(dir / "checkpoint.json");
  out << meta.dump(2) << '\n';
  if (!out) throw DataError("cannot write checkpoint metadata in " + dir.string());
  write_concept_bank(bank, dir / "bank");
}

LoadedCheckpoint load_checkpoint(const fs::path& dir) {
  LoadedCheckpoint out;
  auto& ck = out.checkpoint;
  auto read = [](const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw DataError("cannot open " + p.string());
    try {
      return json::parse(in);
    } catch (const json::exception& e) {
      throw DataError("malformed JSON in " + p.string() + ": " + e.what());
    }
  };
  const json meta = read(dir / "checkpoint.json");
  const json sidecar = read(dir / "coat.json");
  const auto bundle = read_bundle(dir);
  try {
    ck.epoch = meta.at("epoch").get<int>();
    ck.val_accuracy = meta.at("val_accuracy").get<double>();
    ck.val_loss = meta.value("val_loss", 0.0);
    ck.config = train_config_from_json(meta.at("config"));
    ck.hash = meta.at("hash").get<std::string>();
    ck.model.coat.group_of = sidecar.at("group_of").get<std::vector<int>>();
    ck.model.coat.include_global = sidecar.value("include_global", true);
  } catch (const json::exception& e) {
    throw DataError("malformed checkpoint metadata in " + dir.string() + ": " + e.what());
  }
  ck.model.coat.queries = to_matrix(require_entry(bundle, "Q"), "Q");
  ck.model.coat.key_proj = to_matrix(require_entry(bundle, "W_K"), "W_K");
  ck.model.coat.value_proj = to_matrix(require_entry(bundle, "W_V"), "W_V");
  ck.model.head.weight = to_matrix(require_entry(bundle, "head_W"), "head_W");
  ck.model.head.bias = to_vector(require_entry(bundle, "head_b"), "head_b");
  ck.model.coat.validate();
  if (ck.compute_hash() != ck.hash)
    throw DataError("checkpoint hash mismatch in " + dir.string() + "; files were modified");
  out.bank = load_concept_bank(dir / "bank");
  if (out.bank.n_concepts() != ck.model.coat.n_concepts() ||
      out.bank.embedding_dim() != ck.model.coat.value_dim())
    throw DataError("checkpoint bank does not match its parameters");
  return out;
}

}  // namespace coatcbm
