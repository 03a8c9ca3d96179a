// SPDX-License-Identifier: Apache-2.0
//
// coatcbm command line. Every command prints `key=value` lines on stdout,
// diagnostics on stderr, and records a run manifest with input and output
// hashes. Exit codes: 0 ok, 1 usage, 2 data, 3 numeric.

#include "coatcbm/gradcheck.hpp"
#include "coatcbm/hash.hpp"
#include "coatcbm/interp.hpp"
#include "coatcbm/judge.hpp"
#include "coatcbm/manifest.hpp"
#include "coatcbm/synth.hpp"
#include "coatcbm/trainer.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace {

using namespace coatcbm;
using nlohmann::json;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonOptions {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out;
  std::string manifest;
  int threads = 1;
};

struct Options {
  CommonOptions common;
  // data locations
  std::string data, train, val, bank, ckpt, oracle, judge;
  // train overrides
  std::optional<int> epochs, batch_size, d_k, eval_every;
  std::optional<double> lr, lambda, tau, tau_bce, group_ratio, weight_decay;
  std::optional<std::string> loss_mode, precision;
  // explain / intervene
  int index = 0;
  int k = 5;
  std::vector<std::string> edits;
  // gradcheck
  std::string dims = "small";
  int count = 1;
  double tolerance = 1e-4;
};

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

template <typename T>
void print(const std::string& key, const T& value) {
  std::cout << key << '=' << value << '\n';
}

void print(const std::string& key, double value) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", value);
  std::cout << key << '=' << buf << '\n';
}

std::string join(const Vector<double>& v) {
  std::ostringstream os;
  char buf[64];
  for (Index i = 0; i < v.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.9g", v(i));
    os << (i ? "," : "") << buf;
  }
  return os.str();
}

const Dataset& require_sample(const Dataset& ds, int index) {
  if (index < 0 || static_cast<std::size_t>(index) >= ds.size())
    throw DataError("sample index " + std::to_string(index) + " out of range [0, " +
                    std::to_string(ds.size()) + ")");
  return ds;
}

// The manifest goes inside the output directory, next to an output file, or
// to an explicit --manifest path. Without any of those it is printed inline.
void emit_manifest(RunManifest& m, const CommonOptions& c,
                   std::chrono::steady_clock::time_point start) {
  m.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  fs::path target;
  if (!c.manifest.empty()) target = c.manifest;
  else if (!c.out.empty() && fs::is_directory(c.out)) target = fs::path(c.out) / "run_manifest.json";
  else if (!c.out.empty()) target = c.out + ".manifest.json";
  if (target.empty()) {
    print("run_manifest", m.to_json().dump());
  } else {
    m.write(target);
    print("run_manifest", target.string());
  }
}

fs::path require_out(const CommonOptions& c, const char* command) {
  if (c.out.empty()) throw UsageError(std::string(command) + ": --out is required");
  return c.out;
}

// ---------------------------------------------------------------- commands

int cmd_gen_synth(const Options& o, RunManifest& m) {
  SynthConfig cfg;
  if (!o.common.config.empty()) {
    cfg = synth_config_from_json(read_json_file(o.common.config));
    m.add_input("config", o.common.config);
  }
  if (o.common.seed) cfg.seed = *o.common.seed;
  cfg.validate();
  const fs::path out = require_out(o.common, "gen-synth");

  const SynthData data = generate(cfg);
  fs::create_directories(out);
  write_dataset(data.train, out / "train");
  write_dataset(data.val, out / "val");
  write_dataset(data.test, out / "test");
  write_concept_bank(data.bank, out / "bank");
  {
    std::ofstream f(out / "truth.json");
    f << to_json(data.truth).dump(2) << '\n';
    std::ofstream c(out / "synth_config.json");
    c << to_json(cfg).dump(2) << '\n';
  }
  RelevanceTable::from_ground_truth(data.val.labels, data.bank).write_csv(out / "relevance_val.csv");
  RelevanceTable::from_ground_truth(data.test.labels, data.bank)
      .write_csv(out / "relevance_test.csv");

  m.config = to_json(cfg);
  for (const char* name : {"train", "val", "test", "bank", "truth.json", "synth_config.json",
                           "relevance_val.csv", "relevance_test.csv"})
    m.add_output(name, out / name);

  print("out", out.string());
  print("train_samples", data.train.size());
  print("val_samples", data.val.size());
  print("test_samples", data.test.size());
  print("n_classes", data.bank.n_classes());
  print("n_concepts", data.bank.n_concepts());
  return 0;
}

TrainConfig resolve_train_config(const Options& o, RunManifest& m) {
  TrainConfig cfg;
  if (!o.common.config.empty()) {
    cfg = train_config_from_json(read_json_file(o.common.config));
    m.add_input("config", o.common.config);
  }
  if (o.common.seed) cfg.seed = *o.common.seed;
  if (o.epochs) cfg.epochs = *o.epochs;
  if (o.batch_size) cfg.batch_size = *o.batch_size;
  if (o.d_k) cfg.d_k = *o.d_k;
  if (o.eval_every) cfg.eval_every = *o.eval_every;
  if (o.lr) cfg.lr = *o.lr;
  if (o.lambda) cfg.lambda = *o.lambda;
  if (o.tau) cfg.tau = *o.tau;
  if (o.tau_bce) cfg.tau_bce = *o.tau_bce;
  if (o.group_ratio) cfg.group_ratio = *o.group_ratio;
  if (o.weight_decay) cfg.weight_decay = *o.weight_decay;
  if (o.loss_mode) cfg.loss_mode = parse_loss_mode(*o.loss_mode);
  if (o.precision) cfg.precision = parse_precision(*o.precision);
  cfg.threads = o.common.threads;
  cfg.validate();
  return cfg;
}

int cmd_train(const Options& o, RunManifest& m) {
  const fs::path root = o.data;
  auto pick = [&](const std::string& explicit_path, const char* sub) {
    if (!explicit_path.empty()) return fs::path(explicit_path);
    if (root.empty()) throw UsageError(std::string("train: pass --data or --") + sub);
    return root / sub;
  };
  const fs::path train_dir = pick(o.train, "train");
  const fs::path val_dir = pick(o.val, "val");
  const fs::path bank_dir = pick(o.bank, "bank");
  const fs::path out = require_out(o.common, "train");
  const TrainConfig cfg = resolve_train_config(o, m);

  const Dataset train_set = load_dataset(train_dir);
  const Dataset val_set = load_dataset(val_dir);
  const ConceptBank bank = load_concept_bank(bank_dir);
  m.add_input("train", train_dir);
  m.add_input("val", val_dir);
  m.add_input("bank", bank_dir);
  m.config = to_json(cfg);
  m.config["threads"] = cfg.threads;

  const Checkpoint ckpt = train(train_set, val_set, bank, cfg);
  for (const auto& h : ckpt.history)
    std::cerr << "epoch " << h.epoch << " train_loss " << h.train_loss << " val_accuracy "
              << h.val_accuracy << " val_loss " << h.val_loss << '\n';
  save_checkpoint(ckpt, bank, out);
  m.add_output("checkpoint", out);

  print("best_epoch", ckpt.epoch);
  print("val_accuracy", ckpt.val_accuracy);
  print("val_loss", ckpt.val_loss);
  print("final_train_loss", ckpt.history.back().train_loss);
  print("checkpoint", out.string());
  print("checkpoint_hash", ckpt.hash);
  return 0;
}

struct Loaded {
  LoadedCheckpoint ckpt;
  Dataset data;
};

Loaded load_inputs(const Options& o, RunManifest& m, const char* command) {
  if (o.ckpt.empty()) throw UsageError(std::string(command) + ": --ckpt is required");
  if (o.data.empty()) throw UsageError(std::string(command) + ": --data is required");
  Loaded l{load_checkpoint(o.ckpt), load_dataset(o.data)};
  m.add_input("checkpoint", o.ckpt);
  m.add_input("data", o.data);
  m.config["checkpoint_hash"] = l.ckpt.checkpoint.hash;
  return l;
}

int cmd_eval(const Options& o, RunManifest& m) {
  const Loaded in = load_inputs(o, m, "eval");
  const ScoredSet scored = score_dataset(in.data, in.ckpt.checkpoint.model, in.ckpt.bank);
  const EvalReport r = evaluate(scored, in.ckpt.bank);
  print("n_samples", in.data.size());
  print("accuracy", r.accuracy);
  print("mean_positive_score", r.mean_positive_score);
  print("mean_negative_score", r.mean_negative_score);
  print("score_gap", r.mean_positive_score - r.mean_negative_score);
  for (std::size_t y = 0; y < r.per_class_accuracy.size(); ++y)
    print("class_accuracy." + std::to_string(y), r.per_class_accuracy[y]);
  if (!o.common.out.empty()) {
    json j = {{"accuracy", r.accuracy},
              {"mean_positive_score", r.mean_positive_score},
              {"mean_negative_score", r.mean_negative_score},
              {"n_samples", in.data.size()}};
    json per_class = json::array();
    for (double a : r.per_class_accuracy) per_class.push_back(std::isnan(a) ? json(nullptr) : json(a));
    j["per_class_accuracy"] = per_class;
    std::ofstream(o.common.out) << j.dump(2) << '\n';
    m.add_output("report", o.common.out);
  }
  return 0;
}

int cmd_explain(const Options& o, RunManifest& m) {
  const Loaded in = load_inputs(o, m, "explain");
  require_sample(in.data, o.index);
  if (o.k < 1) throw UsageError("explain: --k must be at least 1");
  const auto& model = in.ckpt.checkpoint.model;
  const Vector<float> s = image_scores(in.data.features[static_cast<std::size_t>(o.index)],
                                       model.coat, in.ckpt.bank.text_embeddings);
  const auto pred = predict(model.head, s);
  m.config["index"] = o.index;
  m.config["k"] = o.k;
  print("index", o.index);
  print("label", in.data.labels[static_cast<std::size_t>(o.index)]);
  print("predicted", pred.label);
  print("predicted_class", in.ckpt.bank.class_names[static_cast<std::size_t>(pred.label)]);
  const auto ranked = top_k(s, in.ckpt.bank, o.k);
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    const std::string prefix = "top." + std::to_string(r + 1) + ".";
    print(prefix + "index", ranked[r].index);
    print(prefix + "concept", ranked[r].text);
    print(prefix + "score", static_cast<double>(ranked[r].score));
  }
  return 0;
}

std::map<int, double> parse_edits(const std::vector<std::string>& edits) {
  std::map<int, double> out;
  for (const auto& e : edits) {
    const auto eq = e.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects INDEX=VALUE, got '" + e + "'");
    try {
      std::size_t used = 0;
      const int idx = std::stoi(e.substr(0, eq), &used);
      if (used != eq) throw std::invalid_argument(e);
      const std::string value = e.substr(eq + 1);
      const double v = std::stod(value, &used);
      if (used != value.size()) throw std::invalid_argument(e);
      out[idx] = v;
    } catch (const std::logic_error&) {
      throw UsageError("--set expects INDEX=VALUE, got '" + e + "'");
    }
  }
  return out;
}

int cmd_intervene(const Options& o, RunManifest& m) {
  const auto edits = parse_edits(o.edits);
  const Loaded in = load_inputs(o, m, "intervene");
  require_sample(in.data, o.index);
  const auto& model = in.ckpt.checkpoint.model;
  const Vector<float> s = image_scores(in.data.features[static_cast<std::size_t>(o.index)],
                                       model.coat, in.ckpt.bank.text_embeddings);
  const Vector<float> edited = intervene(s, edits);
  const auto before = predict(model.head, s);
  const auto after = predict(model.head, edited);
  m.config["index"] = o.index;
  m.config["edits"] = o.edits;
  print("index", o.index);
  print("label", in.data.labels[static_cast<std::size_t>(o.index)]);
  print("predicted_before", before.label);
  print("predicted_after", after.label);
  print("logits_before", join(before.logits.cast<double>()));
  print("logits_after", join(after.logits.cast<double>()));
  print("edits_applied", edits.size());
  return 0;
}

int cmd_metrics(const Options& o, RunManifest& m) {
  if (o.oracle.empty() == o.judge.empty())
    throw UsageError("metrics: pass exactly one of --oracle or --judge");
  const Loaded in = load_inputs(o, m, "metrics");
  const auto& bank = in.ckpt.bank;
  const ScoredSet scored = score_dataset(in.data, in.ckpt.checkpoint.model, bank);
  const EvalSet set = make_eval_set(scored, bank);
  if (!o.oracle.empty()) {
    RelevanceTable table = RelevanceTable::read_csv(o.oracle);
    m.add_input("oracle", o.oracle);
    print("n_images", set.samples.size());
    print("cdr", cdr(set, table));
    print("cc", cc(set, table));
  } else {
    RemoteJudge judge(JudgeEndpoint::from_json(read_json_file(o.judge)), in.data.descriptions,
                      bank.class_names, bank.concepts);
    m.add_input("judge", o.judge);
    print("n_images", set.samples.size());
    print("cdr", cdr(set, judge));
    print("cc", cc(set, judge));
    print("judge_calls", judge.network_calls());
  }
  return 0;
}

int cmd_assoc(const Options& o, RunManifest& m) {
  const fs::path out = require_out(o.common, "assoc");
  const Loaded in = load_inputs(o, m, "assoc");
  const auto& bank = in.ckpt.bank;
  const AssocMap map = assoc_map(in.data, in.ckpt.checkpoint.model, bank);
  fs::create_directories(out);
  {
    std::ofstream csv(out / "assoc.csv");
    write_matrix_csv(map.means, bank.class_names, bank.concepts, csv);
  }
  write_bundle({{"assoc", to_tensor(map.means)}}, out / "assoc");
  m.add_output("assoc.csv", out / "assoc.csv");
  m.add_output("assoc", out / "assoc");
  for (int y : map.empty_classes) std::cerr << "warning: class " << y << " has no samples\n";
  print("rows", map.means.rows());
  print("cols", map.means.cols());
  print("empty_classes", map.empty_classes.size());
  print("block_diagonal_gap", block_diagonal_gap(map.means, bank));
  return 0;
}

int cmd_export_head(const Options& o, RunManifest& m) {
  if (o.ckpt.empty()) throw UsageError("export-head: --ckpt is required");
  const fs::path out = require_out(o.common, "export-head");
  const LoadedCheckpoint in = load_checkpoint(o.ckpt);
  m.add_input("checkpoint", o.ckpt);
  {
    std::ofstream f(out);
    if (!f) throw DataError("cannot write " + out.string());
    export_head(in.checkpoint.model.head, in.bank, f);
  }
  m.add_output("head", out);
  print("rows", in.checkpoint.model.head.weight.rows());
  print("cols", in.checkpoint.model.head.weight.cols());
  print("head_concept_overlap", head_concept_overlap(in.checkpoint.model.head, in.bank));
  print("out", out.string());
  return 0;
}

int cmd_gradcheck(const Options& o, RunManifest& m) {
  if (o.count < 1) throw UsageError("gradcheck: --count must be at least 1");
  const GradcheckDims dims = GradcheckDims::parse(o.dims);
  const std::uint64_t seed = o.common.seed.value_or(0);
  GradcheckResult worst;
  long coordinates = 0;
  for (int i = 0; i < o.count; ++i) {
    const auto r = gradcheck(seed + static_cast<std::uint64_t>(i), dims);
    coordinates += r.coordinates;
    if (i == 0 || r.max_rel_err > worst.max_rel_err) worst = r;
  }
  m.config = {{"seed", seed}, {"dims", o.dims}, {"count", o.count},
              {"tolerance", o.tolerance}};
  print("instances", o.count);
  print("coordinates", coordinates);
  print("max_rel_err", worst.max_rel_err);
  print("worst", worst.worst);
  const bool ok = worst.max_rel_err < o.tolerance;
  print("status", ok ? "pass" : "fail");
  return ok ? 0 : 3;
}

// ---------------------------------------------------------------- wiring

void add_common(CLI::App* sub, CommonOptions& c) {
  sub->add_option("--seed", c.seed, "random seed");
  sub->add_option("--config", c.config, "JSON config file; flags override its values");
  sub->add_option("--out", c.out, "output path");
  sub->add_option("--manifest", c.manifest, "where to write the run manifest");
  sub->add_option("--threads", c.threads, "worker cap")->check(CLI::PositiveNumber);
}

void add_model_inputs(CLI::App* sub, Options& o) {
  sub->add_option("--ckpt", o.ckpt, "checkpoint directory");
  sub->add_option("--data", o.data, "dataset directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Concept-wise attention concept bottleneck models", "coatcbm"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("gen-synth", "generate a planted-concept synthetic dataset");
  auto* tr = app.add_subcommand("train", "train a model and save the best checkpoint");
  tr->add_option("--data", o.data, "directory holding train/, val/ and bank/");
  tr->add_option("--train", o.train, "training dataset directory");
  tr->add_option("--val", o.val, "validation dataset directory");
  tr->add_option("--bank", o.bank, "concept bank directory");
  tr->add_option("--epochs", o.epochs);
  tr->add_option("--batch-size", o.batch_size);
  tr->add_option("--lr", o.lr);
  tr->add_option("--lambda", o.lambda);
  tr->add_option("--tau", o.tau);
  tr->add_option("--tau-bce", o.tau_bce);
  tr->add_option("--weight-decay", o.weight_decay);
  tr->add_option("--group-ratio", o.group_ratio);
  tr->add_option("--d-k", o.d_k);
  tr->add_option("--eval-every", o.eval_every);
  tr->add_option("--loss-mode", o.loss_mode, "cco, bce or none")
      ->check(CLI::IsMember({"cco", "bce", "none"}));
  tr->add_option("--precision", o.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));

  auto* ev = app.add_subcommand("eval", "accuracy and concept score statistics");
  auto* ex = app.add_subcommand("explain", "top-k concepts behind one prediction");
  ex->add_option("--index", o.index, "sample index")->required();
  ex->add_option("--k", o.k, "number of concepts");
  auto* iv = app.add_subcommand("intervene", "edit concept scores and re-classify");
  iv->add_option("--index", o.index, "sample index")->required();
  iv->add_option("--set", o.edits, "INDEX=VALUE, repeatable")->required();
  auto* me = app.add_subcommand("metrics", "concept relevance metrics");
  me->add_option("--oracle", o.oracle, "relevance table CSV");
  me->add_option("--judge", o.judge, "remote judge endpoint JSON");
  auto* as = app.add_subcommand("assoc", "class-concept association map");
  auto* eh = app.add_subcommand("export-head", "write classifier weights as CSV");
  eh->add_option("--ckpt", o.ckpt, "checkpoint directory");
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the gradients");
  gc->add_option("--dims", o.dims, "small or medium");
  gc->add_option("--count", o.count, "number of random instances");
  gc->add_option("--tolerance", o.tolerance, "maximum relative error");

  for (auto* sub : {ev, ex, iv, me, as}) add_model_inputs(sub, o);
  for (auto* sub : {gen, tr, ev, ex, iv, me, as, eh, gc}) add_common(sub, o.common);

  if (argc < 2) {
    std::cerr << app.help();
    return 1;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  CLI::App* sub = app.get_subcommands().front();
  const auto start = std::chrono::steady_clock::now();
  RunManifest manifest;
  manifest.command = sub->get_name();
  try {
    const std::map<std::string, int (*)(const Options&, RunManifest&)> commands = {
        {"gen-synth", cmd_gen_synth}, {"train", cmd_train},       {"eval", cmd_eval},
        {"explain", cmd_explain},     {"intervene", cmd_intervene}, {"metrics", cmd_metrics},
        {"assoc", cmd_assoc},         {"export-head", cmd_export_head},
        {"gradcheck", cmd_gradcheck}};
    const int code = commands.at(manifest.command)(o, manifest);
    emit_manifest(manifest, o.common, start);
    return code;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << sub->help();
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const JudgeError& e) {
    std::cerr << "judge error: " << e.what() << '\n';
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  }
}
