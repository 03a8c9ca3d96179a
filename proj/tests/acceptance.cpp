// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance checks. Prints one line per criterion:
//   criterion N: PASS|FAIL <measurements>
// and exits nonzero if any criterion fails.
#include "coatcbm/cco.hpp"
#include "coatcbm/coat.hpp"
#include "coatcbm/gradcheck.hpp"
#include "coatcbm/hash.hpp"
#include "coatcbm/interp.hpp"
#include "coatcbm/manifest.hpp"
#include "coatcbm/rng.hpp"
#include "coatcbm/synth.hpp"
#include "coatcbm/tensorio.hpp"
#include "coatcbm/trainer.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <sys/wait.h>

using namespace coatcbm;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------- tolerances
constexpr int kGradInstances = 50;
constexpr double kGradRelTol = 1e-4;
constexpr double kGradStep = 1e-5;
constexpr double kGradLambda = 0.5;
constexpr double kGradSeconds = 60;

constexpr double kCcoTwoConcepts = 0.313262;  // ln(1 + e^-1)
constexpr double kCcoTwoConceptsTol = 1e-6;
constexpr double kCcoLn2Tol = 1e-9;

constexpr int kInvarianceInstances = 100;
constexpr double kInvarianceTol = 1e-9;
constexpr double kMonotoneStep = 1e-3;

constexpr int kAttentionInstances = 100;
constexpr double kRowSumTol = 1e-6;
constexpr double kHullSlack = 1e-12;
constexpr double kPermutationTol = 1e-12;

constexpr double kCentroidAccuracy = 0.99;
constexpr double kTestAccuracy = 0.95;
constexpr double kScoreGap = 0.2;
constexpr double kMinCdrCc = 0.90;
constexpr double kCdrImprovement = 0.25;
constexpr double kEndToEndSeconds = 300;

constexpr int kAblationSeeds = 4;
constexpr int kMetricSets = 100;

// ---------------------------------------------------------------- reporting
struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int failures = 0;

void report(int id, const std::function<Outcome()>& body) {
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  if (!o.pass) ++failures;
  std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail
            << std::endl;
}

Vector<double> random_vector(SplitMix64& rng, int n, double lo, double hi) {
  Vector<double> v(n);
  for (Index i = 0; i < n; ++i) v(i) = lo + (hi - lo) * rng.uniform();
  return v;
}

// ---------------------------------------------------------------- 1
Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0;
  std::string where;
  long coords = 0;
  for (int seed = 0; seed < kGradInstances; ++seed) {
    const GradcheckResult r = gradcheck(static_cast<std::uint64_t>(seed), GradcheckDims{},
                                        kGradLambda, kGradStep);
    coords += r.coordinates;
    if (!(r.max_rel_err <= worst)) {
      worst = r.max_rel_err;
      where = "seed " + std::to_string(seed) + " " + r.worst;
    }
  }
  const double secs = seconds_since(t0);
  return {worst < kGradRelTol && secs < kGradSeconds,
          "instances=" + std::to_string(kGradInstances) + " coordinates=" + std::to_string(coords) +
              " max_rel_err=" + fmt(worst) + " (" + where + ") seconds=" + fmt(secs)};
}

// ---------------------------------------------------------------- 2
Outcome cco_closed_forms() {
  const PosNegSplit one_one{{0}, {1}};
  const double a = cco_loss<double>(Vector<double>{{1.0, 0.0}}, one_one, 1.0);
  const PosNegSplit three_three{{0, 2, 4}, {1, 3, 5}};
  const double b = cco_loss<double>(Vector<double>::Constant(6, 0.37), three_three, 0.07);
  const PosNegSplit no_neg{{0, 1, 2}, {}};
  const double c = cco_loss<double>(Vector<double>{{0.2, -0.9, 0.5}}, no_neg, 0.07);
  const bool pass = std::abs(a - kCcoTwoConcepts) <= kCcoTwoConceptsTol &&
                    std::abs(b - std::log(2.0)) <= kCcoLn2Tol && c == 0.0;
  return {pass, "two_concepts=" + fmt(a) + " equal_scores=" + fmt(b) + " no_negatives=" + fmt(c)};
}

// ---------------------------------------------------------------- 3
Outcome cco_invariances() {
  SplitMix64 rng(303);
  double worst_shift = 0, worst_scale = 0;
  int monotone_checks = 0, monotone_violations = 0;
  for (int trial = 0; trial < kInvarianceInstances; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(9));
    std::vector<char> mask(static_cast<std::size_t>(n), 0);
    const int n_pos = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(n - 1)));
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    shuffle(idx, rng);
    for (int k = 0; k < n_pos; ++k) mask[static_cast<std::size_t>(idx[static_cast<std::size_t>(k)])] = 1;
    const PosNegSplit split = PosNegSplit::from_mask(mask);
    const Vector<double> s = random_vector(rng, n, -1, 1);
    const double tau = 0.1 + 0.9 * rng.uniform();
    const double base = cco_loss(s, split, tau);

    const double shift = 10 * (2 * rng.uniform() - 1);
    const Vector<double> shifted = (s.array() + shift).matrix();
    worst_shift = std::max(worst_shift, std::abs(cco_loss(shifted, split, tau) - base));

    const double c = std::exp(2 * (2 * rng.uniform() - 1));
    const Vector<double> scaled = c * s;
    worst_scale = std::max(worst_scale, std::abs(cco_loss(scaled, split, c * tau) - base));

    for (Index i = 0; i < n; ++i) {
      const bool pos = mask[static_cast<std::size_t>(i)] != 0;
      for (double step : {kMonotoneStep, -kMonotoneStep}) {
        Vector<double> p = s;
        p(i) += step;
        const double moved = cco_loss(p, split, tau);
        // Raising a positive lowers the loss; raising a negative raises it.
        const bool ok = (pos == (step > 0)) ? moved < base : moved > base;
        ++monotone_checks;
        if (!ok) ++monotone_violations;
      }
    }
  }
  return {worst_shift < kInvarianceTol && worst_scale < kInvarianceTol && monotone_violations == 0,
          "max_shift_change=" + fmt(worst_shift) + " max_scale_change=" + fmt(worst_scale) +
              " monotone_checks=" + std::to_string(monotone_checks) +
              " violations=" + std::to_string(monotone_violations)};
}

// ---------------------------------------------------------------- 4
Outcome attention_invariants() {
  SplitMix64 rng(404);
  double worst_row = 0, worst_perm = 0;
  int hull_violations = 0;
  for (int trial = 0; trial < kAttentionInstances; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(6));
    const int d = 1 + static_cast<int>(rng.below(8));
    const int dk = 1 + static_cast<int>(rng.below(4));
    const int dc = 1 + static_cast<int>(rng.below(4));
    const int np = 1 + static_cast<int>(rng.below(6));
    const double ratio = std::vector<double>{0.1, 0.5, 1.0}[rng.below(3)];
    CoatParams<double> p = init_params<double>(rng.next(), n, d, dk, dc, ratio);
    p.queries *= 1 + 4 * rng.uniform();
    Matrix<double> z(np + 1, d);
    for (Index k = 0; k < z.size(); ++k) z.data()[k] = rng.normal();

    const auto t = attend(z, p);
    for (Index q = 0; q < t.alphas.rows(); ++q) {
      worst_row = std::max(worst_row, std::abs(t.alphas.row(q).sum() - 1));
      if ((t.alphas.row(q).array() < 0).any()) ++hull_violations;
    }
    for (Index c = 0; c < t.values.cols(); ++c) {
      const double lo = t.values.col(c).minCoeff(), hi = t.values.col(c).maxCoeff();
      const double slack = kHullSlack * (1 + std::abs(lo) + std::abs(hi));
      if ((t.embeddings.col(c).array() < lo - slack).any() ||
          (t.embeddings.col(c).array() > hi + slack).any())
        ++hull_violations;
    }

    std::vector<Index> perm(static_cast<std::size_t>(z.rows()));
    std::iota(perm.begin(), perm.end(), Index{0});
    shuffle(perm, rng);
    Matrix<double> zp(z.rows(), z.cols());
    for (Index r = 0; r < z.rows(); ++r) zp.row(r) = z.row(perm[static_cast<std::size_t>(r)]);
    const auto tp = attend(zp, p);
    for (Index q = 0; q < t.alphas.rows(); ++q)
      for (Index r = 0; r < z.rows(); ++r)
        worst_perm = std::max(worst_perm, std::abs(tp.alphas(q, r) - t.alphas(q, perm[static_cast<std::size_t>(r)])));
    worst_perm = std::max(worst_perm, (tp.embeddings - t.embeddings).cwiseAbs().maxCoeff());
  }
  return {worst_row <= kRowSumTol && hull_violations == 0 && worst_perm <= kPermutationTol,
          "max_row_sum_error=" + fmt(worst_row) + " hull_violations=" +
              std::to_string(hull_violations) + " max_permutation_error=" + fmt(worst_perm)};
}

// ---------------------------------------------------------------- 5-7 helpers
struct RunMetrics {
  double accuracy = 0;
  double gap = 0;
  double cdr = 0;
  double cc = 0;
};

RunMetrics measure(const SynthData& d, const Model<float>& model) {
  const ScoredSet scored = score_dataset(d.test, model, d.bank);
  const EvalReport r = evaluate(scored, d.bank);
  RelevanceTable truth = RelevanceTable::from_ground_truth(d.test.labels, d.bank);
  const EvalSet set = make_eval_set(scored, d.bank);
  return {r.accuracy, r.mean_positive_score - r.mean_negative_score, cdr(set, truth),
          cc(set, truth)};
}

SynthData synthetic(std::uint64_t seed) {
  SynthConfig c;  // 10 classes x 5 concepts, d 32, d_c 16, 16 patches, 50 + 20 per class
  c.seed = seed;
  return generate(c);
}

Outcome synthetic_end_to_end() {
  const auto t0 = std::chrono::steady_clock::now();
  const SynthData d = synthetic(0);
  const double centroid = oracle::nearest_centroid_accuracy(d.train, d.test);
  TrainConfig cfg;
  cfg.epochs = 0;
  const RunMetrics before = measure(d, train(d.train, d.val, d.bank, cfg).model);
  cfg = TrainConfig{};
  const RunMetrics after = measure(d, train(d.train, d.val, d.bank, cfg).model);
  const double secs = seconds_since(t0);
  const bool pass = centroid >= kCentroidAccuracy && after.accuracy >= kTestAccuracy &&
                    after.gap >= kScoreGap && after.cdr >= kMinCdrCc && after.cc >= kMinCdrCc &&
                    after.cdr - before.cdr >= kCdrImprovement && secs < kEndToEndSeconds;
  return {pass, "centroid_accuracy=" + fmt(centroid) + " accuracy=" + fmt(after.accuracy) +
                    " score_gap=" + fmt(after.gap) + " cdr=" + fmt(after.cdr) +
                    " cc=" + fmt(after.cc) + " untrained_cdr=" + fmt(before.cdr) +
                    " seconds=" + fmt(secs)};
}

Outcome loss_direction() {
  double cco_sum = 0, bce_sum = 0, none_sum = 0;
  for (int seed = 0; seed < kAblationSeeds; ++seed) {
    const SynthData d = synthetic(static_cast<std::uint64_t>(seed));
    TrainConfig cfg;
    cfg.seed = static_cast<std::uint64_t>(seed);
    cco_sum += measure(d, train(d.train, d.val, d.bank, cfg).model).cdr;
    TrainConfig bce = cfg;
    bce.loss_mode = LossMode::bce;
    bce_sum += measure(d, train(d.train, d.val, d.bank, bce).model).cdr;
    TrainConfig none = cfg;
    none.lambda = 0;
    none_sum += measure(d, train(d.train, d.val, d.bank, none).model).cdr;
  }
  const double cco_cdr = cco_sum / kAblationSeeds, bce_cdr = bce_sum / kAblationSeeds,
               none_cdr = none_sum / kAblationSeeds;
  return {cco_cdr >= bce_cdr && bce_cdr >= none_cdr && cco_cdr >= none_cdr,
          "mean_cdr cco=" + fmt(cco_cdr) + " bce=" + fmt(bce_cdr) + " lambda0=" + fmt(none_cdr)};
}

Outcome grouping_ablation() {
  const std::vector<double> ratios{0.1, 0.5, 1.0};
  std::vector<double> acc(ratios.size(), 0.0);
  for (int seed = 0; seed < kAblationSeeds; ++seed) {
    const SynthData d = synthetic(static_cast<std::uint64_t>(seed));
    for (std::size_t r = 0; r < ratios.size(); ++r) {
      TrainConfig cfg;
      cfg.seed = static_cast<std::uint64_t>(seed);
      cfg.group_ratio = ratios[r];
      acc[r] += measure(d, train(d.train, d.val, d.bank, cfg).model).accuracy / kAblationSeeds;
    }
  }
  const bool pass = acc[0] <= acc[1] && acc[1] <= acc[2] && acc[2] > acc[0];
  return {pass, "mean_accuracy ratio0.1=" + fmt(acc[0]) + " ratio0.5=" + fmt(acc[1]) +
                    " ratio1.0=" + fmt(acc[2])};
}

// ---------------------------------------------------------------- 8
Outcome metric_equivalence() {
  SplitMix64 rng(808);
  int mismatches = 0;
  for (int trial = 0; trial < kMetricSets; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(10));
    const int m = 1 + static_cast<int>(rng.below(15));
    const int classes = 1 + static_cast<int>(rng.below(4));
    EvalSet set;
    RelevanceTable table;
    for (int i = 0; i < m; ++i) {
      Vector<double> s(n);
      for (Index c = 0; c < n; ++c) s(c) = static_cast<double>(rng.below(5)) / 4;  // ties
      set.samples.push_back({i, static_cast<int>(rng.below(static_cast<std::uint64_t>(classes))),
                             static_cast<int>(rng.below(static_cast<std::uint64_t>(classes))), s,
                             1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(n)))});
      for (int c = 0; c < n; ++c) table.set(SubjectType::image, i, c, rng.below(2) == 1);
    }
    for (int y = 0; y < classes; ++y)
      for (int c = 0; c < n; ++c) table.set(SubjectType::klass, y, c, rng.below(2) == 1);
    if (cdr(set, table) != oracle::relevance_metric(set, table, false)) ++mismatches;
    if (cc(set, table) != oracle::relevance_metric(set, table, true)) ++mismatches;
  }
  return {mismatches == 0, "sets=" + std::to_string(kMetricSets) +
                               " mismatches=" + std::to_string(mismatches)};
}

// ---------------------------------------------------------------- 9
struct CliRun {
  int code = -1;
  std::string out;
};

CliRun cli(const std::string& args) {
  const std::string cmd = std::string("'") + COATCBM_CLI + "' " + args + " 2>/dev/null";
  CliRun r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string value_of(const std::string& out, const std::string& key) {
  std::istringstream lines(out);
  std::string line;
  while (std::getline(lines, line))
    if (line.rfind(key + "=", 0) == 0) return line.substr(key.size() + 1);
  return {};
}

Outcome determinism() {
  testutil::TempDir tmp;
  const std::string a = (tmp / "synth_a").string(), b = (tmp / "synth_b").string();
  if (cli("gen-synth --seed 0 --out '" + a + "'").code != 0 ||
      cli("gen-synth --seed 0 --out '" + b + "'").code != 0)
    return {false, "gen-synth failed"};
  const std::string ha = hash_path(a), hb = hash_path(b);
  const CliRun r1 = cli("train --data '" + a + "' --out '" + (tmp / "ckpt1").string() + "'");
  const CliRun r2 = cli("train --data '" + a + "' --out '" + (tmp / "ckpt2").string() + "'");
  if (r1.code != 0 || r2.code != 0) return {false, "train failed"};
  const std::string k1 = value_of(r1.out, "checkpoint_hash"), k2 = value_of(r2.out, "checkpoint_hash");
  const std::string d1 = hash_path(tmp / "ckpt1"), d2 = hash_path(tmp / "ckpt2");
  return {ha == hb && !k1.empty() && k1 == k2 && d1 == d2,
          "gen_synth_hash=" + ha.substr(0, 16) + (ha == hb ? " (equal)" : " (differs)") +
              " checkpoint_hash=" + k1.substr(0, 16) + (k1 == k2 ? " (equal)" : " (differs)") +
              " checkpoint_dir=" + (d1 == d2 ? "equal" : "differs")};
}

// ---------------------------------------------------------------- 10
Outcome io_golden() {
  testutil::TempDir tmp;
  std::vector<std::string> failed;

  write_bundle({{"one", Tensor{{1, 1}, {1.0f}}}}, tmp / "one");
  const std::string bytes = testutil::slurp(tmp / "one" / "one.f32");
  if (bytes != std::string("\x00\x00\x80\x3F", 4)) failed.push_back("f32_bytes");

  TensorBundle bundle{{"w", Tensor{{2, 3}, {0.5f, -0.0f, 1e-40f, 3.4e38f, -2.0f, 7.0f}}},
                      {"b", Tensor{{3}, {1, 2, 3}}}};
  write_bundle(bundle, tmp / "bundle");
  if (!bitwise_equal(read_bundle(tmp / "bundle"), bundle)) failed.push_back("bundle_round_trip");

  RunManifest m;
  m.command = "train";
  m.config = {{"seed", 3}, {"lr", 0.01}};
  m.add_input("bundle", tmp / "bundle");
  m.wall_time_s = 1.25;
  m.write(tmp / "run_manifest.json");
  if (nlohmann::json::parse(testutil::slurp(tmp / "run_manifest.json")) != m.to_json())
    failed.push_back("run_manifest_round_trip");

  // Malformed inputs: every one must be refused with a data error.
  const fs::path dir = tmp / "bundle";
  const std::string manifest_text = testutil::slurp(dir / "manifest.json");
  const std::string w_bytes = testutil::slurp(dir / "w.f32");
  auto restore = [&] {
    testutil::spit(dir / "manifest.json", manifest_text);
    testutil::spit(dir / "w.f32", w_bytes);
  };
  auto edit_manifest = [&](const std::function<void(nlohmann::json&)>& f) {
    auto j = nlohmann::json::parse(manifest_text);
    f(j);
    testutil::spit(dir / "manifest.json", j.dump());
  };
  const std::vector<std::pair<std::string, std::function<void()>>> catalog{
      {"truncated", [&] { testutil::spit(dir / "w.f32", w_bytes.substr(0, w_bytes.size() - 4)); }},
      {"dtype_f64", [&] { edit_manifest([](auto& j) { j["entries"][0]["dtype"] = "f64"; }); }},
      {"not_json", [&] { testutil::spit(dir / "manifest.json", "{ nope"); }},
      {"missing_manifest", [&] { fs::remove(dir / "manifest.json"); }},
      {"count_mismatch", [&] { edit_manifest([](auto& j) { j["entries"][0]["count"] = 99; }); }},
      {"duplicate_entry", [&] { edit_manifest([](auto& j) { j["entries"].push_back(j["entries"][0]); }); }},
      {"path_escape", [&] { edit_manifest([](auto& j) { j["entries"][0]["file"] = "../w.f32"; }); }},
      {"big_endian", [&] { edit_manifest([](auto& j) { j["byte_order"] = "big"; }); }},
      {"missing_data", [&] { fs::remove(dir / "w.f32"); }},
  };
  int refused = 0;
  for (const auto& [name, corrupt] : catalog) {
    restore();
    corrupt();
    try {
      read_bundle(dir);
      failed.push_back("accepted_" + name);
    } catch (const DataError&) {
      ++refused;
    }
  }
  restore();

  std::string detail = "malformed_refused=" + std::to_string(refused) + "/" +
                       std::to_string(catalog.size());
  for (const auto& f : failed) detail += " failed:" + f;
  return {failed.empty(), detail};
}

}  // namespace

int main() {
  report(1, gradient_suite);
  report(2, cco_closed_forms);
  report(3, cco_invariances);
  report(4, attention_invariants);
  report(5, synthetic_end_to_end);
  report(6, loss_direction);
  report(7, grouping_ablation);
  report(8, metric_equivalence);
  report(9, determinism);
  report(10, io_golden);
  std::cout << "failed=" << failures << std::endl;
  return failures == 0 ? 0 : 1;
}
