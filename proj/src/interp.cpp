// SPDX-License-Identifier: Apache-2.0
#include "coatcbm/interp.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

namespace coatcbm {

namespace {

const char* type_name(SubjectType t) { return t == SubjectType::image ? "image" : "class"; }

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

int parse_int(const std::string& s, const std::string& what, std::size_t line) {
  std::size_t pos = 0;
  int v = 0;
  try {
    v = std::stoi(s, &pos);
  } catch (const std::exception&) {
    pos = std::string::npos;
  }
  if (pos != s.size())
    throw DataError("relevance table line " + std::to_string(line) + ": bad " + what + " '" + s +
                    "'");
  return v;
}

double parse_double(const std::string& s, std::size_t row) {
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    pos = std::string::npos;
  }
  if (pos != s.size() || s.empty())
    throw DataError("head CSV row " + std::to_string(row) + ": bad number '" + s + "'");
  return v;
}

std::string format_value(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

void RelevanceTable::set(SubjectType type, int subject, int concept_id, bool relevant) {
  entries_[{type, subject, concept_id}] = relevant;
}

bool RelevanceTable::lookup(SubjectType type, int subject, int concept_id) const {
  auto it = entries_.find({type, subject, concept_id});
  if (it == entries_.end())
    throw DataError(std::string("relevance table has no entry for (") + type_name(type) + " " +
                    std::to_string(subject) + ", concept " + std::to_string(concept_id) + ")");
  return it->second;
}

RelevanceTable RelevanceTable::from_ground_truth(const std::vector<int>& labels,
                                                 const ConceptBank& bank) {
  RelevanceTable t;
  const int n = bank.n_concepts();
  for (int y = 0; y < bank.n_classes(); ++y) {
    const auto mask = bank.positive_mask(y);
    for (int c = 0; c < n; ++c) t.set(SubjectType::klass, y, c, mask[static_cast<std::size_t>(c)]);
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto mask = bank.positive_mask(labels[i]);
    for (int c = 0; c < n; ++c)
      t.set(SubjectType::image, static_cast<int>(i), c, mask[static_cast<std::size_t>(c)]);
  }
  return t;
}

RelevanceTable RelevanceTable::parse_csv(std::istream& in) {
  RelevanceTable t;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != 4)
      throw DataError("relevance table line " + std::to_string(lineno) + ": expected 4 columns");
    if (cells[0] == "subject_type") continue;  // header
    SubjectType type;
    if (cells[0] == "image") type = SubjectType::image;
    else if (cells[0] == "class") type = SubjectType::klass;
    else
      throw DataError("relevance table line " + std::to_string(lineno) + ": subject_type '" +
                      cells[0] + "' is not image|class");
    const int subject = parse_int(cells[1], "subject_id", lineno);
    const int concept_id = parse_int(cells[2], "concept_index", lineno);
    if (cells[3] != "0" && cells[3] != "1")
      throw DataError("relevance table line " + std::to_string(lineno) + ": relevant must be 0|1");
    t.set(type, subject, concept_id, cells[3] == "1");
  }
  return t;
}

RelevanceTable RelevanceTable::read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open relevance table " + path.string());
  return parse_csv(in);
}

void RelevanceTable::write_csv(std::ostream& out) const {
  out << "subject_type,subject_id,concept_index,relevant\n";
  for (const auto& [key, rel] : entries_) {
    const auto& [type, subject, concept_id] = key;
    out << type_name(type) << ',' << subject << ',' << concept_id << ',' << (rel ? 1 : 0) << '\n';
  }
}

void RelevanceTable::write_csv(const fs::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  write_csv(out);
}

// ---------------------------------------------------------------------------

void EvalSet::validate() const {
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.n_positive < 1 || s.n_positive > s.scores.size())
      throw DataError("eval set sample " + std::to_string(i) + ": N_i = " +
                      std::to_string(s.n_positive) + " outside [1, n]");
  }
}

EvalSet make_eval_set(const ScoredSet& scored, const ConceptBank& bank) {
  EvalSet set;
  set.samples.reserve(scored.labels.size());
  for (std::size_t i = 0; i < scored.labels.size(); ++i) {
    const int y = scored.labels[i];
    set.samples.push_back({static_cast<int>(i), y, scored.predictions[i],
                           scored.scores.row(static_cast<Index>(i)).transpose(),
                           static_cast<int>(bank.positives(y).size())});
  }
  set.validate();
  return set;
}

namespace {

template <typename Judge>
double top_concept_relevance(const EvalSet& set, Judge&& judge) {
  set.validate();
  if (set.samples.empty()) return std::numeric_limits<double>::quiet_NaN();
  double total = 0;
  for (const auto& s : set.samples) {
    int hits = 0;
    for (int c : top_k_indices(s.scores, s.n_positive)) hits += judge(s, c) ? 1 : 0;
    total += static_cast<double>(hits) / s.n_positive;
  }
  return total / static_cast<double>(set.samples.size());
}

}  // namespace

double cdr(const EvalSet& set, RelevanceOracle& oracle) {
  return top_concept_relevance(
      set, [&](const EvalSample& s, int c) { return oracle.image_relevant(s.image, c); });
}

double cc(const EvalSet& set, RelevanceOracle& oracle) {
  return top_concept_relevance(
      set, [&](const EvalSample& s, int c) { return oracle.class_relevant(s.predicted, c); });
}

// ---------------------------------------------------------------------------

AssocMap assoc_map(const ScoredSet& scored, int n_classes) {
  AssocMap out;
  const Index n = scored.scores.cols();
  out.means = Matrix<double>::Zero(n_classes, n);
  std::vector<int> counts(static_cast<std::size_t>(n_classes), 0);
  for (std::size_t i = 0; i < scored.labels.size(); ++i) {
    const int y = scored.labels[i];
    out.means.row(y) += scored.scores.row(static_cast<Index>(i));
    ++counts[static_cast<std::size_t>(y)];
  }
  for (int y = 0; y < n_classes; ++y) {
    const int k = counts[static_cast<std::size_t>(y)];
    if (k == 0) {
      out.means.row(y).setConstant(std::numeric_limits<double>::quiet_NaN());
      out.empty_classes.push_back(y);
    } else {
      out.means.row(y) /= static_cast<double>(k);
    }
  }
  return out;
}

AssocMap assoc_map(const Dataset& test_set, const Model<float>& model, const ConceptBank& bank) {
  return assoc_map(score_dataset(test_set, model, bank), bank.n_classes());
}

double block_diagonal_gap(const Matrix<double>& map, const ConceptBank& bank) {
  double on = 0, off = 0;
  std::size_t n_on = 0, n_off = 0;
  for (int y = 0; y < bank.n_classes(); ++y) {
    const auto mask = bank.positive_mask(y);
    for (Index c = 0; c < map.cols(); ++c) {
      const double v = map(y, c);
      if (std::isnan(v)) continue;
      if (mask[static_cast<std::size_t>(c)]) {
        on += v;
        ++n_on;
      } else {
        off += v;
        ++n_off;
      }
    }
  }
  const double mean_on = n_on ? on / static_cast<double>(n_on) : 0.0;
  const double mean_off = n_off ? off / static_cast<double>(n_off) : 0.0;
  return mean_on - mean_off;
}

void write_matrix_csv(const Matrix<double>& m, const std::vector<std::string>& row_names,
                      const std::vector<std::string>& col_names, std::ostream& out) {
  out << "row";
  for (const auto& c : col_names) out << ',' << c;
  out << '\n';
  for (Index r = 0; r < m.rows(); ++r) {
    out << row_names[static_cast<std::size_t>(r)];
    for (Index c = 0; c < m.cols(); ++c) out << ',' << format_value(m(r, c));
    out << '\n';
  }
}

void export_head(const Head<float>& head, const ConceptBank& bank, std::ostream& out) {
  out << "class";
  for (Index c = 0; c < head.weight.cols(); ++c) out << ",w_" << c;
  out << ",bias\n";
  for (Index y = 0; y < head.weight.rows(); ++y) {
    out << (y < bank.n_classes() ? bank.class_names[static_cast<std::size_t>(y)]
                                 : std::to_string(y));
    for (Index c = 0; c < head.weight.cols(); ++c) out << ',' << format_value(head.weight(y, c));
    out << ',' << format_value(head.bias(y)) << '\n';
  }
}

Head<double> parse_head_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("head CSV is empty");
  const auto header = split_csv_line(line);
  if (header.size() < 3 || header.front() != "class" || header.back() != "bias")
    throw DataError("head CSV header must be class,w_0,...,bias");
  const auto n = static_cast<Index>(header.size() - 2);
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    if (static_cast<Index>(cells.size()) != n + 2)
      throw DataError("head CSV row " + std::to_string(rows.size()) + " has the wrong width");
    std::vector<double> vals;
    for (std::size_t k = 1; k < cells.size(); ++k) vals.push_back(parse_double(cells[k], rows.size()));
    rows.push_back(std::move(vals));
  }
  Head<double> h{Matrix<double>(static_cast<Index>(rows.size()), n),
                 Vector<double>(static_cast<Index>(rows.size()))};
  for (std::size_t y = 0; y < rows.size(); ++y) {
    for (Index c = 0; c < n; ++c) h.weight(static_cast<Index>(y), c) = rows[y][static_cast<std::size_t>(c)];
    h.bias(static_cast<Index>(y)) = rows[y].back();
  }
  return h;
}

double head_concept_overlap(const Head<float>& head, const ConceptBank& bank) {
  double total = 0;
  for (int y = 0; y < bank.n_classes(); ++y) {
    const auto& pos = bank.positives(y);
    const auto mask = bank.positive_mask(y);
    const Vector<float> row = head.weight.row(y).transpose();
    int hits = 0;
    for (int c : top_k_indices(row, static_cast<int>(pos.size())))
      hits += mask[static_cast<std::size_t>(c)] ? 1 : 0;
    total += static_cast<double>(hits) / static_cast<double>(pos.size());
  }
  return total / bank.n_classes();
}

}  // namespace coatcbm
