// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "coatcbm/scoring.hpp"
#include "coatcbm/tensorio.hpp"
#include "coatcbm/trainer.hpp"

#include <iosfwd>
#include <map>
#include <string>
#include <tuple>
#include <vector>

namespace coatcbm {

enum class SubjectType { image, klass };

/// Boolean relevance judgments R(image, concept) and R(class, concept).
class RelevanceOracle {
 public:
  virtual ~RelevanceOracle() = default;
  virtual bool image_relevant(int image, int concept_id) = 0;
  virtual bool class_relevant(int label, int concept_id) = 0;
};

/// File-backed oracle. CSV rows: subject_type,subject_id,concept_index,relevant
/// with subject_type in {image, class} and relevant in {0, 1}.
class RelevanceTable : public RelevanceOracle {
 public:
  void set(SubjectType type, int subject, int concept_id, bool relevant);
  bool lookup(SubjectType type, int subject, int concept_id) const;
  bool image_relevant(int image, int concept_id) override {
    return lookup(SubjectType::image, image, concept_id);
  }
  bool class_relevant(int label, int concept_id) override {
    return lookup(SubjectType::klass, label, concept_id);
  }
  std::size_t size() const { return entries_.size(); }

  /// Every (image, concept) and (class, concept) pair, with relevance equal
  /// to membership in the true class's positive set.
  static RelevanceTable from_ground_truth(const std::vector<int>& labels, const ConceptBank& bank);
  static RelevanceTable read_csv(const fs::path& path);
  static RelevanceTable parse_csv(std::istream& in);
  void write_csv(const fs::path& path) const;
  void write_csv(std::ostream& out) const;

 private:
  std::map<std::tuple<SubjectType, int, int>, bool> entries_;
};

struct EvalSample {
  int image = 0;
  int label = 0;
  int predicted = 0;
  Vector<double> scores;
  int n_positive = 0;  // N_i, the size of the true class's positive set
};

struct EvalSet {
  std::vector<EvalSample> samples;
  void validate() const;
};

EvalSet make_eval_set(const ScoredSet& scored, const ConceptBank& bank);

/// Mean over images of the fraction of its top-N_i concepts that the oracle
/// judges relevant to the image.
double cdr(const EvalSet& set, RelevanceOracle& oracle);

/// As cdr, but relevance is judged against the predicted class.
double cc(const EvalSet& set, RelevanceOracle& oracle);

/// Mean concept score per true class. Classes without samples yield a NaN row
/// and are listed in `empty_classes`.
struct AssocMap {
  Matrix<double> means;  // |Y| x n
  std::vector<int> empty_classes;
};

AssocMap assoc_map(const ScoredSet& scored, int n_classes);
AssocMap assoc_map(const Dataset& test_set, const Model<float>& model, const ConceptBank& bank);

/// Mean on-class-concept entry minus mean off-class entry of an association
/// map; larger means a sharper block-diagonal structure.
double block_diagonal_gap(const Matrix<double>& map, const ConceptBank& bank);

void write_matrix_csv(const Matrix<double>& m, const std::vector<std::string>& row_names,
                      const std::vector<std::string>& col_names, std::ostream& out);

/// Rows `class,w_0,...,w_{n-1},bias`, values printed with 9 significant digits
/// (exact for f32).
void export_head(const Head<float>& head, const ConceptBank& bank, std::ostream& out);
Head<double> parse_head_csv(std::istream& in);

/// Fraction of each class's top-N_i positive head weights that fall on its own
/// concepts, averaged over classes.
double head_concept_overlap(const Head<float>& head, const ConceptBank& bank);

}  // namespace coatcbm
