// SPDX-License-Identifier: Apache-2.0
#include "coatcbm/tensorio.hpp"

#include "json.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>

namespace coatcbm {

using json = nlohmann::json;

namespace {

constexpr const char* kManifest = "manifest.json";

std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
  }
  return v;
}

void check_entry_name(const std::string& name) {
  if (name.empty()) throw DataError("bundle entry name is empty");
  if (name.find_first_of("/\\") != std::string::npos)
    throw DataError("bundle entry name '" + name + "' contains a path separator");
  if (name == "manifest") throw DataError("bundle entry name 'manifest' is reserved");
}

std::int64_t shape_product(const std::vector<std::int64_t>& shape, const std::string& name) {
  std::int64_t n = 1;
  for (auto s : shape) {
    if (s <= 0) throw DataError("entry '" + name + "' has a nonpositive dimension");
    n *= s;
  }
  return n;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_json(const json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw DataError("write failed for " + path.string());
}

}  // namespace

std::int64_t Tensor::element_count() const {
  std::int64_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

void write_bundle(const TensorBundle& bundle, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory " + dir.string() + ": " + ec.message());

  json entries = json::array();
  for (const auto& [name, t] : bundle) {
    check_entry_name(name);
    const auto count = shape_product(t.shape, name);
    if (count != static_cast<std::int64_t>(t.data.size()))
      throw DataError("entry '" + name + "': shape product " + std::to_string(count) +
                      " != value count " + std::to_string(t.data.size()));

    const std::string file = name + ".f32";
    std::vector<std::uint32_t> raw(t.data.size());
    for (std::size_t i = 0; i < t.data.size(); ++i)
      raw[i] = to_little(std::bit_cast<std::uint32_t>(t.data[i]));
    std::ofstream out(dir / file, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + (dir / file).string());
    out.write(reinterpret_cast<const char*>(raw.data()),
              static_cast<std::streamsize>(raw.size() * sizeof(std::uint32_t)));
    if (!out) throw DataError("write failed for " + (dir / file).string());

    entries.push_back({{"name", name},
                       {"dtype", "f32"},
                       {"shape", t.shape},
                       {"file", file},
                       {"count", count}});
  }
  json manifest = {{"format", "coatcbm-bundle"},
                   {"version", 1},
                   {"byte_order", "little"},
                   {"layout", "row-major"},
                   {"entries", entries}};
  write_json(manifest, dir / kManifest);
}

TensorBundle read_bundle(const fs::path& dir) {
  if (!fs::exists(dir / kManifest)) throw DataError("missing manifest: " + (dir / kManifest).string());
  const json manifest = read_json(dir / kManifest);

  TensorBundle bundle;
  try {
    if (manifest.value("byte_order", "little") != "little")
      throw DataError("unsupported byte_order in " + dir.string());
    if (manifest.value("layout", "row-major") != "row-major")
      throw DataError("unsupported layout in " + dir.string());
    for (const auto& e : manifest.at("entries")) {
      const auto name = e.at("name").get<std::string>();
      check_entry_name(name);
      const auto dtype = e.at("dtype").get<std::string>();
      if (dtype != "f32") throw DataError("entry '" + name + "': unknown dtype '" + dtype + "'");
      Tensor t;
      t.shape = e.at("shape").get<std::vector<std::int64_t>>();
      const auto count = shape_product(t.shape, name);
      if (e.contains("count") && e.at("count").get<std::int64_t>() != count)
        throw DataError("entry '" + name + "': count does not match shape");
      const auto file = e.at("file").get<std::string>();
      if (file.find_first_of("/\\") != std::string::npos)
        throw DataError("entry '" + name + "': data file escapes bundle directory");

      const auto path = dir / file;
      std::error_code ec;
      const auto bytes = fs::file_size(path, ec);
      if (ec) throw DataError("entry '" + name + "': cannot stat " + path.string());
      if (bytes != static_cast<std::uintmax_t>(count) * 4)
        throw DataError("entry '" + name + "': shape/length mismatch (expected " +
                        std::to_string(count * 4) + " bytes, found " + std::to_string(bytes) +
                        "); corrupt bundle");
      std::vector<std::uint32_t> raw(static_cast<std::size_t>(count));
      std::ifstream in(path, std::ios::binary);
      in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(bytes));
      if (!in) throw DataError("entry '" + name + "': read failed");
      t.data.resize(raw.size());
      for (std::size_t i = 0; i < raw.size(); ++i) t.data[i] = std::bit_cast<float>(to_little(raw[i]));
      if (!bundle.emplace(name, std::move(t)).second)
        throw DataError("duplicate bundle entry '" + name + "'");
    }
  } catch (const json::exception& e) {
    throw DataError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  return bundle;
}

bool bitwise_equal(const TensorBundle& a, const TensorBundle& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [name, ta] : a) {
    auto it = b.find(name);
    if (it == b.end()) return false;
    const auto& tb = it->second;
    if (ta.shape != tb.shape || ta.data.size() != tb.data.size()) return false;
    if (!ta.data.empty() &&
        std::memcmp(ta.data.data(), tb.data.data(), ta.data.size() * sizeof(float)) != 0)
      return false;
  }
  return true;
}

const Tensor& require_entry(const TensorBundle& b, const std::string& name) {
  auto it = b.find(name);
  if (it == b.end()) throw DataError("bundle is missing entry '" + name + "'");
  return it->second;
}

Matrix<float> to_matrix(const Tensor& t, const std::string& name) {
  if (t.shape.size() != 2) throw DataError("entry '" + name + "' must be rank 2");
  Matrix<float> m(t.shape[0], t.shape[1]);
  std::size_t k = 0;
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) m(r, c) = t.data[k++];
  return m;
}

Vector<float> to_vector(const Tensor& t, const std::string& name) {
  if (t.shape.size() != 1) throw DataError("entry '" + name + "' must be rank 1");
  return Eigen::Map<const Vector<float>>(t.data.data(), static_cast<Index>(t.data.size()));
}

// ---------------------------------------------------------------------------

void Dataset::validate() const {
  if (n_patches < 0) throw DataError("dataset: n_patches must be >= 0");
  if (dim < 1) throw DataError("dataset: dim must be >= 1");
  if (n_classes < 1) throw DataError("dataset: n_classes must be >= 1");
  if (features.size() != labels.size())
    throw DataError("dataset: feature count " + std::to_string(features.size()) +
                    " != label count " + std::to_string(labels.size()));
  if (!descriptions.empty() && descriptions.size() != labels.size())
    throw DataError("dataset: description count does not match sample count");
  for (std::size_t i = 0; i < features.size(); ++i) {
    const auto& z = features[i];
    if (z.rows() != n_patches + 1 || z.cols() != dim)
      throw DataError("dataset: sample " + std::to_string(i) + " has feature shape (" +
                      std::to_string(z.rows()) + ", " + std::to_string(z.cols()) + "), expected (" +
                      std::to_string(n_patches + 1) + ", " + std::to_string(dim) +
                      ") with row 0 the global token");
    if (!z.allFinite())
      throw DataError("dataset: sample " + std::to_string(i) + " has non-finite features");
    if (labels[i] < 0 || labels[i] >= n_classes)
      throw DataError("dataset: sample " + std::to_string(i) + " label " +
                      std::to_string(labels[i]) + " out of range [0, " +
                      std::to_string(n_classes) + ")");
  }
}

void write_dataset(const Dataset& ds, const fs::path& dir) {
  ds.validate();
  const auto m = static_cast<std::int64_t>(ds.size());
  const auto rows = static_cast<std::int64_t>(ds.n_patches + 1);
  Tensor feats;
  feats.shape = {m, rows, ds.dim};
  feats.data.reserve(static_cast<std::size_t>(m * rows * ds.dim));
  for (const auto& z : ds.features)
    for (Index r = 0; r < z.rows(); ++r)
      for (Index c = 0; c < z.cols(); ++c) feats.data.push_back(z(r, c));
  Tensor labels;
  labels.shape = {m};
  for (int y : ds.labels) labels.data.push_back(static_cast<float>(y));

  TensorBundle b;
  if (m > 0) {
    b["features"] = std::move(feats);
    b["labels"] = std::move(labels);
  }
  write_bundle(b, dir);
  json meta = {{"n_patches", ds.n_patches}, {"dim", ds.dim}, {"n_classes", ds.n_classes},
               {"n_samples", m}};
  if (!ds.descriptions.empty()) meta["descriptions"] = ds.descriptions;
  write_json(meta, dir / "meta.json");
}

Dataset load_dataset(const fs::path& dir) {
  const json meta = read_json(dir / "meta.json");
  Dataset ds;
  try {
    ds.n_patches = meta.at("n_patches").get<int>();
    ds.dim = meta.at("dim").get<int>();
    ds.n_classes = meta.at("n_classes").get<int>();
    if (meta.contains("descriptions"))
      ds.descriptions = meta.at("descriptions").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw DataError("malformed meta.json in " + dir.string() + ": " + e.what());
  }
  const auto bundle = read_bundle(dir);
  if (bundle.empty() && meta.value("n_samples", 0) == 0) {
    ds.validate();
    return ds;
  }
  const auto& feats = require_entry(bundle, "features");
  const auto& labels = require_entry(bundle, "labels");
  if (feats.shape.size() != 3)
    throw DataError("dataset: 'features' must be rank 3 (M, N_p+1, d)");
  if (labels.shape.size() != 1 || labels.shape[0] != feats.shape[0])
    throw DataError("dataset: 'labels' must be rank 1 with one entry per sample");
  const auto m = feats.shape[0], rows = feats.shape[1], cols = feats.shape[2];
  if (rows != ds.n_patches + 1 || cols != ds.dim)
    throw DataError("dataset: feature tensor shaped (" + std::to_string(rows) + ", " +
                    std::to_string(cols) + ") per sample, expected (" +
                    std::to_string(ds.n_patches + 1) + ", " + std::to_string(ds.dim) +
                    "); row 0 must be the global token");
  ds.features.reserve(static_cast<std::size_t>(m));
  ds.labels.reserve(static_cast<std::size_t>(m));
  for (std::int64_t i = 0; i < m; ++i) {
    Matrix<float> z(rows, cols);
    const float* src = feats.data.data() + i * rows * cols;
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < cols; ++c) z(r, c) = src[r * cols + c];
    ds.features.push_back(std::move(z));
    const float y = labels.data[static_cast<std::size_t>(i)];
    if (!std::isfinite(y) || std::floor(y) != y)
      throw DataError("dataset: sample " + std::to_string(i) + " label is not integral");
    ds.labels.push_back(static_cast<int>(y));
  }
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------

const std::vector<int>& ConceptBank::positives(int label) const {
  if (label < 0 || label >= n_classes())
    throw DataError("class index " + std::to_string(label) + " out of range");
  return class_to_concepts[static_cast<std::size_t>(label)];
}

std::vector<char> ConceptBank::positive_mask(int label) const {
  std::vector<char> mask(static_cast<std::size_t>(n_concepts()), 0);
  for (int c : positives(label)) mask[static_cast<std::size_t>(c)] = 1;
  return mask;
}

void ConceptBank::validate() const {
  const int n = n_concepts();
  if (n < 1) throw DataError("concept bank: no concepts");
  if (class_names.empty()) throw DataError("concept bank: no classes");
  if (class_to_concepts.size() != class_names.size())
    throw DataError("concept bank: class_to_concepts has " +
                    std::to_string(class_to_concepts.size()) + " classes, class_names has " +
                    std::to_string(class_names.size()));
  if (text_embeddings.rows() != n || text_embeddings.cols() < 1)
    throw DataError("concept bank: text_embeddings must be (" + std::to_string(n) + ", d_c)");
  if (!text_embeddings.allFinite()) throw DataError("concept bank: non-finite text embeddings");
  for (std::size_t y = 0; y < class_to_concepts.size(); ++y) {
    const auto& pos = class_to_concepts[y];
    if (pos.empty()) throw DataError("concept bank: class " + std::to_string(y) + " has no positives");
    std::set<int> seen;
    for (int c : pos) {
      if (c < 0 || c >= n)
        throw DataError("concept bank: class " + std::to_string(y) + " references concept " +
                        std::to_string(c) + " out of range [0, " + std::to_string(n) + ")");
      if (!seen.insert(c).second)
        throw DataError("concept bank: class " + std::to_string(y) + " lists concept " +
                        std::to_string(c) + " twice");
    }
  }
}

void write_concept_bank(const ConceptBank& bank, const fs::path& dir) {
  bank.validate();
  write_bundle({{"text_embeddings", to_tensor(bank.text_embeddings)}}, dir);
  json j = {{"concepts", bank.concepts},
            {"class_names", bank.class_names},
            {"class_to_concepts", bank.class_to_concepts}};
  write_json(j, dir / "bank.json");
}

ConceptBank load_concept_bank(const fs::path& dir) {
  const json j = read_json(dir / "bank.json");
  ConceptBank bank;
  try {
    bank.concepts = j.at("concepts").get<std::vector<std::string>>();
    bank.class_names = j.at("class_names").get<std::vector<std::string>>();
    const auto& c2c = j.at("class_to_concepts");
    if (c2c.is_object()) {
      // {"0": [...], "1": [...]} keyed by class index
      bank.class_to_concepts.resize(bank.class_names.size());
      for (const auto& [key, list] : c2c.items()) {
        std::size_t pos = 0;
        int y = -1;
        try {
          y = std::stoi(key, &pos);
        } catch (const std::exception&) {
        }
        if (pos != key.size() || y < 0 || y >= static_cast<int>(bank.class_names.size()))
          throw DataError("concept bank: class_to_concepts key '" + key + "' is not a class index");
        bank.class_to_concepts[static_cast<std::size_t>(y)] = list.get<std::vector<int>>();
      }
    } else {
      bank.class_to_concepts = c2c.get<std::vector<std::vector<int>>>();
    }
  } catch (const json::exception& e) {
    throw DataError("malformed bank.json in " + dir.string() + ": " + e.what());
  }
  const auto bundle = read_bundle(dir);
  bank.text_embeddings = to_matrix(require_entry(bundle, "text_embeddings"), "text_embeddings");
  bank.validate();
  return bank;
}

}  // namespace coatcbm
