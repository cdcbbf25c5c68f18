#pragma once

// Activation bundles: manifest, labels, concept annotations and one
// activation file per layer. Spatial layers are reduced to [N x U] by global
// average pooling at load time; nothing downstream sees spatial tensors.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "bagel/detail/io.hpp"
#include "bagel/error.hpp"
#include "bagel/matrix.hpp"

namespace bagel {

struct LayerDescriptor {
  std::string layer_id;
  int index = 0;  // 1-based position in the network
  std::size_t unit_count = 0;
  bool spatial = false;
  std::optional<std::size_t> height;
  std::optional<std::size_t> width;
  std::string file;  // relative to the bundle root; .f32 or .csv

  bool operator==(const LayerDescriptor&) const = default;
};

struct Concept {
  std::string name;
  std::string category;
  bool operator==(const Concept&) const = default;
};

struct DatasetManifest {
  std::string dataset_name;
  std::size_t image_count = 0;
  std::vector<std::string> class_names;
  std::vector<Concept> concepts;
  std::vector<LayerDescriptor> layers;

  std::size_t num_classes() const noexcept { return class_names.size(); }
  std::size_t num_concepts() const noexcept { return concepts.size(); }
  std::size_t num_layers() const noexcept { return layers.size(); }

  bool operator==(const DatasetManifest&) const = default;
};

/// Spatial activations of one layer, laid out [N][U][H][W].
struct SpatialTensor {
  std::size_t n = 0, units = 0, height = 0, width = 0;
  std::vector<float> values;

  float at(std::size_t i, std::size_t u, std::size_t y, std::size_t x) const {
    return values[((i * units + u) * height + y) * width + x];
  }
};

/// In-memory, validated bundle. Immutable once loaded.
struct Dataset {
  DatasetManifest manifest;
  std::vector<std::string> image_ids;
  std::vector<int> labels;               // class index per image
  Matrix<std::uint8_t> annotations;      // [N x K], entries 0/1
  std::vector<Matrix<float>> activations;  // pooled [N x U_l], one per layer, manifest order

  std::vector<std::uint8_t> concept_labels(std::size_t k) const { return annotations.column(k); }

  std::size_t layer_position(const std::string& layer_id) const {
    for (std::size_t i = 0; i < manifest.layers.size(); ++i)
      if (manifest.layers[i].layer_id == layer_id) return i;
    throw InvalidArgument("unknown layer '" + layer_id + "'");
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(manifest.num_classes(), 0);
    for (int y : labels) ++counts[static_cast<std::size_t>(y)];
    return counts;
  }
};

/// Mean over every spatial position of each (image, unit) map.
inline Matrix<float> gap_pool(const SpatialTensor& t) {
  if (t.height * t.width == 0) throw InvalidArgument("gap_pool: empty spatial extent");
  if (t.values.size() != t.n * t.units * t.height * t.width)
    throw InvalidArgument("gap_pool: tensor storage does not match its shape");
  const std::size_t area = t.height * t.width;
  Matrix<float> out(t.n, t.units);
  for (std::size_t i = 0; i < t.n; ++i) {
    for (std::size_t u = 0; u < t.units; ++u) {
      const float* map = t.values.data() + (i * t.units + u) * area;
      double sum = 0.0;
      for (std::size_t p = 0; p < area; ++p) sum += map[p];
      out(i, u) = static_cast<float>(sum / static_cast<double>(area));
    }
  }
  return out;
}

/// Stratified k-fold assignment for a binary target. Positives and negatives
/// are shuffled independently with a seeded generator, then dealt round-robin
/// as one sequence so both fold sizes and per-fold positive counts differ by at
/// most one. Returns nullopt when either label value has fewer than k members,
/// meaning cross-validation must be skipped.
inline std::optional<std::vector<int>> stratified_folds(std::span<const std::uint8_t> labels,
                                                        int k, std::uint64_t seed) {
  if (k < 2) throw InvalidArgument("stratified_folds: k must be >= 2");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] ? pos : neg).push_back(i);
  const auto kk = static_cast<std::size_t>(k);
  if (pos.size() < kk || neg.size() < kk) return std::nullopt;

  // Fisher-Yates on raw engine output: std::shuffle and the std
  // distributions are implementation-defined, which would break bit-identical
  // folds across standard libraries.
  std::mt19937_64 rng(seed);
  auto shuffle = [&rng](std::vector<std::size_t>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng() % i]);
  };
  shuffle(pos);
  shuffle(neg);

  std::vector<int> fold(labels.size(), -1);
  std::size_t slot = 0;
  for (auto idx : pos) fold[idx] = static_cast<int>(slot++ % kk);
  for (auto idx : neg) fold[idx] = static_cast<int>(slot++ % kk);
  return fold;
}

namespace detail {

inline double parse_number(std::string_view s, const std::string& file, const std::string& where) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size())
    throw BundleError(file, where, "not a number: '" + std::string(s) + "'");
  return v;
}

inline DatasetManifest parse_manifest(const nlohmann::json& j, const std::string& file) {
  auto fail = [&](const std::string& msg) -> BundleError { return BundleError(file, "", msg); };
  static const std::set<std::string> top_keys{"dataset_name", "image_count", "classes", "concepts",
                                               "layers"};
  static const std::set<std::string> layer_keys{"layer_id", "index",  "unit_count", "spatial",
                                                "height",   "width",  "file"};
  if (!j.is_object()) throw fail("manifest must be a JSON object");
  for (auto& [key, _] : j.items())
    if (!top_keys.contains(key)) throw fail("unknown manifest key '" + key + "'");
  for (const auto& key : top_keys)
    if (!j.contains(key)) throw fail("missing manifest key '" + key + "'");

  DatasetManifest m;
  try {
    m.dataset_name = j.at("dataset_name").get<std::string>();
    auto count = j.at("image_count").get<long long>();
    if (count < 1) throw fail("image_count must be >= 1");
    m.image_count = static_cast<std::size_t>(count);
    m.class_names = j.at("classes").get<std::vector<std::string>>();
    for (const auto& c : j.at("concepts")) {
      if (!c.contains("name") || !c.contains("category"))
        throw fail("every concept needs exactly one name and one category");
      m.concepts.push_back({c.at("name").get<std::string>(), c.at("category").get<std::string>()});
    }
    for (const auto& l : j.at("layers")) {
      for (auto& [key, _] : l.items())
        if (!layer_keys.contains(key)) throw fail("unknown layer key '" + key + "'");
      LayerDescriptor d;
      d.layer_id = l.at("layer_id").get<std::string>();
      d.index = l.at("index").get<int>();
      auto units = l.at("unit_count").get<long long>();
      if (units < 1) throw fail("layer '" + d.layer_id + "': unit_count must be >= 1");
      d.unit_count = static_cast<std::size_t>(units);
      d.spatial = l.at("spatial").get<bool>();
      if (l.contains("height")) d.height = l.at("height").get<std::size_t>();
      if (l.contains("width")) d.width = l.at("width").get<std::size_t>();
      d.file = l.at("file").get<std::string>();
      if (d.spatial != (d.height.has_value() && d.width.has_value()) ||
          (!d.spatial && (d.height || d.width)))
        throw fail("layer '" + d.layer_id + "': height/width present iff spatial");
      if (d.spatial && *d.height * *d.width == 0)
        throw fail("layer '" + d.layer_id + "': empty spatial extent");
      m.layers.push_back(std::move(d));
    }
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("malformed manifest: ") + e.what());
  }

  if (m.class_names.size() < 2) throw fail("need at least 2 classes");
  if (m.concepts.empty()) throw fail("need at least 1 concept");
  if (m.layers.empty()) throw fail("need at least 1 layer");
  if (std::set(m.class_names.begin(), m.class_names.end()).size() != m.class_names.size())
    throw fail("duplicate class name");
  std::set<std::string> concept_names;
  for (const auto& c : m.concepts)
    if (!concept_names.insert(c.name).second) throw fail("duplicate concept name '" + c.name + "'");
  std::set<std::string> layer_ids;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    if (!layer_ids.insert(m.layers[i].layer_id).second)
      throw fail("duplicate layer_id '" + m.layers[i].layer_id + "'");
  }
  std::vector<int> indices;
  for (const auto& l : m.layers) indices.push_back(l.index);
  std::sort(indices.begin(), indices.end());
  for (std::size_t i = 0; i < indices.size(); ++i)
    if (indices[i] != static_cast<int>(i) + 1) throw fail("layer indices must be 1..L without gaps");
  std::stable_sort(m.layers.begin(), m.layers.end(),
                   [](const auto& a, const auto& b) { return a.index < b.index; });
  return m;
}

inline nlohmann::ordered_json manifest_to_json(const DatasetManifest& m) {
  nlohmann::ordered_json j;
  j["dataset_name"] = m.dataset_name;
  j["image_count"] = m.image_count;
  j["classes"] = m.class_names;
  auto concepts = nlohmann::ordered_json::array();
  for (const auto& c : m.concepts) concepts.push_back({{"name", c.name}, {"category", c.category}});
  j["concepts"] = concepts;
  auto layers = nlohmann::ordered_json::array();
  for (const auto& l : m.layers) {
    nlohmann::ordered_json lj;
    lj["layer_id"] = l.layer_id;
    lj["index"] = l.index;
    lj["unit_count"] = l.unit_count;
    lj["spatial"] = l.spatial;
    if (l.height) lj["height"] = *l.height;
    if (l.width) lj["width"] = *l.width;
    lj["file"] = l.file;
    layers.push_back(lj);
  }
  j["layers"] = layers;
  return j;
}

/// Loads one layer's values as a flat row-major float buffer of `row_width`
/// values per image, checking row count and finiteness.
inline std::vector<float> load_layer_values(const std::filesystem::path& path,
                                            const LayerDescriptor& layer, std::size_t n,
                                            std::size_t row_width) {
  const std::string file = path.string();
  if (!std::filesystem::exists(path))
    throw BundleError(file, "", "missing activation file for layer '" + layer.layer_id + "'");
  std::vector<float> values;
  if (path.extension() == ".f32") {
    auto bytes = read_file(path);
    const std::size_t row_bytes = row_width * sizeof(float);
    if (bytes.size() % row_bytes != 0)
      throw BundleError(file, "byte " + std::to_string(bytes.size()),
                        "dimension mismatch in layer '" + layer.layer_id + "': size is not a multiple of " +
                            std::to_string(row_width) + " floats");
    const std::size_t rows = bytes.size() / row_bytes;
    if (rows != n)
      throw BundleError(file, "", "dimension mismatch in layer '" + layer.layer_id + "': " +
                                      std::to_string(rows) + " rows, manifest declares " +
                                      std::to_string(n));
    values = decode_le<float>(bytes);
    for (std::size_t i = 0; i < values.size(); ++i)
      if (!std::isfinite(values[i]))
        throw BundleError(file, "byte " + std::to_string(i * sizeof(float)),
                          "non-finite activation in layer '" + layer.layer_id + "'");
  } else if (path.extension() == ".csv") {
    auto table = parse_csv(read_file(path));
    if (table.rows.size() != n)
      throw BundleError(file, "", "dimension mismatch in layer '" + layer.layer_id + "': " +
                                      std::to_string(table.rows.size()) + " rows, manifest declares " +
                                      std::to_string(n));
    values.reserve(n * row_width);
    for (std::size_t r = 0; r < n; ++r) {
      const auto where = "line " + std::to_string(table.line_numbers[r]);
      if (table.rows[r].size() != row_width)
        throw BundleError(file, where, "dimension mismatch in layer '" + layer.layer_id + "': " +
                                           std::to_string(table.rows[r].size()) + " values, expected " +
                                           std::to_string(row_width));
      for (const auto& field : table.rows[r]) {
        double v = parse_number(field, file, where);
        if (!std::isfinite(v))
          throw BundleError(file, where, "non-finite activation in layer '" + layer.layer_id + "'");
        values.push_back(static_cast<float>(v));
      }
    }
  } else {
    throw BundleError(file, "", "unsupported activation format (expected .f32 or .csv)");
  }
  return values;
}

}  // namespace detail

/// Loads and cross-validates a bundle rooted at `root`.
inline Dataset load_bundle(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  const auto manifest_path = root / "manifest.json";
  if (!fs::exists(manifest_path)) throw BundleError(manifest_path.string(), "", "missing file");
  nlohmann::json mj;
  try {
    mj = nlohmann::json::parse(detail::read_file(manifest_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw BundleError(manifest_path.string(), "byte " + std::to_string(e.byte), "invalid JSON");
  }

  Dataset ds;
  ds.manifest = detail::parse_manifest(mj, manifest_path.string());
  const auto& m = ds.manifest;
  const std::size_t n = m.image_count;

  // labels.csv: image_id,class
  {
    const auto path = root / "labels.csv";
    const std::string file = path.string();
    if (!fs::exists(path)) throw BundleError(file, "", "missing file");
    auto table = detail::parse_csv(detail::read_file(path));
    if (table.rows.empty() || table.rows[0].size() != 2 || table.rows[0][0] != "image_id" ||
        table.rows[0][1] != "class")
      throw BundleError(file, "line 1", "header must be 'image_id,class'");
    if (table.rows.size() - 1 != n)
      throw BundleError(file, "", "dimension mismatch: " + std::to_string(table.rows.size() - 1) +
                                      " labels, manifest declares " + std::to_string(n));
    std::map<std::string, int> by_name;
    for (std::size_t i = 0; i < m.class_names.size(); ++i) by_name[m.class_names[i]] = static_cast<int>(i);
    for (std::size_t r = 1; r < table.rows.size(); ++r) {
      const auto& row = table.rows[r];
      const auto where = "line " + std::to_string(table.line_numbers[r]);
      if (row.size() != 2) throw BundleError(file, where, "expected 2 fields");
      int cls = -1;
      if (auto it = by_name.find(row[1]); it != by_name.end()) {
        cls = it->second;
      } else {
        double v = detail::parse_number(row[1], file, where);
        if (v != std::floor(v) || v < 0 || v >= static_cast<double>(m.num_classes()))
          throw BundleError(file, where, "class '" + row[1] + "' is not a known class name or index");
        cls = static_cast<int>(v);
      }
      ds.image_ids.push_back(row[0]);
      ds.labels.push_back(cls);
    }
    auto counts = ds.class_counts();
    for (std::size_t i = 0; i < counts.size(); ++i)
      if (counts[i] == 0) throw BundleError(file, "", "class '" + m.class_names[i] + "' has no samples");
  }

  // annotations.csv: image_id,<concept_1>,...,<concept_K>
  {
    const auto path = root / "annotations.csv";
    const std::string file = path.string();
    if (!fs::exists(path)) throw BundleError(file, "", "missing file");
    auto table = detail::parse_csv(detail::read_file(path));
    const std::size_t k = m.num_concepts();
    if (table.rows.empty() || table.rows[0].size() != k + 1 || table.rows[0][0] != "image_id")
      throw BundleError(file, "line 1", "header must be 'image_id' followed by the " +
                                            std::to_string(k) + " manifest concepts");
    for (std::size_t c = 0; c < k; ++c)
      if (table.rows[0][c + 1] != m.concepts[c].name)
        throw BundleError(file, "line 1", "column " + std::to_string(c + 2) + " is '" +
                                              table.rows[0][c + 1] + "', manifest expects '" +
                                              m.concepts[c].name + "'");
    if (table.rows.size() - 1 != n)
      throw BundleError(file, "", "dimension mismatch: " + std::to_string(table.rows.size() - 1) +
                                      " rows, manifest declares " + std::to_string(n));
    ds.annotations = Matrix<std::uint8_t>(n, k);
    for (std::size_t r = 1; r < table.rows.size(); ++r) {
      const auto& row = table.rows[r];
      const auto where = "line " + std::to_string(table.line_numbers[r]);
      if (row.size() != k + 1) throw BundleError(file, where, "expected " + std::to_string(k + 1) + " fields");
      if (row[0] != ds.image_ids[r - 1])
        throw BundleError(file, where, "image_id '" + row[0] + "' does not match labels.csv ('" +
                                           ds.image_ids[r - 1] + "')");
      for (std::size_t c = 0; c < k; ++c) {
        double v = detail::parse_number(row[c + 1], file, where);
        if (v != 0.0 && v != 1.0)
          throw BundleError(file, where + ", column " + std::to_string(c + 2),
                            "non-binary annotation '" + row[c + 1] + "'");
        ds.annotations(r - 1, c) = static_cast<std::uint8_t>(v);
      }
    }
  }

  for (const auto& layer : m.layers) {
    const auto path = root / layer.file;
    if (layer.spatial) {
      SpatialTensor t{n, layer.unit_count, *layer.height, *layer.width, {}};
      t.values = detail::load_layer_values(path, layer, n, layer.unit_count * t.height * t.width);
      ds.activations.push_back(gap_pool(t));
    } else {
      ds.activations.emplace_back(n, layer.unit_count,
                                  detail::load_layer_values(path, layer, n, layer.unit_count));
    }
  }
  return ds;
}

/// Writes a dataset as a bundle with pooled .f32 layers. Loading the result
/// reproduces the activations bit-exactly.
inline void save_bundle(const Dataset& ds, const std::filesystem::path& root) {
  std::filesystem::create_directories(root);
  DatasetManifest m = ds.manifest;
  for (auto& l : m.layers) {
    l.spatial = false;
    l.height.reset();
    l.width.reset();
    l.file = l.layer_id + ".f32";
  }
  detail::write_file_atomic(root / "manifest.json", detail::manifest_to_json(m).dump(2) + "\n");

  std::string labels = "image_id,class\n";
  for (std::size_t i = 0; i < ds.labels.size(); ++i)
    labels += ds.image_ids[i] + "," + m.class_names[static_cast<std::size_t>(ds.labels[i])] + "\n";
  detail::write_file_atomic(root / "labels.csv", labels);

  std::string ann = "image_id";
  for (const auto& c : m.concepts) ann += "," + c.name;
  ann += "\n";
  for (std::size_t i = 0; i < ds.annotations.rows(); ++i) {
    ann += ds.image_ids[i];
    for (auto v : ds.annotations.row(i)) ann += v ? ",1" : ",0";
    ann += "\n";
  }
  detail::write_file_atomic(root / "annotations.csv", ann);

  for (std::size_t l = 0; l < m.layers.size(); ++l)
    detail::write_file_atomic(root / m.layers[l].file, detail::encode_le<float>(ds.activations[l].flat()));
}

}  // namespace bagel
