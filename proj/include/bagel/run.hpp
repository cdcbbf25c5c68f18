#pragma once

// Pipeline stages over a persistent run directory. Each stage reads the
// bundle and/or the artifacts of earlier stages, writes its own artifacts
// atomically, and refreshes manifest.json with a SHA-256 of every file.
//
//   probes   -> probes.jsonl
//   analyze  -> bias_dataset.json, bias_model_<layer>.json, alignment.json
//   sweep    -> sweep.json, sweep.txt
//   rank     -> rankings.json
//   recall   -> recall.json
//   graph    -> graph.json, dynamics.json
//
// Artifacts contain no timestamps or absolute output paths, so rerunning a
// stage with the same inputs reproduces them byte for byte.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <openssl/evp.h>

#include "json.hpp"

#include "bagel/detail/io.hpp"
#include "bagel/error.hpp"
#include "bagel/ingest.hpp"
#include "bagel/kgraph.hpp"
#include "bagel/probes.hpp"
#include "bagel/stats.hpp"

namespace bagel::run {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

inline std::vector<double> default_tau_grid() {
  std::vector<double> grid;
  for (int i = 0; i <= 10; ++i) grid.push_back(i / 10.0);
  return grid;
}

struct RunConfig {
  fs::path bundle_path;
  fs::path output_dir;
  double tau = 0.5;
  std::vector<double> tau_grid = default_tau_grid();
  double tau_min = 0.1;
  std::vector<double> c_grid{0.01, 0.1, 1.0, 10.0};
  int folds = 5;
  std::uint64_t seed = 0;
  std::vector<std::string> layers;  // probes: restrict to these; graph: single-layer mode when one is given
  std::size_t top_k = 5;
  RankingMode mode = RankingMode::model_f1;
  bool include_gray = false;
  double train_fraction = 1.0;
  std::optional<fs::path> ranking_file;  // external rankings for recall
  int max_iterations = 1000;
  double tolerance = 1e-6;
  double default_c = 0.1;
};

/// Worker count: BAGEL_THREADS when set to a positive integer, otherwise the
/// hardware concurrency.
inline unsigned worker_count() {
  if (const char* env = std::getenv("BAGEL_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

inline ojson config_to_json(const RunConfig& c) {
  ojson j;
  j["bundle"] = c.bundle_path.generic_string();
  j["tau"] = c.tau;
  j["tau_grid"] = c.tau_grid;
  j["tau_min"] = c.tau_min;
  j["c_grid"] = c.c_grid;
  j["folds"] = c.folds;
  j["seed"] = c.seed;
  j["layers"] = c.layers;
  j["top_k"] = c.top_k;
  j["mode"] = to_string(c.mode);
  j["include_gray"] = c.include_gray;
  j["train_fraction"] = c.train_fraction;
  j["ranking_file"] = c.ranking_file ? ojson(c.ranking_file->generic_string()) : ojson(nullptr);
  j["max_iterations"] = c.max_iterations;
  j["tolerance"] = c.tolerance;
  j["default_c"] = c.default_c;
  return j;
}

inline void validate_config(const RunConfig& c) {
  if (c.tau < 0 || c.tau > 1) throw InvalidArgument("--tau must lie in [0, 1]");
  if (c.tau_min < 0 || c.tau_min > 1) throw InvalidArgument("--tau-min must lie in [0, 1]");
  effective_tau_grid(c.tau_grid, c.tau_min);
  if (c.c_grid.empty()) throw InvalidArgument("--c-grid must not be empty");
  for (double v : c.c_grid)
    if (!(v > 0)) throw InvalidArgument("--c-grid values must be positive");
  if (c.folds < 2) throw InvalidArgument("--folds must be >= 2");
  if (c.top_k < 1) throw InvalidArgument("--top-k must be >= 1");
  if (!(c.train_fraction > 0) || c.train_fraction > 1) throw InvalidArgument("--train-fraction must lie in (0, 1]");
}

// --- artifact bookkeeping --------------------------------------------------

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 computation failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xf];
  }
  return out;
}

/// Rewrites manifest.json with the hash of every artifact under `dir`.
inline ojson update_manifest(const fs::path& dir) {
  std::vector<std::string> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), dir).generic_string();
    if (rel == "manifest.json" || entry.path().extension() == ".tmp") continue;
    files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  ojson hashes = ojson::object();
  for (const auto& f : files) hashes[f] = sha256_hex(detail::read_file(dir / f));
  ojson manifest{{"files", hashes}};
  detail::write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

inline std::string layer_file_name(const std::string& layer_id) {
  std::string safe;
  for (char ch : layer_id)
    safe += (std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-' || ch == '.') ? ch : '_';
  return "bias_model_" + safe + ".json";
}

class StageWriter {
 public:
  StageWriter(std::string stage, const RunConfig& cfg) : stage_(std::move(stage)), cfg_(cfg) {
    fs::create_directories(cfg.output_dir / "logs");
  }
  void write(const std::string& name, const std::string& contents) {
    detail::write_file_atomic(cfg_.output_dir / name, contents);
  }
  void write_json(const std::string& name, const ojson& j) { write(name, j.dump(2) + "\n"); }
  void log(const std::string& line) { log_ += stage_ + ": " + line + "\n"; }
  /// Config snapshot, stage log and manifest.
  void finish() {
    write_json("config.json", config_to_json(cfg_));
    write("logs/" + stage_ + ".log", log_);
    update_manifest(cfg_.output_dir);
  }

 private:
  std::string stage_;
  const RunConfig& cfg_;
  std::string log_;
};

inline nlohmann::json read_json_artifact(const fs::path& path, const std::string& stage, const std::string& what) {
  if (!fs::exists(path)) throw MissingArtifact(stage, "missing " + what + " (" + path.filename().string() + ")");
  try {
    return nlohmann::json::parse(detail::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(path.string() + ": invalid JSON: " + e.what());
  }
}

// --- bias tables on disk ---------------------------------------------------

/// Everything later stages need, reconstructed from analyze's output.
struct BiasTables {
  std::string dataset_name;
  std::vector<std::string> classes;
  std::vector<std::size_t> class_counts;
  std::vector<Concept> concepts;
  BiasMatrix dataset;
  std::vector<BiasMatrix> models;  // layer order

  std::vector<double> class_priors() const {
    double total = 0;
    for (auto c : class_counts) total += static_cast<double>(c);
    std::vector<double> p;
    for (auto c : class_counts) p.push_back(static_cast<double>(c) / total);
    return p;
  }
};

inline ojson matrix_to_json(const Matrix<double>& m) {
  ojson rows = ojson::array();
  for (std::size_t i = 0; i < m.rows(); ++i) rows.push_back(std::vector<double>(m.row(i).begin(), m.row(i).end()));
  return rows;
}

inline Matrix<double> matrix_from_json(const nlohmann::json& j, std::size_t rows, std::size_t cols) {
  if (!j.is_array() || j.size() != rows) throw SchemaError("bias matrix row count mismatch");
  Matrix<double> m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    const auto row = j[i].get<std::vector<double>>();
    if (row.size() != cols) throw SchemaError("bias matrix column count mismatch");
    for (std::size_t k = 0; k < cols; ++k) {
      if (row[k] < 0 || row[k] > 1) throw SchemaError("bias matrix entry outside [0, 1]");
      m(i, k) = row[k];
    }
  }
  return m;
}

inline BiasTables load_bias_tables(const fs::path& dir, const std::string& stage) {
  const auto dj = read_json_artifact(dir / "bias_dataset.json", stage, "bias matrices (run 'analyze' first)");
  try {
    BiasTables t;
    t.dataset_name = dj.at("dataset_name").get<std::string>();
    t.classes = dj.at("classes").get<std::vector<std::string>>();
    t.class_counts = dj.at("class_counts").get<std::vector<std::size_t>>();
    for (const auto& c : dj.at("concepts")) t.concepts.push_back({c.at("name").get<std::string>(), c.at("category").get<std::string>()});
    const auto ni = t.classes.size(), nk = t.concepts.size();
    t.dataset = {BiasSource::dataset, std::nullopt, matrix_from_json(dj.at("values"), ni, nk)};
    for (const auto& id : dj.at("model_layers")) {
      const auto layer_id = id.get<std::string>();
      const auto mj = read_json_artifact(dir / layer_file_name(layer_id), stage,
                                         "bias matrices for layer '" + layer_id + "' (run 'analyze' first)");
      t.models.push_back({BiasSource::model, layer_id, matrix_from_json(mj.at("values"), ni, nk)});
    }
    if (t.models.empty()) throw SchemaError("bias_dataset.json lists no model layers");
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed bias matrices: ") + e.what());
  }
}

// --- stages ----------------------------------------------------------------

inline ojson validation_report(const Dataset& ds) {
  ojson j;
  j["dataset_name"] = ds.manifest.dataset_name;
  j["images"] = ds.manifest.image_count;
  j["classes"] = ds.manifest.class_names;
  j["class_counts"] = ds.class_counts();
  j["concepts"] = ds.manifest.num_concepts();
  ojson layers = ojson::array();
  for (std::size_t l = 0; l < ds.manifest.num_layers(); ++l) {
    const auto& d = ds.manifest.layers[l];
    layers.push_back({{"layer_id", d.layer_id}, {"index", d.index}, {"units", d.unit_count}, {"spatial", d.spatial}});
  }
  j["layers"] = layers;
  std::vector<std::size_t> prevalence;
  for (std::size_t k = 0; k < ds.manifest.num_concepts(); ++k) {
    auto col = ds.concept_labels(k);
    prevalence.push_back(static_cast<std::size_t>(std::count(col.begin(), col.end(), 1)));
  }
  j["concept_positive_counts"] = prevalence;
  return j;
}

inline ojson cmd_validate(const RunConfig& cfg) { return validation_report(load_bundle(cfg.bundle_path)); }

inline std::vector<std::size_t> selected_layers(const Dataset& ds, const RunConfig& cfg) {
  std::vector<std::size_t> out;
  if (cfg.layers.empty()) {
    for (std::size_t l = 0; l < ds.manifest.num_layers(); ++l) out.push_back(l);
  } else {
    for (const auto& id : cfg.layers) out.push_back(ds.layer_position(id));
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
  }
  return out;
}

/// Rows used for probe training: all rows, or a seeded subset of
/// round(train_fraction * N) rows in ascending order.
inline std::vector<std::size_t> training_rows(std::size_t n, const RunConfig& cfg) {
  if (cfg.train_fraction >= 1.0) return {};
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
  const auto keep = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(n))));
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline std::vector<TrainedProbe> cmd_probes(const RunConfig& cfg) {
  validate_config(cfg);
  const auto ds = load_bundle(cfg.bundle_path);
  StageWriter out("probes", cfg);
  ProbeSpec base;
  base.c_grid = cfg.c_grid;
  base.max_iterations = cfg.max_iterations;
  base.tolerance = cfg.tolerance;
  base.folds = cfg.folds;
  base.seed = cfg.seed;
  base.default_c = cfg.default_c;
  const auto layers = selected_layers(ds, cfg);
  const auto rows = training_rows(ds.manifest.image_count, cfg);
  auto probes = train_all_probes(ds, layers, base, worker_count(), rows);
  out.write("probes.jsonl", write_probe_store(probes));

  std::size_t degenerate = 0, cv_skipped = 0, nonconverged = 0;
  for (const auto& p : probes) {
    degenerate += p.degenerate;
    cv_skipped += !p.degenerate && p.cv_scores.empty();
    nonconverged += !p.converged;
  }
  out.log("layers=" + std::to_string(layers.size()) + " concepts=" + std::to_string(ds.manifest.num_concepts()) +
          " probes=" + std::to_string(probes.size()) + " training_rows=" +
          std::to_string(rows.empty() ? ds.manifest.image_count : rows.size()));
  out.log("degenerate=" + std::to_string(degenerate) + " cv_skipped=" + std::to_string(cv_skipped) +
          " not_converged=" + std::to_string(nonconverged));
  out.finish();
  return probes;
}

inline BiasTables cmd_analyze(const RunConfig& cfg) {
  validate_config(cfg);
  const auto store_path = cfg.output_dir / "probes.jsonl";
  if (!fs::exists(store_path)) throw MissingArtifact("analyze", "missing probe store (run 'probes' first)");
  const auto ds = load_bundle(cfg.bundle_path);
  const auto probes = read_probe_store(detail::read_file(store_path));
  StageWriter out("analyze", cfg);

  BiasTables t;
  t.dataset_name = ds.manifest.dataset_name;
  t.classes = ds.manifest.class_names;
  t.class_counts = ds.class_counts();
  t.concepts = ds.manifest.concepts;
  t.dataset = dataset_concept_prob(ds.annotations, ds.labels, ds.manifest.num_classes());

  const std::size_t num_concepts = ds.manifest.num_concepts();
  for (std::size_t l = 0; l < ds.manifest.num_layers(); ++l) {
    const auto& id = ds.manifest.layers[l].layer_id;
    std::vector<TrainedProbe> layer_probes;
    for (const auto& p : probes)
      if (p.layer_id == id) layer_probes.push_back(p);
    if (layer_probes.empty()) continue;
    try {
      t.models.push_back(model_concept_prob<float>(layer_probes, num_concepts, ds.activations[l], ds.labels,
                                                   ds.manifest.num_classes()));
    } catch (const InvalidArgument& e) {
      throw MissingArtifact("analyze", "layer '" + id + "': " + e.what());
    }
  }
  for (const auto& p : probes)
    if (std::none_of(ds.manifest.layers.begin(), ds.manifest.layers.end(),
                     [&](const auto& l) { return l.layer_id == p.layer_id; }))
      throw SchemaError("probe store references unknown layer '" + p.layer_id + "'");
  if (t.models.empty()) throw MissingArtifact("analyze", "probe store holds no probes");

  ojson dj;
  dj["source"] = "dataset";
  dj["dataset_name"] = t.dataset_name;
  dj["classes"] = t.classes;
  dj["class_counts"] = t.class_counts;
  ojson concepts = ojson::array();
  for (const auto& c : t.concepts) concepts.push_back({{"name", c.name}, {"category", c.category}});
  dj["concepts"] = concepts;
  ojson model_layers = ojson::array();
  for (const auto& m : t.models) model_layers.push_back(*m.layer_id);
  dj["model_layers"] = model_layers;
  dj["values"] = matrix_to_json(t.dataset.values);
  out.write_json("bias_dataset.json", dj);

  ojson alignment;
  alignment["tau"] = cfg.tau;
  ojson reports = ojson::array();
  for (const auto& m : t.models) {
    ojson mj;
    mj["source"] = "model";
    mj["layer_id"] = *m.layer_id;
    mj["layer_index"] = ds.manifest.layers[ds.layer_position(*m.layer_id)].index;
    mj["values"] = matrix_to_json(m.values);
    out.write_json(layer_file_name(*m.layer_id), mj);

    const auto r = alignment_report(t.dataset, m, cfg.tau);
    reports.push_back({{"layer_id", r.layer_id}, {"tau", r.tau}, {"weighted_f1", r.weighted_f1},
                       {"js_divergence", r.js_divergence}});
    out.log("layer " + r.layer_id + " weighted_f1=" + detail::fixed3(r.weighted_f1) +
            " js=" + detail::fixed3(r.js_divergence));
  }
  alignment["layers"] = reports;
  out.write_json("alignment.json", alignment);
  out.finish();
  return t;
}

inline ojson sweep_to_json(const SweepReport& r, double tau_min) {
  ojson j;
  j["tau_min"] = tau_min;
  ojson layers = ojson::array();
  for (const auto& l : r.layers) {
    ojson points = ojson::array();
    for (const auto& p : l.points) points.push_back({{"tau", p.tau}, {"score", p.score}});
    layers.push_back({{"layer_id", l.layer_id}, {"points", points}, {"best_tau", l.best_tau},
                      {"best_score", l.best_score}});
  }
  j["layers"] = layers;
  j["average_best"] = r.average_best;
  return j;
}

inline SweepReport cmd_sweep(const RunConfig& cfg) {
  validate_config(cfg);
  const auto t = load_bias_tables(cfg.output_dir, "sweep");
  StageWriter out("sweep", cfg);
  auto report = threshold_sweep(t.dataset, t.models, cfg.tau_grid, cfg.tau_min);
  out.write_json("sweep.json", sweep_to_json(report, cfg.tau_min));
  out.write("sweep.txt", format_sweep_table(report, t.dataset_name));
  out.log("layers=" + std::to_string(report.layers.size()) + " avg=" + detail::fixed3(report.average_best));
  out.finish();
  return report;
}

inline ojson ranking_to_json(const ConceptRanking& r, const BiasTables& t) {
  ojson list = ojson::array();
  for (const auto& e : r.entries) {
    ojson ej;
    ej["concept"] = t.concepts[e.concept_index].name;
    ej["index"] = e.concept_index;
    ej["score"] = std::isfinite(e.score) ? ojson(e.score) : ojson(nullptr);
    if (e.best_layer) ej["best_layer"] = *t.models[*e.best_layer].layer_id;
    list.push_back(ej);
  }
  return list;
}

struct Rankings {
  ConceptRanking dataset;
  ConceptRanking model_f1;
  ConceptRanking model_js;
};

inline Rankings compute_rankings(const BiasTables& t, const RunConfig& cfg) {
  const std::size_t k = t.concepts.size();
  if (cfg.top_k > k) throw InvalidArgument("--top-k exceeds the number of concepts");
  return {rank_dataset_biased_concepts(t.dataset, t.class_priors(), cfg.top_k),
          rank_model_concepts(t.dataset, t.models, RankingMode::model_f1, cfg.tau, k),
          rank_model_concepts(t.dataset, t.models, RankingMode::model_js, cfg.tau, k)};
}

inline Rankings cmd_rank(const RunConfig& cfg) {
  validate_config(cfg);
  const auto t = load_bias_tables(cfg.output_dir, "rank");
  StageWriter out("rank", cfg);
  auto r = compute_rankings(t, cfg);
  ojson j;
  j["tau"] = cfg.tau;
  j["top_k"] = cfg.top_k;
  j["mode"] = to_string(cfg.mode);
  j["dataset_entropy"] = ranking_to_json(r.dataset, t);
  j["model_f1"] = ranking_to_json(r.model_f1, t);
  j["model_js"] = ranking_to_json(r.model_js, t);
  out.write_json("rankings.json", j);
  const auto& selected = cfg.mode == RankingMode::model_js ? r.model_js : r.model_f1;
  std::string top;
  for (auto c : selected.top(cfg.top_k)) top += " " + t.concepts[c].name;
  out.log(to_string(cfg.mode) + " top:" + top);
  out.finish();
  return r;
}

/// External rankings: {method: {layer_id: [{concept, score}, ...]}}. Concepts
/// are names or integer indices; each list is ordered by descending score,
/// ties by concept index.
inline std::map<std::string, std::map<std::string, ConceptRanking>> parse_external_rankings(
    const nlohmann::json& j, std::span<const Concept> concepts) {
  auto fail = [](const std::string& m) { return SchemaError("external ranking file: " + m); };
  if (!j.is_object() || j.empty()) throw fail("expected an object of methods");
  std::map<std::string, std::map<std::string, ConceptRanking>> out;
  for (auto& [method, layers] : j.items()) {
    if (!layers.is_object() || layers.empty()) throw fail("method '" + method + "' must map layer ids to lists");
    for (auto& [layer, list] : layers.items()) {
      if (!list.is_array()) throw fail("'" + method + "/" + layer + "' must be a list");
      ConceptRanking r{RankingMode::model_f1, {}};
      std::set<std::size_t> seen;
      for (const auto& item : list) {
        if (!item.is_object() || !item.contains("concept") || !item.contains("score") || !item["score"].is_number())
          throw fail("'" + method + "/" + layer + "' entries need 'concept' and numeric 'score'");
        std::size_t idx = 0;
        const auto& c = item["concept"];
        if (c.is_string()) {
          const auto name = c.get<std::string>();
          auto it = std::find_if(concepts.begin(), concepts.end(), [&](const auto& x) { return x.name == name; });
          if (it == concepts.end()) throw fail("unknown concept '" + name + "'");
          idx = static_cast<std::size_t>(it - concepts.begin());
        } else if (c.is_number_unsigned() && c.get<std::size_t>() < concepts.size()) {
          idx = c.get<std::size_t>();
        } else {
          throw fail("concept must be a name or an index in range");
        }
        if (!seen.insert(idx).second) throw fail("duplicate concept in '" + method + "/" + layer + "'");
        r.entries.push_back({idx, item["score"].get<double>(), std::nullopt});
      }
      detail::sort_and_truncate(r.entries, false, r.entries.size());
      out[method][layer] = std::move(r);
    }
  }
  return out;
}

inline ConceptRanking ranking_from_json(const nlohmann::json& list, RankingMode mode) {
  ConceptRanking r{mode, {}};
  for (const auto& e : list) {
    RankedConcept rc;
    rc.concept_index = e.at("index").get<std::size_t>();
    rc.score = e.at("score").is_null() ? std::numeric_limits<double>::infinity() : e.at("score").get<double>();
    r.entries.push_back(rc);
  }
  return r;
}

/// Recall of the dataset's top-k biased concepts within the top 2k of each
/// engine ranking and of every external ranking.
inline ojson cmd_recall(const RunConfig& cfg) {
  validate_config(cfg);
  const auto t = load_bias_tables(cfg.output_dir, "recall");
  const auto rj = read_json_artifact(cfg.output_dir / "rankings.json", "recall", "rankings (run 'rank' first)");
  std::optional<std::map<std::string, std::map<std::string, ConceptRanking>>> external;
  if (cfg.ranking_file) {
    if (!fs::exists(*cfg.ranking_file)) throw InvalidArgument("ranking file not found: " + cfg.ranking_file->string());
    nlohmann::json ej;
    try {
      ej = nlohmann::json::parse(detail::read_file(*cfg.ranking_file));
    } catch (const nlohmann::json::parse_error& e) {
      throw SchemaError(std::string("external ranking file: invalid JSON: ") + e.what());
    }
    external = parse_external_rankings(ej, t.concepts);
  }
  StageWriter out("recall", cfg);

  ConceptRanking reference, f1, js;
  try {
    reference = ranking_from_json(rj.at("dataset_entropy"), RankingMode::dataset_entropy);
    f1 = ranking_from_json(rj.at("model_f1"), RankingMode::model_f1);
    js = ranking_from_json(rj.at("model_js"), RankingMode::model_js);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed rankings.json: ") + e.what());
  }
  const std::size_t k_ref = std::min(cfg.top_k, reference.entries.size());
  const std::size_t k_cand = std::min(2 * cfg.top_k, t.concepts.size());

  ojson j;
  j["k_ref"] = k_ref;
  j["k_cand"] = k_cand;
  ojson ref_names = ojson::array();
  for (auto c : reference.top(k_ref)) ref_names.push_back(t.concepts[c].name);
  j["reference"] = ref_names;
  j["engine"] = {{"model_f1", recall_at_k(reference, k_ref, f1, k_cand)},
                 {"model_js", recall_at_k(reference, k_ref, js, k_cand)}};
  out.log("model_f1=" + detail::fixed3(j["engine"]["model_f1"].get<double>()) +
          " model_js=" + detail::fixed3(j["engine"]["model_js"].get<double>()));
  ojson ext = ojson::object();
  if (external) {
    for (const auto& [method, layers] : *external) {
      ojson per_layer = ojson::object();
      for (const auto& [layer, ranking] : layers) {
        const double r = recall_at_k(reference, k_ref, ranking, k_cand);
        per_layer[layer] = r;
        out.log(method + "/" + layer + "=" + detail::fixed3(r));
      }
      ext[method] = per_layer;
    }
  }
  j["external"] = ext;
  out.write_json("recall.json", j);
  out.finish();
  return j;
}

inline KnowledgeGraph cmd_graph(const RunConfig& cfg) {
  validate_config(cfg);
  const auto t = load_bias_tables(cfg.output_dir, "graph");
  GraphOptions opts;
  opts.tau = cfg.tau;
  opts.include_gray = cfg.include_gray;
  if (cfg.layers.size() > 1) throw InvalidArgument("graph: --layer selects a single layer");
  if (cfg.layers.size() == 1) {
    auto it = std::find_if(t.models.begin(), t.models.end(), [&](const auto& m) { return *m.layer_id == cfg.layers[0]; });
    if (it == t.models.end()) throw InvalidArgument("graph: no bias matrix for layer '" + cfg.layers[0] + "'");
    opts.layer_mode.layer = static_cast<std::size_t>(it - t.models.begin());
  }
  StageWriter out("graph", cfg);
  auto g = build_graph(t.dataset, t.models, t.classes, t.concepts, opts);
  out.write("graph.json", serialize_graph(g));
  out.write_json("dynamics.json", dynamics_to_json(t.models, t.classes, t.concepts));
  std::map<std::string, int> colors;
  for (const auto& e : g.edges) ++colors[to_string(e.color)];
  std::string summary = "edges=" + std::to_string(g.edges.size());
  for (const auto& [c, n] : colors) summary += " " + c + "=" + std::to_string(n);
  out.log(summary);
  out.finish();
  return g;
}

inline void cmd_all(const RunConfig& cfg) {
  cmd_probes(cfg);
  cmd_analyze(cfg);
  cmd_sweep(cfg);
  cmd_rank(cfg);
  cmd_recall(cfg);
  cmd_graph(cfg);
}

}  // namespace bagel::run
