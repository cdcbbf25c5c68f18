#pragma once

// Bipartite class -> concept knowledge graph. Each edge carries the dataset
// probability and one model probability per layer; its color says whether
// the bias appears in the dataset, the model, both, or neither at threshold
// tau.

#include <algorithm>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "bagel/error.hpp"
#include "bagel/ingest.hpp"
#include "bagel/stats.hpp"

namespace bagel {

enum class EdgeColor { green, blue, red, gray };

inline std::string to_string(EdgeColor c) {
  switch (c) {
    case EdgeColor::green: return "green";
    case EdgeColor::blue: return "blue";
    case EdgeColor::red: return "red";
    case EdgeColor::gray: return "gray";
  }
  return "?";
}

inline EdgeColor edge_color_from_string(const std::string& s) {
  if (s == "green") return EdgeColor::green;
  if (s == "blue") return EdgeColor::blue;
  if (s == "red") return EdgeColor::red;
  if (s == "gray") return EdgeColor::gray;
  throw SchemaError("unknown edge color '" + s + "'");
}

/// Which model probabilities take part in edge inclusion and coloring:
/// every layer (existential over layers) or one layer position.
struct LayerMode {
  std::optional<std::size_t> layer;  // nullopt = aggregate
  bool aggregate() const noexcept { return !layer.has_value(); }
  bool operator==(const LayerMode&) const = default;
};

/// green: dataset and model both reach tau; blue: only the dataset does (no
/// layer reaches tau); red: only the model does; gray: neither.
inline EdgeColor classify_edge(double dataset_prob, std::span<const double> model_probs, double tau,
                               LayerMode mode = {}) {
  bool model_hit = false;
  if (mode.aggregate()) {
    model_hit = std::any_of(model_probs.begin(), model_probs.end(), [tau](double p) { return p >= tau; });
  } else {
    if (*mode.layer >= model_probs.size()) throw InvalidArgument("classify_edge: layer out of range");
    model_hit = model_probs[*mode.layer] >= tau;
  }
  const bool data_hit = dataset_prob >= tau;
  if (data_hit) return model_hit ? EdgeColor::green : EdgeColor::blue;
  return model_hit ? EdgeColor::red : EdgeColor::gray;
}

/// Highest model probability over layers.
inline double edge_width(std::span<const double> model_probs) {
  if (model_probs.empty()) throw InvalidArgument("edge_width: empty probability vector");
  return *std::max_element(model_probs.begin(), model_probs.end());
}

enum class NodeKind { class_node, concept_node };

struct KGNode {
  std::string id;
  NodeKind kind = NodeKind::class_node;
  std::optional<std::string> category;  // concepts only
  bool operator==(const KGNode&) const = default;
};

struct KGEdge {
  std::string class_id;
  std::string concept_id;
  double dataset_prob = 0.0;
  std::vector<double> model_probs;  // one per layer, in layer order
  EdgeColor color = EdgeColor::gray;
  double width = 0.0;
  bool operator==(const KGEdge&) const = default;
};

struct KnowledgeGraph {
  double tau = 0.5;
  LayerMode layer_mode;
  std::vector<std::string> layers;
  std::vector<KGNode> nodes;
  std::vector<KGEdge> edges;
  bool operator==(const KnowledgeGraph&) const = default;
};

struct GraphOptions {
  double tau = 0.5;
  LayerMode layer_mode;
  bool include_gray = false;  // also emit pairs that fail the inclusion rule, colored gray
};

/// Builds the graph over every (class, concept) pair. Class nodes are always
/// present; a concept node appears when at least one edge touches it. Edges
/// are ordered by class then concept.
inline KnowledgeGraph build_graph(const BiasMatrix& dataset, std::span<const BiasMatrix> models,
                                  std::span<const std::string> class_names, std::span<const Concept> concepts,
                                  const GraphOptions& options) {
  if (options.tau < 0 || options.tau > 1) throw InvalidArgument("build_graph: tau must lie in [0, 1]");
  if (models.empty()) throw InvalidArgument("build_graph: no model layers");
  const std::size_t num_classes = dataset.num_classes(), num_concepts = dataset.num_concepts();
  if (class_names.size() != num_classes || concepts.size() != num_concepts)
    throw InvalidArgument("build_graph: names do not match matrix dimensions");
  for (const auto& m : models)
    if (m.num_classes() != num_classes || m.num_concepts() != num_concepts)
      throw InvalidArgument("build_graph: model matrix dimensions differ from dataset");
  if (options.layer_mode.layer && *options.layer_mode.layer >= models.size())
    throw InvalidArgument("build_graph: layer out of range");

  KnowledgeGraph g;
  g.tau = options.tau;
  g.layer_mode = options.layer_mode;
  for (const auto& m : models) g.layers.push_back(m.layer_id.value_or(""));

  std::vector<bool> concept_used(num_concepts, false);
  std::vector<double> probs(models.size());
  for (std::size_t i = 0; i < num_classes; ++i) {
    for (std::size_t k = 0; k < num_concepts; ++k) {
      for (std::size_t l = 0; l < models.size(); ++l) probs[l] = models[l].values(i, k);
      const double d = dataset.values(i, k);
      const EdgeColor color = classify_edge(d, probs, options.tau, options.layer_mode);
      if (color == EdgeColor::gray && !options.include_gray) continue;
      concept_used[k] = true;
      g.edges.push_back({class_names[i], concepts[k].name, d, probs, color, edge_width(probs)});
    }
  }
  for (const auto& c : class_names) g.nodes.push_back({c, NodeKind::class_node, std::nullopt});
  for (std::size_t k = 0; k < num_concepts; ++k)
    if (concept_used[k]) g.nodes.push_back({concepts[k].name, NodeKind::concept_node, concepts[k].category});
  return g;
}

inline nlohmann::ordered_json graph_to_json(const KnowledgeGraph& g) {
  nlohmann::ordered_json j;
  j["tau"] = g.tau;
  j["layer_mode"] = g.layer_mode.aggregate() ? std::string("aggregate") : "layer:" + g.layers.at(*g.layer_mode.layer);
  j["layers"] = g.layers;
  auto nodes = nlohmann::ordered_json::array();
  for (const auto& n : g.nodes) {
    nlohmann::ordered_json nj;
    nj["id"] = n.id;
    nj["kind"] = n.kind == NodeKind::class_node ? "class" : "concept";
    if (n.category) nj["category"] = *n.category;
    nodes.push_back(nj);
  }
  j["nodes"] = nodes;
  auto edges = nlohmann::ordered_json::array();
  for (const auto& e : g.edges) {
    nlohmann::ordered_json ej;
    ej["class"] = e.class_id;
    ej["concept"] = e.concept_id;
    ej["dataset_prob"] = e.dataset_prob;
    ej["model_probs"] = e.model_probs;
    ej["color"] = to_string(e.color);
    ej["width"] = e.width;
    edges.push_back(ej);
  }
  j["edges"] = edges;
  return j;
}

inline std::string serialize_graph(const KnowledgeGraph& g) { return graph_to_json(g).dump(2) + "\n"; }

inline KnowledgeGraph graph_from_json(const nlohmann::json& j) {
  try {
    KnowledgeGraph g;
    g.tau = j.at("tau").get<double>();
    g.layers = j.at("layers").get<std::vector<std::string>>();
    const auto mode = j.at("layer_mode").get<std::string>();
    if (mode != "aggregate") {
      if (mode.rfind("layer:", 0) != 0) throw SchemaError("bad layer_mode '" + mode + "'");
      const auto id = mode.substr(6);
      auto it = std::find(g.layers.begin(), g.layers.end(), id);
      if (it == g.layers.end()) throw SchemaError("layer_mode names unknown layer '" + id + "'");
      g.layer_mode.layer = static_cast<std::size_t>(it - g.layers.begin());
    }
    for (const auto& nj : j.at("nodes")) {
      KGNode n;
      n.id = nj.at("id").get<std::string>();
      const auto kind = nj.at("kind").get<std::string>();
      if (kind == "class") n.kind = NodeKind::class_node;
      else if (kind == "concept") n.kind = NodeKind::concept_node;
      else throw SchemaError("unknown node kind '" + kind + "'");
      if (nj.contains("category")) n.category = nj.at("category").get<std::string>();
      g.nodes.push_back(std::move(n));
    }
    for (const auto& ej : j.at("edges")) {
      KGEdge e;
      e.class_id = ej.at("class").get<std::string>();
      e.concept_id = ej.at("concept").get<std::string>();
      e.dataset_prob = ej.at("dataset_prob").get<double>();
      e.model_probs = ej.at("model_probs").get<std::vector<double>>();
      e.color = edge_color_from_string(ej.at("color").get<std::string>());
      e.width = ej.at("width").get<double>();
      g.edges.push_back(std::move(e));
    }
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed graph: ") + e.what());
  }
}

inline KnowledgeGraph parse_graph(std::string_view text) {
  try {
    return graph_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(std::string("graph is not valid JSON: ") + e.what());
  }
}

/// Per (class, concept) series of model probabilities across layers, for the
/// explorer's line chart.
inline nlohmann::ordered_json dynamics_to_json(std::span<const BiasMatrix> models,
                                               std::span<const std::string> class_names,
                                               std::span<const Concept> concepts) {
  nlohmann::ordered_json j;
  auto layers = nlohmann::ordered_json::array();
  for (const auto& m : models) layers.push_back(m.layer_id.value_or(""));
  j["layers"] = layers;
  auto series = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < class_names.size(); ++i) {
    for (std::size_t k = 0; k < concepts.size(); ++k) {
      auto values = nlohmann::ordered_json::array();
      for (const auto& p : concept_layer_dynamics(models, i, k)) values.push_back(p.probability);
      series.push_back({{"class", class_names[i]}, {"concept", concepts[k].name}, {"values", values}});
    }
  }
  j["series"] = series;
  return j;
}

}  // namespace bagel
