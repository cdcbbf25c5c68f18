#pragma once

// Synthetic bundle with planted concept biases. A few concepts get
// class-conditional rates far from uniform and are written linearly into
// dedicated unit subsets of chosen layers; the remaining concepts have equal
// rates in every class and are not encoded anywhere.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "bagel/detail/io.hpp"
#include "bagel/ingest.hpp"
#include "bagel/matrix.hpp"

namespace bagel::fixture {

struct PlantedConcept {
  std::size_t concept_index = 0;
  std::vector<double> class_rates;  // prescribed p(concept | class)
  std::vector<int> layers;          // 1-based layers that encode it
};

struct FixtureSpec {
  std::string name = "planted";
  std::size_t images = 400;
  std::vector<std::string> classes{"class_a", "class_b"};
  std::vector<std::size_t> layer_units{32, 48, 72};
  std::size_t spatial_side = 3;  // layer 1 is spatial side x side
  std::size_t units_per_code = 16;
  double amplitude = 3.0;
  double noise = 0.35;
  std::uint64_t seed = 7;
  std::vector<PlantedConcept> planted{
      {0, {0.90, 0.10}, {1, 2, 3}},
      {1, {0.10, 0.85}, {2, 3}},
      {2, {0.80, 0.05}, {3}},
      {3, {0.05, 0.75}, {1, 3}},
      {4, {0.95, 0.20}, {2}},
  };
  std::vector<double> neutral_rates{0.30, 0.50, 0.40, 0.60, 0.20};  // concepts 5..9
};

struct Fixture {
  Dataset dataset;
  SpatialTensor first_layer_spatial;  // pre-pooling tensor of layer 1
  Matrix<double> prescribed;          // [I x K] target p(concept | class)
  std::vector<std::pair<int, std::size_t>> encoded_pairs;  // (layer 1-based, concept)
  std::vector<std::size_t> planted_concepts;
};

inline Fixture make_planted_fixture(const FixtureSpec& spec = {}) {
  const std::size_t n = spec.images, num_classes = spec.classes.size();
  const std::size_t num_concepts = spec.planted.size() + spec.neutral_rates.size();
  std::mt19937_64 rng(spec.seed);

  Fixture fx;
  auto& ds = fx.dataset;
  auto& m = ds.manifest;
  m.dataset_name = spec.name;
  m.image_count = n;
  m.class_names = spec.classes;
  static const char* categories[] = {"color", "texture", "part", "material", "context"};
  for (std::size_t k = 0; k < num_concepts; ++k)
    m.concepts.push_back({"concept_" + std::to_string(k), categories[k % 5]});
  for (std::size_t l = 0; l < spec.layer_units.size(); ++l) {
    LayerDescriptor d;
    d.layer_id = "layer" + std::to_string(l + 1);
    d.index = static_cast<int>(l + 1);
    d.unit_count = spec.layer_units[l];
    d.file = d.layer_id + ".f32";
    if (l == 0) {
      d.spatial = true;
      d.height = d.width = spec.spatial_side;
    }
    m.layers.push_back(d);
  }

  for (std::size_t i = 0; i < n; ++i) {
    ds.image_ids.push_back("img" + std::to_string(i));
    ds.labels.push_back(static_cast<int>(i % num_classes));
  }
  std::vector<std::vector<std::size_t>> members(num_classes);
  for (std::size_t i = 0; i < n; ++i) members[static_cast<std::size_t>(ds.labels[i])].push_back(i);

  // Exact per-class counts, placed on a seeded random subset of the class.
  fx.prescribed = Matrix<double>(num_classes, num_concepts);
  ds.annotations = Matrix<std::uint8_t>(n, num_concepts, 0);
  auto rate_of = [&](std::size_t k, std::size_t c) {
    return k < spec.planted.size() ? spec.planted[k].class_rates[c] : spec.neutral_rates[k - spec.planted.size()];
  };
  for (std::size_t k = 0; k < num_concepts; ++k) {
    for (std::size_t c = 0; c < num_classes; ++c) {
      auto pool = members[c];
      for (std::size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[rng() % i]);
      const auto count = static_cast<std::size_t>(std::llround(rate_of(k, c) * static_cast<double>(pool.size())));
      for (std::size_t j = 0; j < count; ++j) ds.annotations(pool[j], k) = 1;
      fx.prescribed(c, k) = static_cast<double>(count) / static_cast<double>(pool.size());
    }
  }

  // Unit subsets: each (layer, planted concept) pair owns a disjoint block.
  std::vector<std::size_t> next_unit(spec.layer_units.size(), 0);
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> codes(spec.layer_units.size());  // (unit, concept)
  for (const auto& p : spec.planted) {
    fx.planted_concepts.push_back(p.concept_index);
    for (int layer : p.layers) {
      const auto l = static_cast<std::size_t>(layer - 1);
      for (std::size_t u = 0; u < spec.units_per_code; ++u) {
        if (next_unit[l] >= spec.layer_units[l]) throw InvalidArgument("fixture: layer has too few units");
        codes[l].push_back({next_unit[l]++, p.concept_index});
      }
      fx.encoded_pairs.push_back({layer, p.concept_index});
    }
  }

  std::normal_distribution<double> gauss(0.0, 1.0);
  auto activation = [&](std::size_t img, std::size_t l, std::size_t unit) {
    double v = 1.0 + spec.noise * gauss(rng);
    for (const auto& [u, k] : codes[l])
      if (u == unit && ds.annotations(img, k)) v += spec.amplitude;
    return std::max(0.0, v);
  };

  for (std::size_t l = 0; l < spec.layer_units.size(); ++l) {
    const std::size_t units = spec.layer_units[l];
    if (l == 0) {
      const std::size_t area = spec.spatial_side * spec.spatial_side;
      SpatialTensor t{n, units, spec.spatial_side, spec.spatial_side, std::vector<float>(n * units * area)};
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t u = 0; u < units; ++u)
          for (std::size_t p = 0; p < area; ++p)
            t.values[(i * units + u) * area + p] = static_cast<float>(activation(i, l, u));
      ds.activations.push_back(gap_pool(t));
      fx.first_layer_spatial = std::move(t);
    } else {
      Matrix<float> a(n, units);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t u = 0; u < units; ++u) a(i, u) = static_cast<float>(activation(i, l, u));
      ds.activations.push_back(std::move(a));
    }
  }
  return fx;
}

/// Writes the fixture as a bundle, keeping layer 1 in its spatial form so
/// loading exercises pooling.
inline void write_fixture_bundle(const Fixture& fx, const std::filesystem::path& root) {
  save_bundle(fx.dataset, root);
  auto manifest = fx.dataset.manifest;
  for (auto& l : manifest.layers) l.file = l.layer_id + ".f32";
  detail::write_file_atomic(root / "manifest.json", detail::manifest_to_json(manifest).dump(2) + "\n");
  detail::write_file_atomic(root / manifest.layers[0].file,
                            detail::encode_le<float>(std::span<const float>(fx.first_layer_spatial.values)));
}

/// External ranking file in the engine's ingestion format that lists the
/// planted concepts first, as a concept-importance baseline would.
inline nlohmann::ordered_json planted_external_ranking(const Fixture& fx, const std::string& method = "tcav") {
  nlohmann::ordered_json per_layer;
  for (const auto& layer : fx.dataset.manifest.layers) {
    auto list = nlohmann::ordered_json::array();
    double score = 1.0;
    for (auto k : fx.planted_concepts) {
      list.push_back({{"concept", fx.dataset.manifest.concepts[k].name}, {"score", score}});
      score -= 0.1;
    }
    per_layer[layer.layer_id] = list;
  }
  nlohmann::ordered_json j;
  j[method] = per_layer;
  return j;
}

}  // namespace bagel::fixture
