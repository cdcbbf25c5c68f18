#pragma once

// Bias tables and the metrics that compare them: dataset vs. model concept
// probabilities, weighted F1 of the binarized tables, Jensen-Shannon
// divergence, threshold sweeps, concept rankings and recall.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bagel/error.hpp"
#include "bagel/matrix.hpp"
#include "bagel/probes.hpp"

namespace bagel {

enum class BiasSource { dataset, model };

/// Class x concept table of p(concept | class).
struct BiasMatrix {
  BiasSource source = BiasSource::dataset;
  std::optional<std::string> layer_id;  // set for model tables
  Matrix<double> values;                // [I x K]

  std::size_t num_classes() const noexcept { return values.rows(); }
  std::size_t num_concepts() const noexcept { return values.cols(); }
  bool operator==(const BiasMatrix&) const = default;
};

/// Fraction of each class's images annotated with each concept.
inline BiasMatrix dataset_concept_prob(const Matrix<std::uint8_t>& annotations, std::span<const int> labels,
                                       std::size_t num_classes) {
  if (annotations.rows() != labels.size()) throw InvalidArgument("annotation rows != label count");
  Matrix<double> counts(num_classes, annotations.cols(), 0.0);
  std::vector<double> class_sizes(num_classes, 0.0);
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const auto i = static_cast<std::size_t>(labels[n]);
    if (i >= num_classes) throw InvalidArgument("label out of range");
    class_sizes[i] += 1.0;
    for (std::size_t k = 0; k < annotations.cols(); ++k) counts(i, k) += annotations(n, k);
  }
  for (std::size_t i = 0; i < num_classes; ++i) {
    if (class_sizes[i] == 0) throw InvalidArgument("class " + std::to_string(i) + " has no samples");
    for (auto& v : counts.row(i)) v /= class_sizes[i];
  }
  return {BiasSource::dataset, std::nullopt, std::move(counts)};
}

/// Class-averaged probe probabilities at one layer. `probes` must hold a
/// probe for every concept index 0..K-1 of that layer.
template <typename T>
BiasMatrix model_concept_prob(std::span<const TrainedProbe> probes, std::size_t num_concepts,
                              const Matrix<T>& features, std::span<const int> labels, std::size_t num_classes) {
  if (features.rows() != labels.size()) throw InvalidArgument("feature rows != label count");
  std::vector<const TrainedProbe*> by_concept(num_concepts, nullptr);
  std::optional<std::string> layer;
  for (const auto& p : probes) {
    if (p.concept_index >= num_concepts) throw InvalidArgument("probe concept index out of range");
    if (layer && *layer != p.layer_id) throw InvalidArgument("probes from different layers mixed");
    layer = p.layer_id;
    by_concept[p.concept_index] = &p;
  }
  for (std::size_t k = 0; k < num_concepts; ++k)
    if (!by_concept[k]) throw InvalidArgument("missing probe for concept " + std::to_string(k));

  Matrix<double> sums(num_classes, num_concepts, 0.0);
  std::vector<double> class_sizes(num_classes, 0.0);
  for (int y : labels) class_sizes[static_cast<std::size_t>(y)] += 1.0;
  for (std::size_t k = 0; k < num_concepts; ++k) {
    auto proba = predict_proba(*by_concept[k], features);
    for (std::size_t n = 0; n < proba.size(); ++n) sums(static_cast<std::size_t>(labels[n]), k) += proba[n];
  }
  for (std::size_t i = 0; i < num_classes; ++i) {
    if (class_sizes[i] == 0) throw InvalidArgument("class " + std::to_string(i) + " has no samples");
    for (auto& v : sums.row(i)) v /= class_sizes[i];
  }
  return {BiasSource::model, layer, std::move(sums)};
}

/// 1 where value >= tau.
inline Matrix<std::uint8_t> binarize(const Matrix<double>& m, double tau) {
  Matrix<std::uint8_t> out(m.rows(), m.cols());
  auto src = m.flat();
  auto dst = out.flat();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] >= tau ? 1 : 0;
  return out;
}

/// Support-weighted F1 over the two indicator classes {0, 1}, treating
/// `truth` as ground truth. A class whose precision + recall is zero scores 0.
inline double weighted_f1(std::span<const std::uint8_t> truth, std::span<const std::uint8_t> pred) {
  if (truth.size() != pred.size()) throw InvalidArgument("weighted_f1: shape mismatch");
  if (truth.empty()) throw InvalidArgument("weighted_f1: empty input");
  double tp[2] = {0, 0}, support[2] = {0, 0}, predicted[2] = {0, 0};
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int t = truth[i] ? 1 : 0, p = pred[i] ? 1 : 0;
    support[t] += 1;
    predicted[p] += 1;
    if (t == p) tp[t] += 1;
  }
  const double n = static_cast<double>(truth.size());
  double score = 0.0;
  for (int v = 0; v < 2; ++v) {
    if (support[v] == 0) continue;
    const double precision = predicted[v] > 0 ? tp[v] / predicted[v] : 0.0;
    const double recall = tp[v] / support[v];
    const double f1 = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
    score += support[v] / n * f1;
  }
  return score;
}

inline double weighted_f1(const Matrix<std::uint8_t>& truth, const Matrix<std::uint8_t>& pred) {
  if (truth.rows() != pred.rows() || truth.cols() != pred.cols())
    throw InvalidArgument("weighted_f1: shape mismatch");
  return weighted_f1(truth.flat(), pred.flat());
}

/// Square-root Jensen-Shannon divergence with base-2 logarithms, so the
/// result lies in [0, 1]. Each operand is first normalized by its own total
/// mass.
inline double js_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw InvalidArgument("js_divergence: shape mismatch");
  double mass_p = 0.0, mass_q = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0 || q[i] < 0) throw InvalidArgument("js_divergence: negative entry");
    mass_p += p[i];
    mass_q += q[i];
  }
  if (!(mass_p > 0) || !(mass_q > 0)) throw InvalidArgument("js_divergence: zero total mass");
  // Terms are weighted by the raw entries and divided by the mass once, so
  // disjoint supports (every log term exactly 1) give exactly 1.
  double kl_p = 0.0, kl_q = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double a = p[i] / mass_p, b = q[i] / mass_q;
    const double m = 0.5 * (a + b);
    if (a > 0) kl_p += p[i] * std::log2(a / m);
    if (b > 0) kl_q += q[i] * std::log2(b / m);
  }
  return std::sqrt(std::clamp(0.5 * (kl_p / mass_p) + 0.5 * (kl_q / mass_q), 0.0, 1.0));
}

inline double js_divergence(const Matrix<double>& p, const Matrix<double>& q) {
  if (p.rows() != q.rows() || p.cols() != q.cols()) throw InvalidArgument("js_divergence: shape mismatch");
  return js_divergence(p.flat(), q.flat());
}

struct AlignmentReport {
  std::string layer_id;
  double tau = 0.5;
  double weighted_f1 = 0.0;
  double js_divergence = 0.0;
};

inline AlignmentReport alignment_report(const BiasMatrix& dataset, const BiasMatrix& model, double tau) {
  if (tau < 0 || tau > 1) throw InvalidArgument("tau must lie in [0, 1]");
  AlignmentReport r;
  r.layer_id = model.layer_id.value_or("");
  r.tau = tau;
  r.weighted_f1 = weighted_f1(binarize(dataset.values, tau), binarize(model.values, tau));
  r.js_divergence = js_divergence(dataset.values, model.values);
  return r;
}

// --- threshold sweep -------------------------------------------------------

/// For each concept, the fraction of its dataset-present classes (dataset
/// probability >= tau) whose model probability also reaches tau; averaged over
/// concepts that have at least one present class. 0 when none do.
inline double detection_score(const Matrix<double>& dataset, const Matrix<double>& model, double tau) {
  if (dataset.rows() != model.rows() || dataset.cols() != model.cols())
    throw InvalidArgument("detection_score: shape mismatch");
  double total = 0.0;
  std::size_t concepts = 0;
  for (std::size_t k = 0; k < dataset.cols(); ++k) {
    std::size_t present = 0, detected = 0;
    for (std::size_t i = 0; i < dataset.rows(); ++i) {
      if (dataset(i, k) >= tau) {
        ++present;
        if (model(i, k) >= tau) ++detected;
      }
    }
    if (present > 0) {
      total += static_cast<double>(detected) / static_cast<double>(present);
      ++concepts;
    }
  }
  return concepts ? total / static_cast<double>(concepts) : 0.0;
}

struct SweepPoint {
  double tau = 0.0;
  double score = 0.0;
};

struct LayerSweep {
  std::string layer_id;
  std::vector<SweepPoint> points;
  double best_tau = 0.0;
  double best_score = 0.0;
};

struct SweepReport {
  std::vector<LayerSweep> layers;
  double average_best = 0.0;
};

/// Grid values in [0, 1] that are >= tau_min, ascending and de-duplicated.
inline std::vector<double> effective_tau_grid(std::span<const double> grid, double tau_min) {
  std::vector<double> out;
  for (double t : grid) {
    if (t < 0 || t > 1) throw InvalidArgument("tau grid values must lie in [0, 1]");
    if (t >= tau_min) out.push_back(t);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  if (out.empty()) throw InvalidArgument("tau grid is empty after applying tau_min");
  return out;
}

inline SweepReport threshold_sweep(const BiasMatrix& dataset, std::span<const BiasMatrix> models,
                                   std::span<const double> tau_grid, double tau_min) {
  const auto grid = effective_tau_grid(tau_grid, tau_min);
  if (models.empty()) throw InvalidArgument("threshold_sweep: no model layers");
  SweepReport report;
  double sum = 0.0;
  for (const auto& model : models) {
    LayerSweep ls;
    ls.layer_id = model.layer_id.value_or("");
    for (double tau : grid) {
      const double s = detection_score(dataset.values, model.values, tau);
      ls.points.push_back({tau, s});
      if (ls.points.size() == 1 || s > ls.best_score) {
        ls.best_score = s;
        ls.best_tau = tau;
      }
    }
    sum += ls.best_score;
    report.layers.push_back(std::move(ls));
  }
  report.average_best = sum / static_cast<double>(report.layers.size());
  return report;
}

namespace detail {

/// Shortest round-trip decimal form ("0.6", not "0.600000").
inline std::string shortest(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

inline std::string fixed3(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << v;
  return os.str();
}

}  // namespace detail

/// Aligned plain-text table: one row, a "score (best tau)" cell per layer and
/// the average of the per-layer best scores.
inline std::string format_sweep_table(const SweepReport& report, const std::string& row_label) {
  std::vector<std::string> header{"Model"}, row{row_label};
  for (const auto& l : report.layers) {
    header.push_back(l.layer_id);
    row.push_back(detail::fixed3(l.best_score) + " (" + detail::shortest(l.best_tau) + ")");
  }
  header.push_back("Avg");
  row.push_back(detail::fixed3(report.average_best));

  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = std::max(header[c].size(), row[c].size());
  auto line = [&](const std::vector<std::string>& cells) {
    std::string out = "|";
    for (std::size_t c = 0; c < cells.size(); ++c)
      out += " " + cells[c] + std::string(width[c] - cells[c].size(), ' ') + " |";
    return out + "\n";
  };
  std::string rule = "+";
  for (auto w : width) rule += std::string(w + 2, '-') + "+";
  rule += "\n";
  return rule + line(header) + rule + line(row) + rule;
}

// --- rankings --------------------------------------------------------------

enum class RankingMode { dataset_entropy, model_f1, model_js };

inline std::string to_string(RankingMode m) {
  switch (m) {
    case RankingMode::dataset_entropy: return "dataset_entropy";
    case RankingMode::model_f1: return "model_f1";
    case RankingMode::model_js: return "model_js";
  }
  return "?";
}

inline RankingMode ranking_mode_from_string(const std::string& s) {
  if (s == "dataset_entropy") return RankingMode::dataset_entropy;
  if (s == "model_f1") return RankingMode::model_f1;
  if (s == "model_js") return RankingMode::model_js;
  throw InvalidArgument("unknown ranking mode '" + s + "'");
}

struct RankedConcept {
  std::size_t concept_index = 0;
  double score = 0.0;  // +inf marks a concept with no mass (entropy mode)
  std::optional<std::size_t> best_layer;  // position in the model list, model modes only
  bool operator==(const RankedConcept&) const = default;
};

struct ConceptRanking {
  RankingMode mode = RankingMode::dataset_entropy;
  std::vector<RankedConcept> entries;

  std::vector<std::size_t> top(std::size_t k) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < std::min(k, entries.size()); ++i) out.push_back(entries[i].concept_index);
    return out;
  }
};

namespace detail {

inline void sort_and_truncate(std::vector<RankedConcept>& entries, bool ascending, std::size_t k) {
  std::stable_sort(entries.begin(), entries.end(), [ascending](const auto& a, const auto& b) {
    if (a.score != b.score) return ascending ? a.score < b.score : a.score > b.score;
    return a.concept_index < b.concept_index;
  });
  entries.resize(k);
}

}  // namespace detail

/// Concepts most concentrated on a single class: entropy (natural log) of
/// P(class | concept), with P(class | concept) proportional to
/// p(concept | class) * prior(class). Lowest entropy first; concepts absent
/// from every class rank last.
inline ConceptRanking rank_dataset_biased_concepts(const BiasMatrix& dataset, std::span<const double> priors,
                                                   std::size_t k) {
  const std::size_t num_classes = dataset.num_classes(), num_concepts = dataset.num_concepts();
  if (priors.size() != num_classes) throw InvalidArgument("one prior per class required");
  if (k > num_concepts) throw InvalidArgument("k exceeds the number of concepts");
  ConceptRanking ranking{RankingMode::dataset_entropy, {}};
  for (std::size_t c = 0; c < num_concepts; ++c) {
    double mass = 0.0;
    for (std::size_t i = 0; i < num_classes; ++i) mass += dataset.values(i, c) * priors[i];
    double entropy = std::numeric_limits<double>::infinity();
    if (mass > 0) {
      entropy = 0.0;
      for (std::size_t i = 0; i < num_classes; ++i) {
        const double post = dataset.values(i, c) * priors[i] / mass;
        if (post > 0) entropy -= post * std::log(post);
      }
      entropy = std::max(entropy, 0.0);
    }
    ranking.entries.push_back({c, entropy, std::nullopt});
  }
  detail::sort_and_truncate(ranking.entries, true, k);
  return ranking;
}

/// Per-concept column score of one model layer against the dataset.
/// model_f1: weighted F1 of the binarized columns (higher is better).
/// model_js: JS divergence of the columns (lower is better); a zero-mass
/// column scores 1 against a non-empty one and 0 against another empty one.
inline double column_score(const BiasMatrix& dataset, const BiasMatrix& model, std::size_t concept_index,
                           RankingMode mode, double tau) {
  const auto d = dataset.values.column(concept_index);
  const auto m = model.values.column(concept_index);
  if (mode == RankingMode::model_f1) {
    std::vector<std::uint8_t> bd(d.size()), bm(m.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
      bd[i] = d[i] >= tau;
      bm[i] = m[i] >= tau;
    }
    return weighted_f1(bd, bm);
  }
  if (mode == RankingMode::model_js) {
    const double md = std::accumulate(d.begin(), d.end(), 0.0), mm = std::accumulate(m.begin(), m.end(), 0.0);
    if (md == 0 && mm == 0) return 0.0;
    if (md == 0 || mm == 0) return 1.0;
    return js_divergence(d, m);
  }
  throw InvalidArgument("column_score: not a model ranking mode");
}

/// Ranks concepts by how well some layer reproduces the dataset column. The
/// best layer (first one on ties) is recorded with each entry.
inline ConceptRanking rank_model_concepts(const BiasMatrix& dataset, std::span<const BiasMatrix> models,
                                          RankingMode mode, double tau, std::size_t k) {
  if (models.empty()) throw InvalidArgument("rank_model_concepts: no model layers");
  if (k > dataset.num_concepts()) throw InvalidArgument("k exceeds the number of concepts");
  const bool ascending = mode == RankingMode::model_js;
  ConceptRanking ranking{mode, {}};
  for (std::size_t c = 0; c < dataset.num_concepts(); ++c) {
    RankedConcept entry{c, 0.0, std::nullopt};
    for (std::size_t l = 0; l < models.size(); ++l) {
      const double s = column_score(dataset, models[l], c, mode, tau);
      if (!entry.best_layer || (ascending ? s < entry.score : s > entry.score)) {
        entry.score = s;
        entry.best_layer = l;
      }
    }
    ranking.entries.push_back(entry);
  }
  detail::sort_and_truncate(ranking.entries, ascending, k);
  return ranking;
}

/// |reference ∩ candidate| / |reference|, both taken as sets.
inline double recall_at_k(std::span<const std::size_t> reference, std::span<const std::size_t> candidate) {
  const std::set<std::size_t> ref(reference.begin(), reference.end());
  if (ref.empty()) throw InvalidArgument("recall_at_k: empty reference");
  const std::set<std::size_t> cand(candidate.begin(), candidate.end());
  std::size_t hits = 0;
  for (auto c : ref) hits += cand.contains(c);
  return static_cast<double>(hits) / static_cast<double>(ref.size());
}

inline double recall_at_k(const ConceptRanking& reference, std::size_t k_ref, const ConceptRanking& candidate,
                          std::size_t k_cand) {
  if (k_ref < 1) throw InvalidArgument("recall_at_k: k_ref must be >= 1");
  const auto ref = reference.top(k_ref);
  const auto cand = candidate.top(k_cand);
  return recall_at_k(ref, cand);
}

struct DynamicsPoint {
  int layer_index = 0;  // 1-based
  double probability = 0.0;
};

/// p_model(concept | class) across the given layer tables, in order.
inline std::vector<DynamicsPoint> concept_layer_dynamics(std::span<const BiasMatrix> models, std::size_t class_index,
                                                         std::size_t concept_index) {
  std::vector<DynamicsPoint> series;
  for (std::size_t l = 0; l < models.size(); ++l) {
    if (class_index >= models[l].num_classes()) throw InvalidArgument("unknown class index");
    if (concept_index >= models[l].num_concepts()) throw InvalidArgument("unknown concept index");
    series.push_back({static_cast<int>(l + 1), models[l].values(class_index, concept_index)});
  }
  return series;
}

}  // namespace bagel
