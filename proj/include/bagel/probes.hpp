#pragma once

// Linear concept probes: one class-weighted, L2-regularized logistic
// regression per (layer, concept), with the regularization strength picked
// by stratified k-fold cross-validation on average precision.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "json.hpp"

#include "bagel/detail/base64.hpp"
#include "bagel/detail/io.hpp"
#include "bagel/error.hpp"
#include "bagel/ingest.hpp"
#include "bagel/matrix.hpp"

namespace bagel {

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// log(1 + exp(z)) without overflow.
inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

struct ClassWeights {
  double positive = 1.0;
  double negative = 1.0;
  double operator()(std::uint8_t label) const noexcept { return label ? positive : negative; }
};

/// Balanced heuristic: each class gets N / (2 N_class), so both classes carry
/// half of the total sample mass.
inline ClassWeights class_balanced_weights(std::span<const std::uint8_t> labels) {
  const auto n = static_cast<double>(labels.size());
  const auto pos = static_cast<double>(std::count_if(labels.begin(), labels.end(),
                                                     [](std::uint8_t v) { return v != 0; }));
  if (pos == 0 || pos == n) throw DegenerateLabels("class_balanced_weights: only one label value present");
  return {n / (2.0 * pos), n / (2.0 * (n - pos))};
}

/// Per-unit standardization fitted on training rows. Units with (near) zero
/// spread keep scale 1 so they contribute only through the mean shift.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;

  template <typename T>
  static Standardizer fit(const Matrix<T>& x) {
    Standardizer s;
    const std::size_t n = x.rows(), u = x.cols();
    s.mean.assign(u, 0.0);
    s.scale.assign(u, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < u; ++j) s.mean[j] += static_cast<double>(x(i, j));
    for (auto& m : s.mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < u; ++j) {
        const double d = static_cast<double>(x(i, j)) - s.mean[j];
        s.scale[j] += d * d;
      }
    for (auto& v : s.scale) {
      v = std::sqrt(v / static_cast<double>(n));
      if (!(v > 1e-12)) v = 1.0;
    }
    return s;
  }

  template <typename T>
  Matrix<double> apply(const Matrix<T>& x) const {
    if (x.cols() != mean.size()) throw InvalidArgument("standardizer width mismatch");
    Matrix<double> out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j)
        out(i, j) = (static_cast<double>(x(i, j)) - mean[j]) / scale[j];
    return out;
  }
};

/// Weighted binary cross-entropy (summed over samples) plus ||w||^2 / (2C).
/// The parameter vector is [w_1 .. w_U, b]; the bias is not penalized.
class LogisticObjective {
 public:
  LogisticObjective(const Matrix<double>& x, std::span<const std::uint8_t> y, double c,
                    ClassWeights weights)
      : x_(x), y_(y), inv_c_(1.0 / c), weights_(weights) {
    if (x.rows() != y.size()) throw InvalidArgument("feature rows and label count differ");
    if (!(c > 0)) throw InvalidArgument("C must be positive");
  }

  std::size_t dim() const noexcept { return x_.cols() + 1; }

  double value(std::span<const double> theta) const {
    double f = 0.0;
    for (std::size_t i = 0; i < x_.rows(); ++i) {
      const double z = margin(theta, i);
      f += weights_(y_[i]) * (softplus(z) - (y_[i] ? z : 0.0));
    }
    return f + 0.5 * inv_c_ * penalty(theta);
  }

  /// Returns the objective and fills `grad`. When `curvature` is given it
  /// receives the per-sample Hessian weights s_i * p_i * (1 - p_i).
  double value_and_gradient(std::span<const double> theta, std::span<double> grad,
                            std::vector<double>* curvature = nullptr) const {
    const std::size_t u = x_.cols();
    std::fill(grad.begin(), grad.end(), 0.0);
    if (curvature) curvature->assign(x_.rows(), 0.0);
    double f = 0.0;
    for (std::size_t i = 0; i < x_.rows(); ++i) {
      const double z = margin(theta, i);
      const double s = weights_(y_[i]);
      const double p = sigmoid(z);
      f += s * (softplus(z) - (y_[i] ? z : 0.0));
      const double r = s * (p - (y_[i] ? 1.0 : 0.0));
      auto row = x_.row(i);
      for (std::size_t j = 0; j < u; ++j) grad[j] += r * row[j];
      grad[u] += r;
      if (curvature) (*curvature)[i] = s * p * (1.0 - p);
    }
    for (std::size_t j = 0; j < u; ++j) grad[j] += inv_c_ * theta[j];
    return f + 0.5 * inv_c_ * penalty(theta);
  }

  /// f(theta + d) - f(theta), evaluated term by term so that decreases far
  /// below the rounding level of f itself are still resolved.
  double change(std::span<const double> theta, std::span<const double> d) const {
    double delta = 0.0;
    for (std::size_t i = 0; i < x_.rows(); ++i) {
      // The label flips the sign so both cases reduce to softplus differences.
      const double sign = y_[i] ? -1.0 : 1.0;
      const double z = sign * margin(theta, i);
      const double dz = sign * margin(d, i);
      const double term = std::abs(dz) < 30.0 ? std::log1p(std::expm1(dz) * sigmoid(z))
                                              : softplus(z + dz) - softplus(z);
      delta += weights_(y_[i]) * term;
    }
    double pen = 0.0;
    for (std::size_t j = 0; j < x_.cols(); ++j) pen += d[j] * (2.0 * theta[j] + d[j]);
    return delta + 0.5 * inv_c_ * pen;
  }

  /// H v for the Hessian whose sample weights came from value_and_gradient.
  void hessian_vector(std::span<const double> curvature, std::span<const double> v,
                      std::span<double> out) const {
    const std::size_t u = x_.cols();
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t i = 0; i < x_.rows(); ++i) {
      auto row = x_.row(i);
      double xv = v[u];
      for (std::size_t j = 0; j < u; ++j) xv += row[j] * v[j];
      const double t = curvature[i] * xv;
      for (std::size_t j = 0; j < u; ++j) out[j] += t * row[j];
      out[u] += t;
    }
    for (std::size_t j = 0; j < u; ++j) out[j] += inv_c_ * v[j];
  }

 private:
  double margin(std::span<const double> theta, std::size_t i) const {
    auto row = x_.row(i);
    double z = theta[x_.cols()];
    for (std::size_t j = 0; j < row.size(); ++j) z += row[j] * theta[j];
    return z;
  }
  double penalty(std::span<const double> theta) const {
    double s = 0.0;
    for (std::size_t j = 0; j < x_.cols(); ++j) s += theta[j] * theta[j];
    return s;
  }

  const Matrix<double>& x_;
  std::span<const std::uint8_t> y_;
  double inv_c_;
  ClassWeights weights_;
};

struct FitOptions {
  int max_iterations = 1000;
  double tolerance = 1e-6;  // on the gradient infinity-norm
};

struct FitResult {
  std::vector<double> weights;
  double bias = 0.0;
  int iterations = 0;
  bool converged = false;
  double gradient_norm = 0.0;  // infinity-norm at the returned point
  std::vector<double> objective_trace;  // objective before the first and after every iteration
};

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double inf_norm(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

}  // namespace detail

/// Truncated Newton (Hessian-free conjugate gradient) with Armijo
/// backtracking. Starts from w = 0, b = 0. Every accepted step keeps the
/// objective non-increasing.
inline FitResult fit_logreg(const Matrix<double>& x, std::span<const std::uint8_t> y, double c,
                            ClassWeights class_weights, const FitOptions& options = {}) {
  for (double v : x.flat())
    if (!std::isfinite(v)) throw InvalidArgument("fit_logreg: non-finite feature");
  if (std::all_of(y.begin(), y.end(), [&](auto v) { return (v != 0) == (y[0] != 0); }))
    throw DegenerateLabels("fit_logreg: labels contain a single class");

  LogisticObjective obj(x, y, c, class_weights);
  const std::size_t d = obj.dim();
  std::vector<double> theta(d, 0.0), grad(d), curvature;
  double f = obj.value_and_gradient(theta, grad, &curvature);

  FitResult result;
  result.objective_trace.push_back(f);
  std::vector<double> step(d), r(d), p(d), hp(d), trial(d), moved(d), trial_grad(d);
  std::vector<double> trial_curv;

  int it = 0;
  for (; it < options.max_iterations; ++it) {
    if (detail::inf_norm(grad) <= options.tolerance) break;

    // Solve H step = -grad by CG to a forcing tolerance.
    const double gnorm = std::sqrt(detail::dot(grad, grad));
    const double cg_tol = std::min(0.1, std::sqrt(gnorm)) * gnorm;
    std::fill(step.begin(), step.end(), 0.0);
    for (std::size_t j = 0; j < d; ++j) r[j] = -grad[j];
    p = r;
    double rr = detail::dot(r, r);
    const std::size_t max_cg = std::max<std::size_t>(2 * d, 20);
    for (std::size_t k = 0; k < max_cg && std::sqrt(rr) > cg_tol; ++k) {
      obj.hessian_vector(curvature, p, hp);
      const double php = detail::dot(p, hp);
      if (!(php > 0)) break;
      const double alpha = rr / php;
      for (std::size_t j = 0; j < d; ++j) {
        step[j] += alpha * p[j];
        r[j] -= alpha * hp[j];
      }
      const double rr_new = detail::dot(r, r);
      const double beta = rr_new / rr;
      rr = rr_new;
      for (std::size_t j = 0; j < d; ++j) p[j] = r[j] + beta * p[j];
    }
    double slope = detail::dot(grad, step);
    if (!(slope < 0)) {  // fall back to steepest descent
      for (std::size_t j = 0; j < d; ++j) step[j] = -grad[j];
      slope = -gnorm * gnorm;
    }

    bool accepted = false;
    double alpha = 1.0;
    for (int ls = 0; ls < 60; ++ls, alpha *= 0.5) {
      for (std::size_t j = 0; j < d; ++j) {
        trial[j] = theta[j] + alpha * step[j];
        moved[j] = trial[j] - theta[j];
      }
      const double delta = obj.change(theta, moved);
      if (delta <= 1e-4 * alpha * slope) {
        obj.value_and_gradient(trial, trial_grad, &trial_curv);
        theta.swap(trial);
        grad.swap(trial_grad);
        curvature.swap(trial_curv);
        // Near the optimum delta is below one ulp of f; accumulating it keeps
        // the trace exact to rounding instead of jittering by an ulp.
        f += delta;
        accepted = true;
        break;
      }
    }
    if (!accepted) break;  // stalled at rounding level
    result.objective_trace.push_back(f);
  }

  result.iterations = it;
  result.gradient_norm = detail::inf_norm(grad);
  result.converged = result.gradient_norm <= options.tolerance;
  result.weights.assign(theta.begin(), theta.end() - 1);
  result.bias = theta.back();
  return result;
}

/// Average precision of a ranking: mean over positives of the precision at
/// each positive's rank. Items are ordered by descending score; ties keep
/// index order.
inline double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw InvalidArgument("average_precision: length mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double hits = 0.0, sum = 0.0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (labels[order[rank]]) {
      hits += 1.0;
      sum += hits / static_cast<double>(rank + 1);
    }
  }
  if (hits == 0.0) throw InvalidArgument("average_precision: no positive labels");
  return sum / hits;
}

struct ProbeSpec {
  std::string layer_id;
  std::size_t concept_index = 0;
  std::vector<double> c_grid{0.01, 0.1, 1.0, 10.0};
  int max_iterations = 1000;
  double tolerance = 1e-6;
  int folds = 5;
  std::uint64_t seed = 0;
  double default_c = 0.1;
};

struct CvScore {
  double c = 0.0;
  double mean_ap = 0.0;
  bool operator==(const CvScore&) const = default;
};

struct TrainedProbe {
  std::string layer_id;
  std::size_t concept_index = 0;
  std::vector<double> weights;  // in standardized feature space
  double bias = 0.0;
  double chosen_c = 0.0;
  std::vector<CvScore> cv_scores;  // grid order; empty when CV was skipped
  bool degenerate = false;
  double constant_rate = 0.0;  // prediction of a degenerate probe
  std::vector<double> feature_mean;
  std::vector<double> feature_scale;
  bool converged = true;
  int iterations = 0;

  bool operator==(const TrainedProbe&) const = default;
};

/// p(concept | features) for every row. Output is clamped to the open unit
/// interval for non-degenerate probes.
template <typename T>
std::vector<double> predict_proba(const TrainedProbe& probe, const Matrix<T>& features) {
  if (features.cols() != probe.weights.size())
    throw InvalidArgument("predict_proba: feature width " + std::to_string(features.cols()) +
                          " != probe width " + std::to_string(probe.weights.size()));
  std::vector<double> out(features.rows());
  if (probe.degenerate) {
    std::fill(out.begin(), out.end(), probe.constant_rate);
    return out;
  }
  constexpr double lo = std::numeric_limits<double>::min();
  const double hi = std::nextafter(1.0, 0.0);
  for (std::size_t i = 0; i < features.rows(); ++i) {
    auto row = features.row(i);
    double z = probe.bias;
    for (std::size_t j = 0; j < row.size(); ++j)
      z += probe.weights[j] * (static_cast<double>(row[j]) - probe.feature_mean[j]) / probe.feature_scale[j];
    out[i] = std::clamp(sigmoid(z), lo, hi);
  }
  return out;
}

namespace detail {

inline std::vector<std::uint8_t> select(std::span<const std::uint8_t> v, std::span<const std::size_t> idx) {
  std::vector<std::uint8_t> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = v[idx[i]];
  return out;
}

inline TrainedProbe fit_final(TrainedProbe probe, const Matrix<double>& features,
                              std::span<const std::uint8_t> labels, double c, const FitOptions& opts) {
  auto standardizer = Standardizer::fit(features);
  auto fit = fit_logreg(standardizer.apply(features), labels, c, class_balanced_weights(labels), opts);
  probe.weights = std::move(fit.weights);
  probe.bias = fit.bias;
  probe.chosen_c = c;
  probe.feature_mean = std::move(standardizer.mean);
  probe.feature_scale = std::move(standardizer.scale);
  probe.converged = fit.converged;
  probe.iterations = fit.iterations;
  return probe;
}

}  // namespace detail

/// Mean out-of-fold average precision for every C in the grid, or nullopt
/// when the labels are too unbalanced for `spec.folds` stratified folds.
inline std::optional<std::vector<CvScore>> cross_validate(const Matrix<double>& features,
                                                          std::span<const std::uint8_t> labels,
                                                          const ProbeSpec& spec) {
  auto folds = stratified_folds(labels, spec.folds, spec.seed);
  if (!folds) return std::nullopt;
  const FitOptions opts{spec.max_iterations, spec.tolerance};
  std::vector<CvScore> scores;
  for (double c : spec.c_grid) scores.push_back({c, 0.0});

  for (int f = 0; f < spec.folds; ++f) {
    std::vector<std::size_t> train, valid;
    for (std::size_t i = 0; i < folds->size(); ++i) ((*folds)[i] == f ? valid : train).push_back(i);
    const auto y_train = detail::select(labels, train);
    const auto y_valid = detail::select(labels, valid);
    const auto raw_train = select_rows(features, train);
    const auto standardizer = Standardizer::fit(raw_train);
    const auto x_train = standardizer.apply(raw_train);
    const auto x_valid = standardizer.apply(select_rows(features, valid));
    const auto class_weights = class_balanced_weights(y_train);
    for (auto& score : scores) {
      auto fit = fit_logreg(x_train, y_train, score.c, class_weights, opts);
      std::vector<double> margins(valid.size());
      for (std::size_t i = 0; i < valid.size(); ++i) {
        auto row = x_valid.row(i);
        margins[i] = fit.bias + detail::dot(row, fit.weights);
      }
      score.mean_ap += average_precision(margins, y_valid);
    }
  }
  for (auto& score : scores) score.mean_ap /= spec.folds;
  return scores;
}

/// Trains one probe. Single-class labels give a degenerate constant-rate
/// probe; labels too sparse for CV fall back to `spec.default_c`.
template <typename T>
TrainedProbe train_probe(const Matrix<T>& raw_features, std::span<const std::uint8_t> labels,
                         const ProbeSpec& spec) {
  if (spec.c_grid.empty()) throw InvalidArgument("train_probe: empty C grid");
  for (double c : spec.c_grid)
    if (!(c > 0)) throw InvalidArgument("train_probe: C values must be positive");
  if (spec.folds < 2) throw InvalidArgument("train_probe: folds must be >= 2");
  if (raw_features.rows() != labels.size()) throw InvalidArgument("train_probe: row/label mismatch");

  const auto features = matrix_cast<double>(raw_features);
  TrainedProbe probe;
  probe.layer_id = spec.layer_id;
  probe.concept_index = spec.concept_index;

  const auto positives = static_cast<std::size_t>(std::count_if(
      labels.begin(), labels.end(), [](std::uint8_t v) { return v != 0; }));
  if (positives == 0 || positives == labels.size()) {
    const double rate = static_cast<double>(positives) / static_cast<double>(labels.size());
    const double clipped = std::clamp(rate, 1e-12, 1.0 - 1e-12);
    auto standardizer = Standardizer::fit(features);
    probe.degenerate = true;
    probe.constant_rate = rate;
    probe.weights.assign(features.cols(), 0.0);
    probe.bias = std::log(clipped / (1.0 - clipped));
    probe.chosen_c = spec.default_c;
    probe.feature_mean = std::move(standardizer.mean);
    probe.feature_scale = std::move(standardizer.scale);
    return probe;
  }

  double chosen = spec.default_c;
  if (auto scores = cross_validate(features, labels, spec)) {
    const CvScore* best = nullptr;
    for (const auto& s : *scores)
      if (!best || s.mean_ap > best->mean_ap || (s.mean_ap == best->mean_ap && s.c < best->c)) best = &s;
    chosen = best->c;
    probe.cv_scores = std::move(*scores);
  }
  return detail::fit_final(std::move(probe), features, labels, chosen,
                           FitOptions{spec.max_iterations, spec.tolerance});
}

/// Trains every (layer, concept) probe over `rows` of the dataset (all rows
/// when empty). Work is spread over `threads` workers; results are ordered by
/// layer then concept regardless of scheduling.
inline std::vector<TrainedProbe> train_all_probes(const Dataset& ds, std::span<const std::size_t> layers,
                                                  const ProbeSpec& base, unsigned threads,
                                                  std::span<const std::size_t> rows = {}) {
  const std::size_t k = ds.manifest.num_concepts();
  std::vector<TrainedProbe> probes(layers.size() * k);
  std::vector<Matrix<float>> features;
  for (auto l : layers)
    features.push_back(rows.empty() ? ds.activations[l] : select_rows(ds.activations[l], rows));

  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(probes.size());
  auto worker = [&] {
    for (std::size_t task; (task = next.fetch_add(1)) < probes.size();) try {
      const std::size_t li = task / k, concept_index = task % k;
      auto labels = ds.concept_labels(concept_index);
      if (!rows.empty()) labels = detail::select(labels, rows);
      ProbeSpec spec = base;
      spec.layer_id = ds.manifest.layers[layers[li]].layer_id;
      spec.concept_index = concept_index;
      probes[task] = train_probe(features[li], labels, spec);
    } catch (...) {
      errors[task] = std::current_exception();
    }
  };
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(probes.size())));
  std::vector<std::jthread> pool;
  for (unsigned t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  pool.clear();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return probes;
}

// --- probe store (JSON lines) ------------------------------------------------

namespace detail {

inline std::string encode_doubles(std::span<const double> v) { return base64_encode(encode_le<double>(v)); }
inline std::vector<double> decode_doubles(const std::string& s) { return decode_le<double>(base64_decode(s)); }

}  // namespace detail

inline nlohmann::ordered_json probe_to_json(const TrainedProbe& p) {
  nlohmann::ordered_json j;
  j["layer_id"] = p.layer_id;
  j["concept"] = p.concept_index;
  j["weights"] = detail::encode_doubles(p.weights);
  j["bias"] = p.bias;
  j["chosen_c"] = p.chosen_c;
  auto cv = nlohmann::ordered_json::array();
  for (const auto& s : p.cv_scores) cv.push_back({{"c", s.c}, {"mean_ap", s.mean_ap}});
  j["cv_scores"] = cv;
  j["feature_mean"] = detail::encode_doubles(p.feature_mean);
  j["feature_scale"] = detail::encode_doubles(p.feature_scale);
  j["degenerate"] = p.degenerate;
  j["constant_rate"] = p.constant_rate;
  j["converged"] = p.converged;
  j["iterations"] = p.iterations;
  return j;
}

inline TrainedProbe probe_from_json(const nlohmann::json& j) {
  try {
    TrainedProbe p;
    p.layer_id = j.at("layer_id").get<std::string>();
    p.concept_index = j.at("concept").get<std::size_t>();
    p.weights = detail::decode_doubles(j.at("weights").get<std::string>());
    p.bias = j.at("bias").get<double>();
    p.chosen_c = j.at("chosen_c").get<double>();
    for (const auto& s : j.at("cv_scores")) p.cv_scores.push_back({s.at("c").get<double>(), s.at("mean_ap").get<double>()});
    p.feature_mean = detail::decode_doubles(j.at("feature_mean").get<std::string>());
    p.feature_scale = detail::decode_doubles(j.at("feature_scale").get<std::string>());
    p.degenerate = j.at("degenerate").get<bool>();
    p.constant_rate = j.at("constant_rate").get<double>();
    p.converged = j.at("converged").get<bool>();
    p.iterations = j.at("iterations").get<int>();
    if (p.feature_mean.size() != p.weights.size() || p.feature_scale.size() != p.weights.size())
      throw SchemaError("probe vectors have inconsistent lengths");
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed probe record: ") + e.what());
  }
}

inline std::string write_probe_store(std::span<const TrainedProbe> probes) {
  std::string out;
  for (const auto& p : probes) out += probe_to_json(p).dump() + "\n";
  return out;
}

inline std::vector<TrainedProbe> read_probe_store(std::string_view text) {
  std::vector<TrainedProbe> probes;
  std::size_t line_no = 0;
  while (!text.empty()) {
    auto nl = text.find('\n');
    auto line = detail::trim(text.substr(0, nl));
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (line.empty()) continue;
    try {
      probes.push_back(probe_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error&) {
      throw SchemaError("probe store line " + std::to_string(line_no) + ": invalid JSON");
    }
  }
  return probes;
}

}  // namespace bagel
