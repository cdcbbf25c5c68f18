#pragma once

// Independent reference computations used by the unit and acceptance tests.
// These deliberately avoid the library's numeric code paths.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "bagel/ingest.hpp"
#include "bagel/matrix.hpp"

namespace oracle {

inline double gap(const bagel::SpatialTensor& t, std::size_t i, std::size_t u) {
  long double sum = 0;
  for (std::size_t y = 0; y < t.height; ++y)
    for (std::size_t x = 0; x < t.width; ++x) sum += t.at(i, u, y, x);
  return static_cast<double>(sum / static_cast<long double>(t.height * t.width));
}

/// Precision at each positive, counting items with a higher score or an equal
/// score and a smaller index as ranked above it.
inline double average_precision(std::span<const double> s, std::span<const std::uint8_t> y) {
  double sum = 0;
  int positives = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    ++positives;
    int above = 0, hits = 0;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (s[j] > s[i] || (s[j] == s[i] && j <= i)) {
        ++above;
        hits += y[j] ? 1 : 0;
      }
    }
    sum += static_cast<double>(hits) / above;
  }
  return sum / positives;
}

/// Support-weighted F1 from a 2x2 confusion matrix, F1 = 2TP / (2TP + FP + FN).
inline double weighted_f1(std::span<const std::uint8_t> truth, std::span<const std::uint8_t> pred) {
  long double cm[2][2] = {{0, 0}, {0, 0}};
  for (std::size_t i = 0; i < truth.size(); ++i) cm[truth[i] ? 1 : 0][pred[i] ? 1 : 0] += 1;
  long double total = 0;
  for (int c = 0; c < 2; ++c) {
    const long double tp = cm[c][c], fn = cm[c][1 - c], fp = cm[1 - c][c];
    const long double support = tp + fn;
    const long double denom = 2 * tp + fp + fn;
    total += support * (denom > 0 ? 2 * tp / denom : 0);
  }
  return static_cast<double>(total / static_cast<long double>(truth.size()));
}

/// sqrt of the base-2 JS divergence, long double with natural logs.
inline double js(std::span<const double> p, std::span<const double> q) {
  long double sp = 0, sq = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    sp += p[i];
    sq += q[i];
  }
  long double d = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const long double a = p[i] / sp, b = q[i] / sq, m = (a + b) / 2;
    if (a > 0) d += a * std::log(a / m) / 2;
    if (b > 0) d += b * std::log(b / m) / 2;
  }
  d /= std::log(2.0L);
  return static_cast<double>(std::sqrt(std::max(d, 0.0L)));
}

// --- logistic regression ----------------------------------------------------

struct Problem {
  Eigen::MatrixXd x;
  std::vector<std::uint8_t> y;
};

inline Eigen::MatrixXd to_eigen(const bagel::Matrix<double>& m) {
  Eigen::MatrixXd out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = m(i, j);
  return out;
}

inline double log1pexp(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

/// Weighted summed loss + ||w||^2/(2C) on theta = [w, b].
inline double objective(const Eigen::MatrixXd& x, std::span<const std::uint8_t> y, double c, double wpos,
                        double wneg, const Eigen::VectorXd& theta) {
  const long u = x.cols();
  const Eigen::VectorXd z = (x * theta.head(u)).array() + theta(u);
  double f = 0;
  for (long i = 0; i < x.rows(); ++i) f += y[i] ? wpos * log1pexp(-z(i)) : wneg * log1pexp(z(i));
  return f + theta.head(u).squaredNorm() / (2 * c);
}

inline Eigen::VectorXd gradient(const Eigen::MatrixXd& x, std::span<const std::uint8_t> y, double c, double wpos,
                                double wneg, const Eigen::VectorXd& theta) {
  const long u = x.cols();
  const Eigen::VectorXd z = (x * theta.head(u)).array() + theta(u);
  Eigen::VectorXd r(x.rows());
  for (long i = 0; i < x.rows(); ++i) {
    const double p = 1 / (1 + std::exp(-z(i)));
    r(i) = y[i] ? wpos * (p - 1) : wneg * p;
  }
  Eigen::VectorXd g(u + 1);
  g.head(u) = x.transpose() * r + theta.head(u) / c;
  g(u) = r.sum();
  return g;
}

/// Dense damped Newton; returns theta = [w, b].
inline Eigen::VectorXd fit(const Eigen::MatrixXd& x, std::span<const std::uint8_t> y, double c) {
  const long n = x.rows(), u = x.cols();
  double pos = 0;
  for (auto v : y) pos += v ? 1 : 0;
  const double wpos = n / (2 * pos), wneg = n / (2 * (n - pos));
  Eigen::MatrixXd xa(n, u + 1);
  xa << x, Eigen::VectorXd::Ones(n);
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(u + 1);
  for (int it = 0; it < 200; ++it) {
    const Eigen::VectorXd g = gradient(x, y, c, wpos, wneg, theta);
    if (g.lpNorm<Eigen::Infinity>() < 1e-11) break;
    const Eigen::VectorXd z = xa * theta;
    Eigen::VectorXd s(n);
    for (long i = 0; i < n; ++i) {
      const double p = 1 / (1 + std::exp(-z(i)));
      s(i) = (y[i] ? wpos : wneg) * p * (1 - p);
    }
    Eigen::MatrixXd h = xa.transpose() * s.asDiagonal() * xa;
    h.topLeftCorner(u, u).diagonal().array() += 1 / c;
    const Eigen::VectorXd step = h.ldlt().solve(-g);
    const double f0 = objective(x, y, c, wpos, wneg, theta);
    double a = 1;
    while (a > 1e-12 && objective(x, y, c, wpos, wneg, theta + a * step) > f0) a /= 2;
    theta += a * step;
  }
  return theta;
}

inline Eigen::MatrixXd standardize(const Eigen::MatrixXd& fit_on, const Eigen::MatrixXd& x) {
  const Eigen::RowVectorXd mean = fit_on.colwise().mean();
  Eigen::RowVectorXd sd = ((fit_on.rowwise() - mean).array().square().colwise().sum() / fit_on.rows()).sqrt();
  for (long j = 0; j < sd.size(); ++j)
    if (!(sd(j) > 1e-12)) sd(j) = 1;
  return (x.rowwise() - mean).array().rowwise() / sd.array();
}

struct CvResult {
  std::vector<double> mean_ap;
  double chosen_c = 0;
};

/// Brute-force CV over a fixed fold assignment: refit standardization and
/// weights per training split, score validation margins by AP, keep the best
/// mean (smaller C on ties).
inline CvResult cross_validate(const Eigen::MatrixXd& x, std::span<const std::uint8_t> y, std::span<const int> folds,
                               int k, std::span<const double> c_grid) {
  CvResult r;
  r.mean_ap.assign(c_grid.size(), 0);
  for (int f = 0; f < k; ++f) {
    std::vector<long> tr, va;
    for (std::size_t i = 0; i < folds.size(); ++i) (folds[i] == f ? va : tr).push_back(static_cast<long>(i));
    Eigen::MatrixXd xtr(tr.size(), x.cols()), xva(va.size(), x.cols());
    std::vector<std::uint8_t> ytr, yva;
    for (std::size_t i = 0; i < tr.size(); ++i) {
      xtr.row(i) = x.row(tr[i]);
      ytr.push_back(y[tr[i]]);
    }
    for (std::size_t i = 0; i < va.size(); ++i) {
      xva.row(i) = x.row(va[i]);
      yva.push_back(y[va[i]]);
    }
    const Eigen::MatrixXd str = standardize(xtr, xtr), sva = standardize(xtr, xva);
    for (std::size_t ci = 0; ci < c_grid.size(); ++ci) {
      const Eigen::VectorXd theta = fit(str, ytr, c_grid[ci]);
      const Eigen::VectorXd m = (sva * theta.head(x.cols())).array() + theta(x.cols());
      std::vector<double> scores(m.data(), m.data() + m.size());
      r.mean_ap[ci] += average_precision(scores, yva);
    }
  }
  std::size_t best = 0;
  for (std::size_t ci = 0; ci < c_grid.size(); ++ci) {
    r.mean_ap[ci] /= k;
    if (r.mean_ap[ci] > r.mean_ap[best] || (r.mean_ap[ci] == r.mean_ap[best] && c_grid[ci] < c_grid[best]))
      best = ci;
  }
  r.chosen_c = c_grid[best];
  return r;
}

/// Noisy linear problem: labels drawn from a logistic model so classes
/// overlap and CV scores differ across C.
inline bagel::Matrix<double> random_features(std::mt19937_64& rng, std::size_t n, std::size_t u, double scale = 1.0) {
  std::normal_distribution<double> g(0, 1);
  bagel::Matrix<double> x(n, u);
  for (auto& v : x.flat()) v = scale * g(rng);
  return x;
}

inline std::vector<std::uint8_t> random_labels(std::mt19937_64& rng, const bagel::Matrix<double>& x, double signal) {
  std::normal_distribution<double> g(0, 1);
  std::uniform_real_distribution<double> unif(0, 1);
  std::vector<double> w(x.cols());
  for (auto& v : w) v = g(rng);
  std::vector<std::uint8_t> y(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double z = 0;
    for (std::size_t j = 0; j < x.cols(); ++j) z += w[j] * x(i, j);
    y[i] = unif(rng) < 1 / (1 + std::exp(-signal * z)) ? 1 : 0;
  }
  return y;
}

}  // namespace oracle
