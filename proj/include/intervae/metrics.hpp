#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "intervae/common.hpp"
#include "intervae/rng.hpp"
#include "intervae/tensor.hpp"

namespace intervae {

// Sample-based distances between two point sets (rows = samples). All three
// are V-statistic estimators, so f(X, X) is exactly 0 and single-point sets
// are well defined.

namespace detail {

inline MatrixXd pairwise_distances(const MatrixXd& a, const MatrixXd& b) {
  MatrixXd out(a.rows(), b.rows());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < b.rows(); ++j) out(i, j) = (a.row(i) - b.row(j)).norm();
  return out;
}

}  // namespace detail

// Median of the off-diagonal pairwise distances of the pooled set; even
// counts average the two middle order statistics. Degenerate pools return 0
// and callers fall back to sigma = 1.
inline double median_heuristic(const MatrixXd& pooled) {
  const Index n = pooled.rows();
  check(n >= 2, "median heuristic needs at least two points");
  std::vector<double> dists;
  dists.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) dists.push_back((pooled.row(i) - pooled.row(j)).norm());
  std::sort(dists.begin(), dists.end());
  const std::size_t k = dists.size();
  return k % 2 == 1 ? dists[k / 2] : 0.5 * (dists[k / 2 - 1] + dists[k / 2]);
}

// Biased (V-statistic) squared-MMD with RBF kernel k(x,y) = exp(-|x-y|^2 / 2 sigma^2),
// sigma from the median heuristic on the pooled samples (fallback 1 when the
// pool is degenerate). Returns sqrt(max(0, MMD^2)).
inline double mmd(const MatrixXd& X, const MatrixXd& Y) {
  check(X.cols() == Y.cols(), "sample dimension mismatch");
  const Index m = X.rows(), n = Y.rows();
  check(m >= 1 && n >= 1, "empty sample set");
  MatrixXd pooled(m + n, X.cols());
  pooled << X, Y;
  double sigma = median_heuristic(pooled);
  if (sigma <= 0.0) sigma = 1.0;
  const double gamma = 1.0 / (2.0 * sigma * sigma);

  auto kmean = [&](const MatrixXd& a, const MatrixXd& b) {
    double s = 0.0;
    for (Index i = 0; i < a.rows(); ++i)
      for (Index j = 0; j < b.rows(); ++j)
        s += std::exp(-gamma * (a.row(i) - b.row(j)).squaredNorm());
    return s / (static_cast<double>(a.rows()) * static_cast<double>(b.rows()));
  };

  const double mmd2 = kmean(X, X) + kmean(Y, Y) - 2.0 * kmean(X, Y);
  return std::sqrt(std::max(0.0, mmd2));
}

// ---------------------------------------------------------------------------
// exact 1-Wasserstein
// ---------------------------------------------------------------------------

namespace detail {

// Jonker-Volgenant style shortest-augmenting-path assignment on a square
// cost matrix; returns the minimal total cost.
inline double solve_assignment(const MatrixXd& cost) {
  const Index n = cost.rows();
  check(cost.cols() == n, "assignment needs a square cost matrix");
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0), v(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<Index> match(static_cast<std::size_t>(n) + 1, 0), way(static_cast<std::size_t>(n) + 1, 0);
  for (Index i = 1; i <= n; ++i) {
    match[0] = i;
    Index j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n) + 1, inf);
    std::vector<bool> used(static_cast<std::size_t>(n) + 1, false);
    do {
      used[static_cast<std::size_t>(j0)] = true;
      const Index i0 = match[static_cast<std::size_t>(j0)];
      Index j1 = 0;
      double delta = inf;
      for (Index j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (Index j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(match[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (match[static_cast<std::size_t>(j0)] != 0);
    do {
      const Index j1 = way[static_cast<std::size_t>(j0)];
      match[static_cast<std::size_t>(j0)] = match[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  double total = 0.0;
  for (Index j = 1; j <= n; ++j) total += cost(match[static_cast<std::size_t>(j)] - 1, j - 1);
  return total;
}

}  // namespace detail

// Exact W1 between uniform empirical measures with Euclidean ground cost.
// Equal sizes solve one optimal assignment; unequal sizes replicate each
// point to the lcm of the sizes (still the exact transport optimum), bounded
// by max_expanded to keep the cubic solver honest.
inline double wasserstein(const MatrixXd& X, const MatrixXd& Y, Index max_expanded = 256) {
  check(X.cols() == Y.cols(), "sample dimension mismatch");
  const Index m = X.rows(), n = Y.rows();
  check(m >= 1 && n >= 1, "empty sample set");
  if (m == n) return detail::solve_assignment(detail::pairwise_distances(X, Y)) / static_cast<double>(n);

  const Index l = std::lcm(m, n);
  check(l <= max_expanded, "unequal sample sizes exceed the exact-solver expansion limit");
  MatrixXd Xe(l, X.cols()), Ye(l, Y.cols());
  for (Index i = 0; i < l; ++i) {
    Xe.row(i) = X.row(i / (l / m));
    Ye.row(i) = Y.row(i / (l / n));
  }
  return detail::solve_assignment(detail::pairwise_distances(Xe, Ye)) / static_cast<double>(l);
}

// Energy distance ED = E|X-Y| - 1/2 E|X-X'| - 1/2 E|Y-Y'| with all-pairs
// (V-statistic) means, so ED(X, X) = 0 holds exactly.
inline double energy_distance(const MatrixXd& X, const MatrixXd& Y) {
  check(X.cols() == Y.cols(), "sample dimension mismatch");
  const Index m = X.rows(), n = Y.rows();
  check(m >= 1 && n >= 1, "empty sample set");
  auto dmean = [](const MatrixXd& a, const MatrixXd& b) {
    double s = 0.0;
    for (Index i = 0; i < a.rows(); ++i)
      for (Index j = 0; j < b.rows(); ++j) s += (a.row(i) - b.row(j)).norm();
    return s / (static_cast<double>(a.rows()) * static_cast<double>(b.rows()));
  };
  return dmean(X, Y) - 0.5 * dmean(X, X) - 0.5 * dmean(Y, Y);
}

// Permutation test on the energy distance: p = (1 + #{D_perm >= D_obs}) / (n_perm + 1),
// the add-one convention, so p is never exactly 0.
inline double permutation_test(const MatrixXd& X, const MatrixXd& Y, Index n_perm, Rng& rng) {
  check(X.cols() == Y.cols(), "sample dimension mismatch");
  const Index m = X.rows(), n = Y.rows();
  const double d_obs = energy_distance(X, Y);
  MatrixXd pooled(m + n, X.cols());
  pooled << X, Y;
  std::vector<Index> idx(static_cast<std::size_t>(m + n));
  std::iota(idx.begin(), idx.end(), Index(0));

  Index exceed = 0;
  for (Index rep = 0; rep < n_perm; ++rep) {
    rng.shuffle(idx);
    MatrixXd Xp(m, X.cols()), Yp(n, Y.cols());
    for (Index i = 0; i < m; ++i) Xp.row(i) = pooled.row(idx[static_cast<std::size_t>(i)]);
    for (Index j = 0; j < n; ++j) Yp.row(j) = pooled.row(idx[static_cast<std::size_t>(m + j)]);
    if (energy_distance(Xp, Yp) >= d_obs) ++exceed;
  }
  return static_cast<double>(1 + exceed) / static_cast<double>(n_perm + 1);
}

struct MetricsReport {
  double mmd = 0.0;
  double wsd = 0.0;
  double erg = 0.0;
  double p_value = 1.0;
};

inline MetricsReport compute_metrics(const MatrixXd& model_samples, const MatrixXd& truth,
                                     Index n_perm, Rng& rng) {
  MetricsReport r;
  r.mmd = mmd(model_samples, truth);
  r.wsd = wasserstein(model_samples, truth);
  r.erg = energy_distance(model_samples, truth);
  r.p_value = permutation_test(model_samples, truth, n_perm, rng);
  return r;
}

}  // namespace intervae
