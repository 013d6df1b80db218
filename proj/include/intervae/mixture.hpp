#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "intervae/common.hpp"
#include "intervae/rng.hpp"
#include "intervae/tensor.hpp"

namespace intervae {

inline constexpr double kCovJitter = 5e-5;  // epsilon added to every decoded covariance diagonal

// Value-level Gaussian mixture over R^d — the decoder's estimate of an
// interventional distribution.
struct GaussianMixture {
  VectorXd weights;                 // length c, simplex
  MatrixX<double> means;            // c x d
  std::vector<Eigen::MatrixXd> covariances;  // c matrices, d x d

  Index components() const { return weights.size(); }
  Index dim() const { return means.cols(); }
};

// Assembles the mixture from raw decoder heads: Cov_k = U_k U_k^T + eps I.
inline GaussianMixture build_mixture(const Tensord& means, const Tensord& us,
                                     const VectorXd& weights, double eps = kCovJitter) {
  const Index c = means.dim(0), d = means.dim(1);
  check(us.rank() == 3 && us.dim(0) == c && us.dim(1) == d, "mixture factor shape mismatch");
  check(weights.size() == c, "mixture weight count mismatch");
  GaussianMixture gm;
  gm.weights = weights;
  gm.means = means.matrix(c, d);
  gm.covariances.reserve(static_cast<std::size_t>(c));
  for (Index k = 0; k < c; ++k) {
    Eigen::MatrixXd U = us.slab(k);
    Eigen::MatrixXd S = U * U.transpose();
    S.diagonal().array() += eps;
    gm.covariances.push_back(std::move(S));
  }
  return gm;
}

// log sum_k w_k N(x; mu_k, Sigma_k) via per-component Cholesky log-densities
// and a stabilized log-sum-exp.
inline double mixture_log_prob(const GaussianMixture& gm, const VectorXd& x) {
  const Index c = gm.components(), d = gm.dim();
  check(x.size() == d, "point dimension mismatch");
  ArrayXd ll(c);
  for (Index k = 0; k < c; ++k) {
    Eigen::LLT<Eigen::MatrixXd> llt(gm.covariances[static_cast<std::size_t>(k)]);
    if (llt.info() != Eigen::Success) throw NumericalError("mixture covariance not positive definite");
    VectorXd delta = x - gm.means.row(k).transpose();
    const double quad = delta.dot(llt.solve(delta));
    const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
    const double lw = gm.weights[k] > 0.0 ? std::log(gm.weights[k])
                                          : -std::numeric_limits<double>::infinity();
    ll[k] = lw - 0.5 * (quad + logdet + d * std::log(2.0 * M_PI));
  }
  const double mx = ll.maxCoeff();
  if (!std::isfinite(mx)) return mx;  // all components weightless
  return mx + std::log((ll - mx).exp().sum());
}

// Ancestral draw: categorical component, then Gaussian via Cholesky factor.
inline Tensord sample_mixture(const GaussianMixture& gm, Index n, Rng& rng) {
  const Index c = gm.components(), d = gm.dim();
  std::vector<Eigen::MatrixXd> chols;
  chols.reserve(static_cast<std::size_t>(c));
  for (Index k = 0; k < c; ++k) {
    Eigen::LLT<Eigen::MatrixXd> llt(gm.covariances[static_cast<std::size_t>(k)]);
    if (llt.info() != Eigen::Success) throw NumericalError("mixture covariance not positive definite");
    chols.push_back(llt.matrixL());
  }
  Tensord out({n, d});
  for (Index r = 0; r < n; ++r) {
    const double u = rng.uniform01();
    Index k = 0;
    double acc = 0.0;
    for (; k < c; ++k) {
      acc += gm.weights[k];
      if (u < acc) break;
    }
    if (k == c) k = c - 1;  // guard against weights summing to 1 - ulp
    VectorXd eta(d);
    for (Index j = 0; j < d; ++j) eta[j] = rng.normal();
    out.matrix(n, d).row(r) =
        (gm.means.row(k).transpose() + chols[static_cast<std::size_t>(k)] * eta).transpose();
  }
  return out;
}

}  // namespace intervae
