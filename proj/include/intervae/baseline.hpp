#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <vector>

#include "intervae/common.hpp"
#include "intervae/ivrep.hpp"
#include "intervae/rng.hpp"

namespace intervae {

// Conditional multivariate-normal reference: fit a joint Gaussian to the
// observational data, condition on the intervened coordinates analytically,
// and sample the remaining coordinates from the conditional.

struct Mvn {
  VectorXd mean;
  Eigen::MatrixXd cov;
};

// Maximum-likelihood mean with the unbiased (N-1) covariance. A tiny ridge is
// added only if the raw covariance fails its Cholesky factorization.
inline Mvn fit_mvn(const MatrixXd& data) {
  const Index n = data.rows(), d = data.cols();
  check(n >= 2, "covariance fit needs at least two samples");
  Mvn out;
  out.mean = data.colwise().mean().transpose();
  MatrixXd centered = data.rowwise() - out.mean.transpose();
  out.cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  Eigen::LLT<Eigen::MatrixXd> llt(out.cov);
  if (llt.info() != Eigen::Success)
    out.cov += 1e-8 * Eigen::MatrixXd::Identity(d, d);
  return out;
}

struct ConditionalMvn {
  std::vector<Index> free_indices;  // coordinates the conditional ranges over
  VectorXd mean;
  Eigen::MatrixXd cov;
};

// Textbook Gaussian conditioning: with x = (x_a, x_b) and x_b fixed,
//   mu_{a|b} = mu_a + S_ab S_bb^{-1} (x_b - mu_b)
//   S_{a|b} = S_aa - S_ab S_bb^{-1} S_ba.
// `fixed` maps coordinate index -> fixed value.
inline ConditionalMvn condition_mvn(const Mvn& joint, const std::vector<Index>& fixed_indices,
                                    const VectorXd& fixed_values) {
  const Index d = joint.mean.size();
  check(static_cast<Index>(fixed_indices.size()) == fixed_values.size(),
        "fixed index/value length mismatch");
  std::vector<bool> is_fixed(static_cast<std::size_t>(d), false);
  for (Index i : fixed_indices) {
    check(i >= 0 && i < d, "fixed index out of range");
    check(!is_fixed[static_cast<std::size_t>(i)], "duplicate fixed index");
    is_fixed[static_cast<std::size_t>(i)] = true;
  }

  ConditionalMvn out;
  for (Index i = 0; i < d; ++i)
    if (!is_fixed[static_cast<std::size_t>(i)]) out.free_indices.push_back(i);
  const Index a = static_cast<Index>(out.free_indices.size());
  const Index b = static_cast<Index>(fixed_indices.size());
  if (a == 0) {  // everything intervened: empty conditional
    out.mean = VectorXd(0);
    out.cov = Eigen::MatrixXd(0, 0);
    return out;
  }
  if (b == 0) {
    out.mean = joint.mean;
    out.cov = joint.cov;
    return out;
  }

  VectorXd mu_a(a), mu_b(b), delta(b);
  Eigen::MatrixXd s_aa(a, a), s_ab(a, b), s_bb(b, b);
  for (Index i = 0; i < a; ++i) {
    mu_a(i) = joint.mean(out.free_indices[static_cast<std::size_t>(i)]);
    for (Index j = 0; j < a; ++j)
      s_aa(i, j) = joint.cov(out.free_indices[static_cast<std::size_t>(i)],
                             out.free_indices[static_cast<std::size_t>(j)]);
    for (Index j = 0; j < b; ++j)
      s_ab(i, j) = joint.cov(out.free_indices[static_cast<std::size_t>(i)],
                             fixed_indices[static_cast<std::size_t>(j)]);
  }
  for (Index i = 0; i < b; ++i) {
    mu_b(i) = joint.mean(fixed_indices[static_cast<std::size_t>(i)]);
    delta(i) = fixed_values(i) - mu_b(i);
    for (Index j = 0; j < b; ++j)
      s_bb(i, j) = joint.cov(fixed_indices[static_cast<std::size_t>(i)],
                             fixed_indices[static_cast<std::size_t>(j)]);
  }

  Eigen::LLT<Eigen::MatrixXd> llt(s_bb);
  if (llt.info() != Eigen::Success) {
    s_bb += 1e-8 * Eigen::MatrixXd::Identity(b, b);
    llt.compute(s_bb);
    check(llt.info() == Eigen::Success, "conditioning block is not positive definite");
  }
  const Eigen::MatrixXd gain = llt.solve(s_ab.transpose()).transpose();  // S_ab S_bb^{-1}
  out.mean = mu_a + gain * delta;
  out.cov = s_aa - gain * s_ab.transpose();
  out.cov = 0.5 * (out.cov + out.cov.transpose());  // keep it symmetric
  return out;
}

// Draw `count` joint samples consistent with do(targets = value): free
// coordinates come from the conditional, intervened ones are clamped, and the
// original column order is preserved.
inline MatrixXd sample_baseline(const Mvn& joint, const InterventionQuery& query, double value,
                                Index count, Rng& rng) {
  const Index d = joint.mean.size();
  check(static_cast<Index>(query.targets.size()) == d, "query dimension mismatch");
  std::vector<Index> fixed;
  for (Index j = 0; j < d; ++j)
    if (query.targets[static_cast<std::size_t>(j)]) fixed.push_back(j);
  check(!fixed.empty(), "baseline sampling needs at least one intervened coordinate");
  VectorXd values = VectorXd::Constant(static_cast<Index>(fixed.size()), value);
  const ConditionalMvn cond = condition_mvn(joint, fixed, values);

  MatrixXd out(count, d);
  for (Index j : fixed) out.col(j).setConstant(value);
  const Index a = static_cast<Index>(cond.free_indices.size());
  if (a == 0) return out;

  Eigen::MatrixXd cov = cond.cov;
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) {
    cov += 1e-8 * Eigen::MatrixXd::Identity(a, a);
    llt.compute(cov);
    check(llt.info() == Eigen::Success, "conditional covariance is not positive definite");
  }
  const Eigen::MatrixXd chol = llt.matrixL();
  VectorXd eps(a);
  for (Index s = 0; s < count; ++s) {
    for (Index i = 0; i < a; ++i) eps(i) = rng.normal();
    const VectorXd x = cond.mean + chol * eps;
    for (Index i = 0; i < a; ++i) out(s, cond.free_indices[static_cast<std::size_t>(i)]) = x(i);
  }
  return out;
}

}  // namespace intervae
