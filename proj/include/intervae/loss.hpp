#pragma once

#include <vector>

#include "intervae/mixture.hpp"
#include "intervae/model.hpp"
#include "intervae/scm.hpp"
#include "intervae/tape.hpp"

namespace intervae {

// Scalar summary of one instance's loss; the Vars stay on the tape for
// backward, the doubles go to the training log.
struct LossBreakdown {
  double reconstruction = 0.0;
  double kl = 0.0;
  double total = 0.0;
  std::vector<double> per_pair;  // per-(i,t) reconstruction NLLs
};

template <typename Scalar>
struct LossTerms {
  Var<Scalar> reconstruction;
  Var<Scalar> kl;
  Var<Scalar> total;
};

// Conditional ELBO for one training instance: for every (i, t) pair, encode
// the observational dataset with that query, draw one z, decode, score the
// matching interventional dataset under the mixture, and regularize against
// the pseudo-input prior. Terms are averaged uniformly over pairs.
//
// The printed form of the total subtracts the KL term; the ELBO it is derived
// from penalizes it, so the penalty sign is used here: total = rec + beta*kl.
template <typename Scalar>
LossTerms<Scalar> instance_loss(Tape<Scalar>& t, const BasicParamStore<Scalar>& store,
                                const ModelConfig& cfg, const TrainingInstance& inst,
                                const std::vector<LatentPosterior<Scalar>>& prior_posteriors,
                                Scalar beta, Rng& rng, bool training,
                                LossBreakdown* breakdown = nullptr) {
  check(!inst.interventional.empty(), "instance has no interventional datasets");
  const Index P = static_cast<Index>(inst.interventional.size());
  Tensor<Scalar> obs = inst.observational.cast<Scalar>();

  std::vector<Var<Scalar>> rec_terms, kl_terms;
  rec_terms.reserve(static_cast<std::size_t>(P));
  kl_terms.reserve(static_cast<std::size_t>(P));
  for (const auto& block : inst.interventional) {
    auto iv = constant(t, encode_intervention<Scalar>(block.query, cfg.n_values));
    auto post = encode(t, store, cfg, constant(t, obs), iv, rng, training);
    auto z = reparameterize(t, post, rng);
    auto dec = decode(t, store, cfg, z, iv, rng, training);

    auto rec = neg(mixture_mean_loglik(dec.means, dec.us, dec.logw, block.data.cast<Scalar>(),
                                       static_cast<Scalar>(kCovJitter)));
    auto kl = sub(diag_normal_logpdf(z, post.mu, post.log_var), vamp_log_prior(t, z, prior_posteriors));
    rec_terms.push_back(rec);
    kl_terms.push_back(kl);
    if (breakdown) breakdown->per_pair.push_back(static_cast<double>(rec.scalar()));
  }

  auto rec_mean = mean_all(stack_scalars(t, rec_terms));
  auto kl_mean = mean_all(stack_scalars(t, kl_terms));
  auto total = add(rec_mean, scalar_mul(kl_mean, beta));
  if (breakdown) {
    breakdown->reconstruction = static_cast<double>(rec_mean.scalar());
    breakdown->kl = static_cast<double>(kl_mean.scalar());
    breakdown->total = static_cast<double>(total.scalar());
  }
  return {rec_mean, kl_mean, total};
}

}  // namespace intervae
