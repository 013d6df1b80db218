#pragma once

#include <string>
#include <utility>
#include <vector>

#include "intervae/ivrep.hpp"
#include "intervae/mixture.hpp"
#include "intervae/nn.hpp"
#include "intervae/params.hpp"
#include "intervae/rng.hpp"
#include "intervae/tape.hpp"
#include "intervae/tensor.hpp"

namespace intervae {

// Conditional VAE over (observational dataset, intervention query) pairs:
// set-transformer encoder -> per-variable diagonal Gaussian posterior ->
// transformer decoder -> Gaussian mixture over R^d, with a learnable
// pseudo-input mixture prior.
struct ModelConfig {
  Index d = 2;          // variables
  Index n_values = 1;   // |I|, intervention values known to the corpus
  Index e = 16;         // embed width
  Index c = 10;         // mixture components
  Index L = 4;          // encoder attention layers (must be even)
  Index K_blocks = 2;   // decoder blocks
  Index K_vamp = 10;    // prior components
  Index ell = 1;        // latent channels per variable
  Index heads = 4;
  Index pseudo_rows = 16;  // rows per learnable pseudo-dataset
  double dropout = 0.1;

  void validate() const {
    check(d >= 1 && n_values >= 1 && e >= 1 && c >= 1 && ell >= 1, "model dims must be positive");
    check(L >= 0 && L % 2 == 0, "encoder layer count must be even");
    check(K_blocks >= 0 && K_vamp >= 1 && pseudo_rows >= 1, "prior/decoder sizes must be positive");
    check(heads >= 1 && e % heads == 0, "embed width must divide into heads");
    check(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0, 1)");
  }
};

// Initial bias on the posterior's log-variance outputs. Starting the posterior
// sharp keeps early reconstruction gradients focused on the per-dataset signal
// in mu instead of reparameterization noise; with a pseudo-input prior a
// collapsed (input-blind) encoder costs no KL, so a noisy start otherwise
// invites the optimizer to ignore the latent entirely.
inline constexpr double kPosteriorLogVarInit = -4.0;

template <typename Scalar>
void register_model(BasicParamStore<Scalar>& store, const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  register_linear(store, "enc.embed", cfg.n_values + 1, cfg.e, rng);
  register_alternating(store, "enc.stack", cfg.e, cfg.L, rng);
  register_mlp(store, "enc.head", cfg.e, cfg.e, 2 * cfg.ell, rng);
  {
    Tensor<Scalar> b = store.get("enc.head.fc2.b");
    for (Index i = cfg.ell; i < 2 * cfg.ell; ++i) b.data[i] = Scalar(kPosteriorLogVarInit);
    store.set("enc.head.fc2.b", b);
  }

  register_linear(store, "dec.embed", cfg.ell + cfg.n_values, cfg.e, rng);
  for (Index k = 0; k < cfg.K_blocks; ++k)
    register_block(store, "dec.block" + std::to_string(k), cfg.e, rng);
  register_linear(store, "dec.means", cfg.e, cfg.c, rng);
  register_linear(store, "dec.u", cfg.e, cfg.c * cfg.e, rng);
  register_linear(store, "dec.w", cfg.e, cfg.c, rng);

  for (Index k = 0; k < cfg.K_vamp; ++k) {
    const std::string p = "prior.p" + std::to_string(k);
    store.add(p + ".data", Tensor<Scalar>::gaussian({cfg.pseudo_rows, cfg.d}, Scalar(0), Scalar(1), rng));
    store.add(p + ".query", Tensor<Scalar>::uniform({cfg.d, cfg.n_values}, Scalar(0), Scalar(1), rng));
  }
}

template <typename Scalar>
struct LatentPosterior {
  Var<Scalar> mu;       // d x ell
  Var<Scalar> log_var;  // d x ell
};

// Encoder: [dataset | intervention channels] -> embed -> L alternating
// attention layers -> mean-pool over samples -> row-wise MLP -> (mu, log var).
// `data` is [N, d]; `iv` is [d, n_values] and may be a relaxed pseudo-query.
template <typename Scalar>
LatentPosterior<Scalar> encode(Tape<Scalar>& t, const BasicParamStore<Scalar>& store,
                               const ModelConfig& cfg, Var<Scalar> data, Var<Scalar> iv, Rng& rng,
                               bool training) {
  check(data.value().rank() == 2 && data.value().dim(1) == cfg.d, "dataset width mismatch");
  check(iv.value().rank() == 2 && iv.value().dim(0) == cfg.d && iv.value().dim(1) == cfg.n_values,
        "intervention matrix shape mismatch");
  const Index N = data.value().dim(0);
  auto x = concat_last(reshape(data, {N, cfg.d, Index(1)}), tile_rows(iv, N));
  auto h = linear_layer(t, store, "enc.embed", x);
  h = alternating_attention(t, store, "enc.stack", h, cfg.L, cfg.heads,
                            static_cast<Scalar>(cfg.dropout), rng, training);
  auto pooled = mean_rows(h);  // [d, e]
  auto stats = mlp(t, store, "enc.head", pooled);
  return {slice_last(stats, 0, cfg.ell), slice_last(stats, cfg.ell, cfg.ell)};
}

// z = mu + exp(log_var / 2) ⊙ eta, eta ~ N(0, I); gradients flow to both heads.
template <typename Scalar>
Var<Scalar> reparameterize(Tape<Scalar>& t, const LatentPosterior<Scalar>& post, Rng& rng) {
  Tensor<Scalar> eta = Tensor<Scalar>::gaussian(post.mu.shape(), Scalar(0), Scalar(1), rng);
  return add(post.mu, mul(vexp(scalar_mul(post.log_var, Scalar(0.5))), constant(t, eta)));
}

template <typename Scalar>
struct DecodedMixture {
  Var<Scalar> means;    // c x d
  Var<Scalar> us;       // c x d x e
  Var<Scalar> logw;     // c, log-simplex
  Var<Scalar> weights;  // c, simplex
};

// Decoder: concat intervention channels to z -> embed -> K blocks attending
// over the variable axis -> heads for means, covariance factors, weights.
template <typename Scalar>
DecodedMixture<Scalar> decode(Tape<Scalar>& t, const BasicParamStore<Scalar>& store,
                              const ModelConfig& cfg, Var<Scalar> z, Var<Scalar> iv, Rng& rng,
                              bool training) {
  check(z.value().rank() == 2 && z.value().dim(0) == cfg.d && z.value().dim(1) == cfg.ell,
        "latent shape mismatch");
  auto zc = concat_last(z, iv);  // [d, ell + n_values]
  auto h = reshape(linear_layer(t, store, "dec.embed", zc), {Index(1), cfg.d, cfg.e});
  for (Index k = 0; k < cfg.K_blocks; ++k)
    h = transformer_block(t, store, "dec.block" + std::to_string(k), h, cfg.heads,
                          static_cast<Scalar>(cfg.dropout), rng, training);
  auto rows = reshape(h, {cfg.d, cfg.e});

  auto means = transpose01(linear_layer(t, store, "dec.means", rows));  // [c, d]
  auto us = transpose01(reshape(linear_layer(t, store, "dec.u", rows), {cfg.d, cfg.c, cfg.e}));
  auto wlogits = linear_layer(t, store, "dec.w", mean_rows(rows));  // pooled over d -> [c]
  return {means, us, log_softmax_last(wlogits), softmax_last(wlogits)};
}

// Diagonal-Gaussian log density of z under (mu, log_var), summed over entries.
template <typename Scalar>
Var<Scalar> diag_normal_logpdf(Var<Scalar> z, Var<Scalar> mu, Var<Scalar> log_var) {
  constexpr Scalar log2pi = Scalar(1.8378770664093454836);
  auto quad = mul(square(sub(z, mu)), vexp(neg(log_var)));
  auto terms = add(quad, add_scalar(log_var, log2pi));
  return scalar_mul(sum_all(terms), Scalar(-0.5));
}

// Posteriors the encoder produces on each learnable pseudo-input; the prior
// is their uniform mixture.
template <typename Scalar>
std::vector<LatentPosterior<Scalar>> encode_pseudo_inputs(Tape<Scalar>& t,
                                                          const BasicParamStore<Scalar>& store,
                                                          const ModelConfig& cfg, Rng& rng,
                                                          bool training) {
  std::vector<LatentPosterior<Scalar>> out;
  out.reserve(static_cast<std::size_t>(cfg.K_vamp));
  for (Index k = 0; k < cfg.K_vamp; ++k) {
    const std::string p = "prior.p" + std::to_string(k);
    out.push_back(encode(t, store, cfg, param(t, store, p + ".data"),
                         param(t, store, p + ".query"), rng, training));
  }
  return out;
}

// log p(z) = log (1/K) sum_k q_phi(z | pseudo_k), stabilized.
template <typename Scalar>
Var<Scalar> vamp_log_prior(Tape<Scalar>& t, Var<Scalar> z,
                           const std::vector<LatentPosterior<Scalar>>& pseudo) {
  check(!pseudo.empty(), "prior needs at least one component");
  std::vector<Var<Scalar>> comps;
  comps.reserve(pseudo.size());
  for (const auto& p : pseudo) comps.push_back(diag_normal_logpdf(z, p.mu, p.log_var));
  auto lse = logsumexp_last(stack_scalars(t, comps));
  return add_scalar(lse, -std::log(static_cast<Scalar>(pseudo.size())));
}

// Value-level mixture for evaluation and reporting.
template <typename Scalar>
GaussianMixture to_mixture(const DecodedMixture<Scalar>& dec) {
  Tensord means = dec.means.value().template cast<double>();
  Tensord us = dec.us.value().template cast<double>();
  Tensord w = dec.weights.value().template cast<double>();
  return build_mixture(means, us, w.data.matrix(), kCovJitter);
}

}  // namespace intervae
