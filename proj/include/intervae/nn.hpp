#pragma once

#include <string>
#include <vector>

#include "intervae/params.hpp"
#include "intervae/rng.hpp"
#include "intervae/tape.hpp"
#include "intervae/tensor.hpp"

namespace intervae {

// Network building blocks. Every layer comes as a register_* function (adds
// its parameters to the store under a name prefix) and a forward function
// (replays it on a tape). Registration order is the layout contract, so the
// two must stay in sync.

template <typename Scalar>
void register_linear(BasicParamStore<Scalar>& store, const std::string& prefix, Index in, Index out,
                     Rng& rng) {
  store.add(prefix + ".W", uniform_fan_in<Scalar>({in, out}, in, rng));
  store.add(prefix + ".b", std::vector<Index>{out});
}

template <typename Scalar>
Var<Scalar> linear_layer(Tape<Scalar>& t, const BasicParamStore<Scalar>& store,
                         const std::string& prefix, Var<Scalar> x) {
  return linear(x, param(t, store, prefix + ".W"), param(t, store, prefix + ".b"));
}

template <typename Scalar>
void register_layer_norm(BasicParamStore<Scalar>& store, const std::string& prefix, Index width) {
  store.add(prefix + ".gamma", Tensor<Scalar>::full({width}, Scalar(1)));
  store.add(prefix + ".beta", std::vector<Index>{width});
}

template <typename Scalar>
Var<Scalar> layer_norm_layer(Tape<Scalar>& t, const BasicParamStore<Scalar>& store,
                             const std::string& prefix, Var<Scalar> x) {
  return layer_norm(x, param(t, store, prefix + ".gamma"), param(t, store, prefix + ".beta"));
}

// Two-layer row-wise MLP with GELU; applied independently to each last-axis row.
template <typename Scalar>
void register_mlp(BasicParamStore<Scalar>& store, const std::string& prefix, Index in, Index hidden,
                  Index out, Rng& rng) {
  register_linear(store, prefix + ".fc1", in, hidden, rng);
  register_linear(store, prefix + ".fc2", hidden, out, rng);
}

template <typename Scalar>
Var<Scalar> mlp(Tape<Scalar>& t, const BasicParamStore<Scalar>& store, const std::string& prefix,
                Var<Scalar> x) {
  return linear_layer(t, store, prefix + ".fc2", gelu(linear_layer(t, store, prefix + ".fc1", x)));
}

// ---------------------------------------------------------------------------
// multi-head self-attention
// ---------------------------------------------------------------------------

template <typename Scalar>
void register_mhsa(BasicParamStore<Scalar>& store, const std::string& prefix, Index e, Rng& rng) {
  register_linear(store, prefix + ".q", e, e, rng);
  register_linear(store, prefix + ".k", e, e, rng);
  register_linear(store, prefix + ".v", e, e, rng);
  register_linear(store, prefix + ".o", e, e, rng);
}

// Scaled dot-product attention over the middle axis of [b, n, e].
template <typename Scalar>
Var<Scalar> mhsa(Tape<Scalar>& t, const BasicParamStore<Scalar>& store, const std::string& prefix,
                 Var<Scalar> x, Index heads) {
  const Index e = x.value().last_dim();
  check(x.value().rank() == 3, "mhsa: input must be rank 3");
  check(e % heads == 0, "mhsa: embed width not divisible by head count");
  const Index hd = e / heads;
  auto q = split_heads(linear_layer(t, store, prefix + ".q", x), heads);
  auto k = split_heads(linear_layer(t, store, prefix + ".k", x), heads);
  auto v = split_heads(linear_layer(t, store, prefix + ".v", x), heads);
  auto scores = scalar_mul(bmm(q, k, /*transpose_b=*/true), Scalar(1) / std::sqrt(Scalar(hd)));
  auto attn = softmax_last(scores);
  auto ctx = merge_heads(bmm(attn, v), heads);
  return linear_layer(t, store, prefix + ".o", ctx);
}

// ---------------------------------------------------------------------------
// transformer block (post-LN; feed-forward hidden width 4e)
// ---------------------------------------------------------------------------

template <typename Scalar>
void register_block(BasicParamStore<Scalar>& store, const std::string& prefix, Index e, Rng& rng) {
  register_mhsa(store, prefix + ".attn", e, rng);
  register_layer_norm(store, prefix + ".ln1", e);
  register_linear(store, prefix + ".ff1", e, 4 * e, rng);
  register_linear(store, prefix + ".ff2", 4 * e, e, rng);
  register_layer_norm(store, prefix + ".ln2", e);
}

template <typename Scalar>
Var<Scalar> transformer_block(Tape<Scalar>& t, const BasicParamStore<Scalar>& store,
                              const std::string& prefix, Var<Scalar> x, Index heads,
                              Scalar dropout_rate, Rng& rng, bool training) {
  auto a = dropout(mhsa(t, store, prefix + ".attn", x, heads), dropout_rate, rng, training);
  x = layer_norm_layer(t, store, prefix + ".ln1", add(x, a));
  auto f = linear_layer(t, store, prefix + ".ff2",
                        gelu(linear_layer(t, store, prefix + ".ff1", x)));
  f = dropout(f, dropout_rate, rng, training);
  return layer_norm_layer(t, store, prefix + ".ln2", add(x, f));
}

// ---------------------------------------------------------------------------
// alternating-axis attention stack
// ---------------------------------------------------------------------------

template <typename Scalar>
void register_alternating(BasicParamStore<Scalar>& store, const std::string& prefix, Index e,
                          Index L, Rng& rng) {
  check(L % 2 == 0, "alternating attention: layer count must be even");
  for (Index l = 0; l < L; ++l) register_block(store, prefix + ".layer" + std::to_string(l), e, rng);
}

// Input [N, d, e]. Odd layers (1st, 3rd, ...) attend over the d axis batched
// over samples; even layers transpose to attend over the N axis batched over
// variables, then transpose back.
template <typename Scalar>
Var<Scalar> alternating_attention(Tape<Scalar>& t, const BasicParamStore<Scalar>& store,
                                  const std::string& prefix, Var<Scalar> x, Index L, Index heads,
                                  Scalar dropout_rate, Rng& rng, bool training) {
  check(L % 2 == 0, "alternating attention: layer count must be even");
  for (Index l = 0; l < L; ++l) {
    const std::string name = prefix + ".layer" + std::to_string(l);
    if (l % 2 == 0) {
      x = transformer_block(t, store, name, x, heads, dropout_rate, rng, training);
    } else {
      x = transpose01(x);
      x = transformer_block(t, store, name, x, heads, dropout_rate, rng, training);
      x = transpose01(x);
    }
  }
  return x;
}

}  // namespace intervae
