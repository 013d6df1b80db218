#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "intervae/loss.hpp"
#include "intervae/model.hpp"
#include "intervae/params.hpp"
#include "intervae/rng.hpp"
#include "intervae/scm.hpp"

namespace intervae {

struct TrainConfig {
  ModelConfig model;
  Index batch_size = 64;
  Index epochs = 2000;
  double learning_rate = 1e-3;
  double beta = 0.01;
  std::uint64_t seed = 42;

  void validate() const {
    model.validate();
    check(batch_size >= 1 && epochs >= 0, "batch size and epochs must be positive");
    check(learning_rate >= 0.0 && beta >= 0.0, "learning rate and beta must be nonnegative");
  }
};

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

struct AdamState {
  ArrayXd m, v;
  long step = 0;

  explicit AdamState(Index n) : m(ArrayXd::Zero(n)), v(ArrayXd::Zero(n)) {}
};

inline void adam_step(ArrayXd& params, const ArrayXd& grads, AdamState& state, double lr,
                      double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  check(params.size() == grads.size() && params.size() == state.m.size(), "optimizer shape mismatch");
  ++state.step;
  state.m = beta1 * state.m + (1.0 - beta1) * grads;
  state.v = beta2 * state.v + (1.0 - beta2) * grads.square();
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  params -= lr * (state.m / c1) / ((state.v / c2).sqrt() + eps);
}

// Replaces non-finite entries with 0 in place; returns how many were zeroed.
inline Index zero_non_finite(ArrayXd& g) {
  Index n = 0;
  for (Index i = 0; i < g.size(); ++i)
    if (!std::isfinite(g[i])) {
      g[i] = 0.0;
      ++n;
    }
  return n;
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct EpochLog {
  Index epoch = 0;  // 1-based
  double total = 0.0;
  double reconstruction = 0.0;
  double kl = 0.0;
  double grad_norm = 0.0;
  Index nan_count = 0;
};

inline void write_training_log(const std::string& path, const std::vector<EpochLog>& log) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open training log for writing: " + path);
  out << "epoch,total,reconstruction,kl,grad_norm,nan_count\n";
  for (const auto& row : log)
    out << row.epoch << ',' << row.total << ',' << row.reconstruction << ',' << row.kl << ','
        << row.grad_norm << ',' << row.nan_count << '\n';
}

using CheckpointHook = std::function<void(Index epoch, const ParamStore&)>;

// One optimizer step over a batch of instances. The pseudo-input posteriors
// are encoded once on a shared tape; each instance's tape consumes their
// values as grad-tracked leaves, and the accumulated leaf gradients are
// handed back to the shared tape afterwards so prior and encoder parameters
// receive their share. Serial, fixed-order accumulation keeps runs
// byte-deterministic.
struct BatchStats {
  double total = 0.0, reconstruction = 0.0, kl = 0.0, grad_norm = 0.0;
  Index nan_count = 0;
};

inline BatchStats train_batch(ParamStore& store, const Corpus& corpus,
                              const std::vector<Index>& batch, const TrainConfig& cfg,
                              AdamState& adam, Rng& master, Index epoch, Index batch_index) {
  const ModelConfig& mc = cfg.model;
  const Index B = static_cast<Index>(batch.size());

  Tape<double> shared;
  Rng vamp_rng = master.derive(0xE2, static_cast<std::uint64_t>(epoch),
                               static_cast<std::uint64_t>(batch_index));
  auto pseudo = encode_pseudo_inputs(shared, store, mc, vamp_rng, /*training=*/true);

  ArrayXd grad = ArrayXd::Zero(store.size());
  std::vector<Tensord> seed_mu, seed_lv;
  for (const auto& p : pseudo) {
    seed_mu.push_back(Tensord::zeros(p.mu.shape()));
    seed_lv.push_back(Tensord::zeros(p.log_var.shape()));
  }

  BatchStats stats;
  for (Index idx : batch) {
    Tape<double> t;
    std::vector<LatentPosterior<double>> bridged;
    bridged.reserve(pseudo.size());
    for (const auto& p : pseudo)
      bridged.push_back({input(t, p.mu.value()), input(t, p.log_var.value())});

    Rng inst_rng = master.derive(0xE1, static_cast<std::uint64_t>(epoch),
                                 static_cast<std::uint64_t>(idx));
    LossBreakdown bd;
    auto terms = instance_loss(t, store, mc, corpus.instances[static_cast<std::size_t>(idx)],
                               bridged, cfg.beta, inst_rng, /*training=*/true, &bd);
    stats.total += bd.total;
    stats.reconstruction += bd.reconstruction;
    stats.kl += bd.kl;

    t.backward(terms.total.id);
    grad += t.param_grads(store.size());
    for (std::size_t k = 0; k < bridged.size(); ++k) {
      if (t.has_grad(bridged[k].mu.id)) seed_mu[k].data += t.grad(bridged[k].mu.id).data;
      if (t.has_grad(bridged[k].log_var.id)) seed_lv[k].data += t.grad(bridged[k].log_var.id).data;
    }
  }

  const double inv_b = 1.0 / static_cast<double>(B);
  grad *= inv_b;
  stats.total *= inv_b;
  stats.reconstruction *= inv_b;
  stats.kl *= inv_b;

  std::vector<std::pair<int, Tensord>> seeds;
  for (std::size_t k = 0; k < pseudo.size(); ++k) {
    seed_mu[k].data *= inv_b;
    seed_lv[k].data *= inv_b;
    seeds.push_back({pseudo[k].mu.id, std::move(seed_mu[k])});
    seeds.push_back({pseudo[k].log_var.id, std::move(seed_lv[k])});
  }
  shared.backward_seeded(seeds);
  grad += shared.param_grads(store.size());

  stats.nan_count = zero_non_finite(grad);
  stats.grad_norm = std::sqrt(grad.square().sum());
  adam_step(store.values_mut(), grad, adam, cfg.learning_rate);
  return stats;
}

inline std::vector<EpochLog> train(ParamStore& store, const Corpus& corpus, const TrainConfig& cfg,
                                   const CheckpointHook& on_checkpoint = {}) {
  cfg.validate();
  const std::vector<Index>& train_set = corpus.train_indices;
  if (train_set.empty()) throw DataError("training split is empty");
  for (Index i : train_set) {
    const auto& inst = corpus.instances[static_cast<std::size_t>(i)];
    check(inst.observational.dim(1) == cfg.model.d, "corpus dimension does not match model");
    check(!inst.interventional.empty(), "instance missing interventional data");
  }

  Rng master(cfg.seed);
  AdamState adam(store.size());
  std::vector<EpochLog> log;
  log.reserve(static_cast<std::size_t>(cfg.epochs));
  const Index checkpoint_every = std::max<Index>(1, cfg.epochs / 10);
  Index diverged_steps = 0;

  for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<Index> order = train_set;
    Rng shuffle_rng = master.derive(0xE0, static_cast<std::uint64_t>(epoch));
    shuffle_rng.shuffle(order);

    EpochLog row;
    row.epoch = epoch + 1;
    Index batches = 0;
    for (Index start = 0; start < static_cast<Index>(order.size()); start += cfg.batch_size) {
      const Index stop = std::min<Index>(start + cfg.batch_size, static_cast<Index>(order.size()));
      std::vector<Index> batch(order.begin() + start, order.begin() + stop);
      BatchStats stats = train_batch(store, corpus, batch, cfg, adam, master, epoch, batches);

      if (!std::isfinite(stats.total)) {
        if (++diverged_steps >= 10)
          throw NumericalError("training diverged: 10 consecutive non-finite batch losses");
      } else {
        diverged_steps = 0;
      }
      row.total += stats.total;
      row.reconstruction += stats.reconstruction;
      row.kl += stats.kl;
      row.grad_norm += stats.grad_norm;
      row.nan_count += stats.nan_count;
      ++batches;
    }
    row.total /= batches;
    row.reconstruction /= batches;
    row.kl /= batches;
    row.grad_norm /= batches;
    log.push_back(row);

    if (on_checkpoint && ((epoch + 1) % checkpoint_every == 0 || epoch + 1 == cfg.epochs))
      on_checkpoint(epoch + 1, store);
  }
  return log;
}

}  // namespace intervae
