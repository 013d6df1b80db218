#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "intervae/common.hpp"
#include "intervae/ivrep.hpp"
#include "intervae/rng.hpp"
#include "intervae/tensor.hpp"

namespace intervae {

// ---------------------------------------------------------------------------
// linear-additive structural causal models: V_j = sum_i beta_ij V_i + eps_j
// ---------------------------------------------------------------------------

struct DagStructure {
  Index d = 0;
  std::vector<std::pair<Index, Index>> edges;  // (parent, child)
};

enum class NoiseFamily : std::uint32_t { gaussian = 0, beta = 1 };

inline std::string to_string(NoiseFamily f) { return f == NoiseFamily::gaussian ? "gaussian" : "beta"; }

// Per-variable noise parameters; gaussian uses sigma, beta uses (alpha, beta)
// on its raw [0,1] support (no centering).
struct NoiseSpec {
  NoiseFamily family = NoiseFamily::gaussian;
  double sigma = 0.5;
  double alpha = 1.0;
  double beta = 1.0;
};

struct Scm {
  DagStructure dag;
  MatrixXd weights;                    // weights(i, j) = beta_ij on edge i -> j
  std::vector<NoiseSpec> noise;        // length d
  std::map<Index, double> interventions;  // clamped variables

  Index d() const { return dag.d; }
};

// Deterministic topological order, ties broken by variable index (Kahn).
inline std::vector<Index> topological_order(const DagStructure& dag) {
  std::vector<Index> indegree(static_cast<std::size_t>(dag.d), 0);
  std::vector<std::vector<Index>> children(static_cast<std::size_t>(dag.d));
  for (auto [p, c] : dag.edges) {
    ++indegree[static_cast<std::size_t>(c)];
    children[static_cast<std::size_t>(p)].push_back(c);
  }
  std::vector<Index> order;
  order.reserve(static_cast<std::size_t>(dag.d));
  std::vector<bool> placed(static_cast<std::size_t>(dag.d), false);
  while (static_cast<Index>(order.size()) < dag.d) {
    Index pick = -1;
    for (Index v = 0; v < dag.d; ++v)
      if (!placed[static_cast<std::size_t>(v)] && indegree[static_cast<std::size_t>(v)] == 0) {
        pick = v;
        break;
      }
    check(pick >= 0, "graph has a cycle");
    placed[static_cast<std::size_t>(pick)] = true;
    order.push_back(pick);
    for (Index c : children[static_cast<std::size_t>(pick)]) --indegree[static_cast<std::size_t>(c)];
  }
  return order;
}

// d=2 draws uniformly from the three 2-variable shapes {X->Y, Y->X, none};
// larger d uses Erdős–Rényi edges over a random topological order.
inline DagStructure sample_dag(Index d, Rng& rng, double edge_prob = 0.3) {
  check(d >= 1, "need at least one variable");
  DagStructure dag;
  dag.d = d;
  if (d == 1) return dag;
  if (d == 2) {
    switch (rng.uniform_int(3)) {
      case 0: dag.edges.push_back({0, 1}); break;
      case 1: dag.edges.push_back({1, 0}); break;
      default: break;  // no edge
    }
    return dag;
  }
  std::vector<Index> order(static_cast<std::size_t>(d));
  for (Index v = 0; v < d; ++v) order[static_cast<std::size_t>(v)] = v;
  rng.shuffle(order);
  for (Index a = 0; a < d; ++a)
    for (Index b = a + 1; b < d; ++b)
      if (rng.uniform01() < edge_prob)
        dag.edges.push_back({order[static_cast<std::size_t>(a)], order[static_cast<std::size_t>(b)]});
  return dag;
}

// Edge weight magnitudes U(0.5, 2) with a random sign — uniform over
// [-2,-0.5] ∪ [0.5,2].
inline double sample_edge_weight(Rng& rng) {
  const double mag = rng.uniform(0.5, 2.0);
  return rng.uniform01() < 0.5 ? -mag : mag;
}

inline Scm sample_linear_scm(const DagStructure& dag, NoiseFamily family, Rng& rng) {
  Scm scm;
  scm.dag = dag;
  scm.weights = MatrixXd::Zero(dag.d, dag.d);
  for (auto [p, c] : dag.edges) scm.weights(p, c) = sample_edge_weight(rng);
  scm.noise.resize(static_cast<std::size_t>(dag.d));
  for (auto& n : scm.noise) {
    n.family = family;
    if (family == NoiseFamily::gaussian) {
      n.sigma = 0.5;
    } else {
      n.alpha = rng.uniform(0.5, 2.0);
      n.beta = rng.uniform(0.5, 2.0);
    }
  }
  return scm;
}

inline double sample_noise(const NoiseSpec& spec, Rng& rng) {
  if (spec.family == NoiseFamily::gaussian) return spec.sigma * rng.normal();
  return rng.beta(spec.alpha, spec.beta);
}

// Ancestral sampling in topological order; intervened variables are clamped
// in every row.
inline Tensord sample_data(const Scm& scm, Index n, Rng& rng) {
  check(n >= 1, "need at least one sample");
  const Index d = scm.d();
  const std::vector<Index> order = topological_order(scm.dag);
  Tensord out({n, d});
  for (Index r = 0; r < n; ++r) {
    for (Index v : order) {
      auto it = scm.interventions.find(v);
      if (it != scm.interventions.end()) {
        out.at2(r, v) = it->second;
        continue;
      }
      double val = sample_noise(scm.noise[static_cast<std::size_t>(v)], rng);
      for (Index p = 0; p < d; ++p)
        if (scm.weights(p, v) != 0.0) val += scm.weights(p, v) * out.at2(r, p);
      out.at2(r, v) = val;
    }
  }
  return out;
}

// Copy-with-surgery: clamps targets, leaves the original untouched.
// Re-intervening on an already-clamped variable replaces the old value.
inline Scm apply_intervention(const Scm& scm, const std::vector<Index>& targets, double value) {
  check(!targets.empty(), "intervention needs at least one target");
  Scm out = scm;
  for (Index t : targets) {
    check(t >= 0 && t < scm.d(), "intervention target out of range");
    out.interventions[t] = value;
  }
  return out;
}

// ---------------------------------------------------------------------------
// training corpus
// ---------------------------------------------------------------------------

// One interventional dataset tagged with its query.
struct InstanceBlock {
  InterventionQuery query;
  Tensord data;  // N x d
};

// One observational dataset plus the family of interventional datasets for a
// single model.
struct TrainingInstance {
  std::uint64_t scm_id = 0;
  bool has_edges = false;  // ground-truth connectivity, for no-effect analyses
  Tensord observational;   // N x d
  std::vector<InstanceBlock> interventional;
};

struct CorpusConfig {
  Index d = 2;
  Index count = 6000;
  Index samples_per_dataset = 50;
  NoiseFamily family = NoiseFamily::gaussian;
  double edge_prob = 0.3;
  Index distinct_graphs = 0;  // 0 = fresh graph per model (2-var protocol)
  std::vector<double> values = {5.0};
  Index train_count = 5400;
  std::uint64_t seed = 42;
};

struct Corpus {
  CorpusConfig config;
  std::vector<TrainingInstance> instances;
  std::vector<Index> train_indices;
  std::vector<Index> test_indices;
};

// Each instance: one observational dataset plus d interventional datasets
// (do(V_j = value_i) for every variable j and every value index i), all from
// its own rng substream so generation parallelizes and reruns reproduce.
inline Corpus generate_corpus(const CorpusConfig& cfg) {
  check(cfg.count >= 0, "negative corpus size");
  check(cfg.train_count <= cfg.count, "train split exceeds corpus");
  check(!cfg.values.empty(), "corpus needs at least one intervention value");
  Rng master(cfg.seed);

  // 8-var protocol: a fixed pool of distinct graphs reused with fresh
  // parameters; 2-var protocol: fresh (uniform over 3 shapes) per model.
  std::vector<DagStructure> pool;
  if (cfg.distinct_graphs > 0) {
    pool.reserve(static_cast<std::size_t>(cfg.distinct_graphs));
    for (Index g = 0; g < cfg.distinct_graphs; ++g) {
      Rng r = master.derive(0xDA6, static_cast<std::uint64_t>(g));
      pool.push_back(sample_dag(cfg.d, r, cfg.edge_prob));
    }
  }

  Corpus corpus;
  corpus.config = cfg;
  corpus.instances.resize(static_cast<std::size_t>(cfg.count));
  for (Index m = 0; m < cfg.count; ++m) {
    Rng r = master.derive(0x111, static_cast<std::uint64_t>(m));
    DagStructure dag = pool.empty()
                           ? sample_dag(cfg.d, r, cfg.edge_prob)
                           : pool[static_cast<std::size_t>(m) % pool.size()];
    Scm scm = sample_linear_scm(dag, cfg.family, r);

    TrainingInstance& inst = corpus.instances[static_cast<std::size_t>(m)];
    inst.scm_id = static_cast<std::uint64_t>(m);
    inst.has_edges = !dag.edges.empty();
    inst.observational = sample_data(scm, cfg.samples_per_dataset, r);
    for (std::size_t i = 0; i < cfg.values.size(); ++i) {
      for (Index j = 0; j < cfg.d; ++j) {
        Scm done = apply_intervention(scm, {j}, cfg.values[i]);
        InstanceBlock block;
        block.query = single_target_query(cfg.d, j, static_cast<Index>(i) + 1);
        block.data = sample_data(done, cfg.samples_per_dataset, r);
        inst.interventional.push_back(std::move(block));
      }
    }
  }
  for (Index m = 0; m < cfg.count; ++m)
    (m < cfg.train_count ? corpus.train_indices : corpus.test_indices).push_back(m);
  return corpus;
}

}  // namespace intervae
