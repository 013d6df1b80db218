#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "intervae/baseline.hpp"
#include "intervae/metrics.hpp"
#include "intervae/model.hpp"
#include "intervae/scm.hpp"

namespace intervae {

// Held-out evaluation: for every test instance and every intervention query,
// draw one latent from the posterior, decode it to a mixture, sample as many
// points as the ground-truth interventional dataset holds, and score both the
// model samples and the conditional-MVN baseline samples against the ground
// truth with all four metrics.

struct EvalRow {
  Index instance = 0;
  std::string intervention;  // e.g. "do(V0=5)"
  double mmd = 0.0;
  double wsd = 0.0;
  double erg = 0.0;
  double p_value = 1.0;
};

struct EvalAggregate {
  double mmd = 0.0;
  double wsd = 0.0;
  double erg = 0.0;
  double p_value = 0.0;
  Index rows = 0;
};

struct EvalResult {
  std::vector<EvalRow> model_rows;
  std::vector<EvalRow> baseline_rows;
  EvalAggregate model;
  EvalAggregate baseline;
};

namespace detail {

inline EvalAggregate aggregate_rows(const std::vector<EvalRow>& rows) {
  EvalAggregate agg;
  agg.rows = static_cast<Index>(rows.size());
  check(agg.rows > 0, "cannot aggregate over zero evaluation rows");
  for (const EvalRow& r : rows) {
    agg.mmd += r.mmd;
    agg.wsd += r.wsd;
    agg.erg += r.erg;
    agg.p_value += r.p_value;
  }
  const double n = static_cast<double>(agg.rows);
  agg.mmd /= n;
  agg.wsd /= n;
  agg.erg /= n;
  agg.p_value /= n;
  return agg;
}

inline std::string intervention_label(const InterventionQuery& q, const CorpusConfig& cfg) {
  std::ostringstream out;
  out << "do(";
  bool first = true;
  for (Index j = 0; j < q.d(); ++j)
    if (q.targets[static_cast<std::size_t>(j)]) {
      if (!first) out << ",";
      out << "V" << j;
      first = false;
    }
  out << "=" << cfg.values[static_cast<std::size_t>(q.value_index - 1)] << ")";
  return out.str();
}

}  // namespace detail

// Sample the model's interventional estimate for one (instance, query) pair.
// The rng drives the latent draw and the mixture draw; evaluation runs with
// dropout off.
inline MatrixXd sample_model_distribution(const ParamStore& store, const ModelConfig& cfg,
                                          const TrainingInstance& inst,
                                          const InterventionQuery& query, Index count, Rng& rng) {
  Tape<double> t;
  auto iv = constant(t, encode_intervention<double>(query, cfg.n_values));
  auto post = encode(t, store, cfg, constant(t, inst.observational), iv, rng, false);
  auto z = reparameterize(t, post, rng);
  auto dec = decode(t, store, cfg, z, iv, rng, false);
  const GaussianMixture gm = to_mixture(dec);
  return sample_mixture(gm, count, rng).to_matrix();
}

inline EvalResult evaluate_corpus(const ParamStore& store, const ModelConfig& cfg,
                                  const Corpus& corpus, const std::vector<Index>& instance_ids,
                                  Index n_perm, std::uint64_t seed) {
  check(!instance_ids.empty(), "evaluation needs at least one instance");
  Rng master(seed);
  EvalResult res;
  for (Index idx : instance_ids) {
    check(idx >= 0 && idx < static_cast<Index>(corpus.instances.size()),
          "evaluation index out of range");
    const TrainingInstance& inst = corpus.instances[static_cast<std::size_t>(idx)];
    const Mvn joint = fit_mvn(inst.observational.to_matrix());

    for (std::size_t b = 0; b < inst.interventional.size(); ++b) {
      const InstanceBlock& block = inst.interventional[b];
      const MatrixXd truth = block.data.to_matrix();
      const double value = corpus.config.values[static_cast<std::size_t>(block.query.value_index - 1)];

      Rng model_rng = master.derive(0xE5, static_cast<std::uint64_t>(idx), b);
      const MatrixXd model_samples =
          sample_model_distribution(store, cfg, inst, block.query, truth.rows(), model_rng);

      Rng base_rng = master.derive(0xE7, static_cast<std::uint64_t>(idx), b);
      const MatrixXd base_samples =
          sample_baseline(joint, block.query, value, truth.rows(), base_rng);

      EvalRow mrow, brow;
      mrow.instance = brow.instance = idx;
      mrow.intervention = brow.intervention = detail::intervention_label(block.query, corpus.config);

      Rng perm_m = master.derive(0xE6, static_cast<std::uint64_t>(idx), b);
      const MetricsReport mm = compute_metrics(model_samples, truth, n_perm, perm_m);
      mrow.mmd = mm.mmd;
      mrow.wsd = mm.wsd;
      mrow.erg = mm.erg;
      mrow.p_value = mm.p_value;

      Rng perm_b = master.derive(0xE8, static_cast<std::uint64_t>(idx), b);
      const MetricsReport bm = compute_metrics(base_samples, truth, n_perm, perm_b);
      brow.mmd = bm.mmd;
      brow.wsd = bm.wsd;
      brow.erg = bm.erg;
      brow.p_value = bm.p_value;

      res.model_rows.push_back(mrow);
      res.baseline_rows.push_back(brow);
    }
  }
  res.model = detail::aggregate_rows(res.model_rows);
  res.baseline = detail::aggregate_rows(res.baseline_rows);
  return res;
}

// No-effect analysis: how far the estimated interventional distribution moves
// the coordinates the intervention cannot touch (instances without edges).
// Returns the mean absolute deviation of non-target coordinate means from the
// observational means, averaged over the instance's queries — one number for
// the model and one for the baseline.
struct NoEffectDeviation {
  Index instance = 0;
  double model = 0.0;
  double baseline = 0.0;
};

inline NoEffectDeviation no_effect_deviation(const ParamStore& store, const ModelConfig& cfg,
                                             const Corpus& corpus, Index idx, std::uint64_t seed) {
  const TrainingInstance& inst = corpus.instances[static_cast<std::size_t>(idx)];
  const MatrixXd obs = inst.observational.to_matrix();
  const VectorXd obs_mean = obs.colwise().mean().transpose();
  const Mvn joint = fit_mvn(obs);
  Rng master(seed);

  NoEffectDeviation out;
  out.instance = idx;
  Index terms = 0;
  for (std::size_t b = 0; b < inst.interventional.size(); ++b) {
    const InstanceBlock& block = inst.interventional[b];
    const double value = corpus.config.values[static_cast<std::size_t>(block.query.value_index - 1)];
    const Index n = block.data.dim(0);

    Rng model_rng = master.derive(0xE5, static_cast<std::uint64_t>(idx), b);
    const MatrixXd ms = sample_model_distribution(store, cfg, inst, block.query, n, model_rng);
    Rng base_rng = master.derive(0xE7, static_cast<std::uint64_t>(idx), b);
    const MatrixXd bs = sample_baseline(joint, block.query, value, n, base_rng);

    for (Index j = 0; j < cfg.d; ++j) {
      if (block.query.targets[static_cast<std::size_t>(j)]) continue;
      out.model += std::abs(ms.col(j).mean() - obs_mean(j));
      out.baseline += std::abs(bs.col(j).mean() - obs_mean(j));
      ++terms;
    }
  }
  check(terms > 0, "no non-target coordinates to analyze");
  out.model /= static_cast<double>(terms);
  out.baseline /= static_cast<double>(terms);
  return out;
}

// ---------------------------------------------------------------------------
// report serialization
// ---------------------------------------------------------------------------

inline void write_eval_csv(const std::string& path, const std::vector<EvalRow>& rows) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open report for writing: " + path);
  out << "instance,intervention,mmd,wsd,erg,p\n";
  for (const EvalRow& r : rows)
    out << r.instance << ',' << r.intervention << ',' << r.mmd << ',' << r.wsd << ',' << r.erg
        << ',' << r.p_value << '\n';
}

inline nlohmann::json eval_rows_json(const std::vector<EvalRow>& rows) {
  nlohmann::json arr = nlohmann::json::array();
  for (const EvalRow& r : rows)
    arr.push_back({{"instance", r.instance},
                   {"intervention", r.intervention},
                   {"mmd", r.mmd},
                   {"wsd", r.wsd},
                   {"erg", r.erg},
                   {"p", r.p_value}});
  return arr;
}

inline nlohmann::json eval_aggregate_json(const EvalAggregate& agg) {
  return {{"mmd", agg.mmd}, {"wsd", agg.wsd}, {"erg", agg.erg}, {"p", agg.p_value},
          {"rows", agg.rows}};
}

inline void write_eval_json(const std::string& path, const EvalResult& res) {
  nlohmann::json doc;
  doc["model"] = {{"rows", eval_rows_json(res.model_rows)},
                  {"aggregate", eval_aggregate_json(res.model)}};
  doc["baseline"] = {{"rows", eval_rows_json(res.baseline_rows)},
                     {"aggregate", eval_aggregate_json(res.baseline)}};
  std::ofstream out(path);
  if (!out) throw DataError("cannot open report for writing: " + path);
  out << doc.dump(2) << '\n';
}

// Markdown aggregate table in the layout of the headline comparison: one row
// per system, MMD / WSD / ERG / mean p columns. Metric columns are sensitive
// to the raw data scale, so absolute values are only comparable within one
// corpus.
inline std::string aggregate_markdown(const EvalResult& res) {
  std::ostringstream out;
  out << "| system | MMD | WSD | ERG | p |\n";
  out << "|---|---|---|---|---|\n";
  auto row = [&](const std::string& name, const EvalAggregate& a) {
    out << "| " << name << " | " << a.mmd << " | " << a.wsd << " | " << a.erg << " | "
        << a.p_value << " |\n";
  };
  row("baseline", res.baseline);
  row("model", res.model);
  return out.str();
}

}  // namespace intervae
