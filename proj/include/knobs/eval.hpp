#pragma once

#include <algorithm>
#include <cstdio>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "knobs/concept_map.hpp"
#include "knobs/corpus.hpp"
#include "knobs/metrics.hpp"
#include "knobs/nested.hpp"
#include "knobs/steering.hpp"
#include "knobs/synthetic.hpp"

namespace knobs {

inline constexpr const char* kRecallNormalization = "hits / min(n, |targets|)";

struct RankingMetrics {
  MeanStat recall;
  MeanStat ndcg;
  std::size_t users_skipped = 0;
};

struct MetricsReport {
  RankingMetrics base;
  std::optional<RankingMetrics> nested;
  double l0_mean = 0.0;
  double recon_cosine_mean = 0.0;
  double recovered_recall_pct = 0.0;
  double recovered_ndcg_pct = 0.0;
  std::size_t n = 20;
};

// Mean Recall@n / nDCG@n of any score function over holdout users, with the
// input items masked from the ranking.
template <class ScoreFn>
RankingMetrics ranking_metrics(const HoldoutSet& users, std::size_t n, ScoreFn&& score) {
  MeanAccumulator recall;
  MeanAccumulator ndcg;
  RankingMetrics out;
  for (const auto& [u, pair] : users.users) {
    const auto target = sorted_unique(pair.target);
    const auto input = sorted_unique(pair.input);
    const Vector scores = score(std::span<const index_t>(input));
    const auto ranked = item_ids(top_n(scores, n, input));
    const auto r = recall_at_n(ranked, target, n);
    const auto g = ndcg_at_n(ranked, target, n);
    if (!r || !g) {
      ++out.users_skipped;
      continue;
    }
    recall.add(*r);
    ndcg.add(*g);
  }
  out.recall = MeanStat::from(recall);
  out.ndcg = MeanStat::from(ndcg);
  return out;
}

inline RankingMetrics evaluate_model(const Cfae& cfae, const SaeModel* sae, const HoldoutSet& users,
                                     std::size_t n = 20) {
  return ranking_metrics(users, n, [&](std::span<const index_t> items) {
    return nested_scores(cfae, sae, items);
  });
}

// Global popularity computed on the training rows.
inline RankingMetrics evaluate_popularity(std::span<const std::vector<index_t>> train_rows,
                                          std::size_t num_items, const HoldoutSet& users,
                                          std::size_t n = 20) {
  Vector popularity = Vector::Zero(static_cast<Eigen::Index>(num_items));
  for (const auto& row : train_rows)
    for (index_t i : row) popularity[i] += 1.0;
  return ranking_metrics(users, n, [&](std::span<const index_t>) { return popularity; });
}

struct CosineSummary {
  double mean = 0.0;
  std::size_t evaluated = 0;
  std::size_t excluded_zero_norm = 0;
};

// Mean cosine between standardized inputs and their reconstructions.
inline CosineSummary reconstruction_cosine(const SaeModel& sae, const RowMatrix& embeddings) {
  CosineSummary out;
  MeanAccumulator acc;
  for (Eigen::Index r = 0; r < embeddings.rows(); ++r) {
    const Vector y_std = sae.standardizer().apply(Vector(embeddings.row(r).transpose()));
    if (y_std.norm() == 0.0) {
      ++out.excluded_zero_norm;
      continue;
    }
    const Vector recon = sae.decode_standardized(sae.encode_standardized(y_std));
    acc.add(cosine_similarity(y_std, recon));
  }
  out.mean = acc.mean();
  out.evaluated = acc.count();
  return out;
}

inline double mean_l0(const SaeModel& sae, const RowMatrix& embeddings) {
  if (embeddings.rows() == 0) return 0.0;
  double total = 0.0;
  for (Eigen::Index r = 0; r < embeddings.rows(); ++r)
    total += static_cast<double>(sae.encode(Vector(embeddings.row(r).transpose())).l0());
  return total / static_cast<double>(embeddings.rows());
}

// CFAE embeddings of a set of user rows.
inline RowMatrix user_embeddings(const Cfae& cfae, std::span<const std::vector<index_t>> rows) {
  RowMatrix out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cfae_dim(cfae)));
  for (std::size_t u = 0; u < rows.size(); ++u)
    out.row(static_cast<Eigen::Index>(u)) = cfae_encode(cfae, rows[u]).transpose();
  return out;
}

inline RowMatrix holdout_input_embeddings(const Cfae& cfae, const HoldoutSet& users) {
  std::vector<std::vector<index_t>> rows;
  for (const auto& [u, pair] : users.users) rows.push_back(pair.input);
  return user_embeddings(cfae, rows);
}

// Base CFAE metrics; with an SAE also the nested metrics, L0 and
// reconstruction cosine on the holdout inputs, and recovered percentages.
inline MetricsReport evaluate(const Cfae& cfae, const SaeModel* sae, const HoldoutSet& users,
                              std::size_t n = 20) {
  MetricsReport report;
  report.n = n;
  report.base = evaluate_model(cfae, nullptr, users, n);
  if (sae == nullptr) return report;
  report.nested = evaluate_model(cfae, sae, users, n);
  const RowMatrix emb = holdout_input_embeddings(cfae, users);
  report.l0_mean = mean_l0(*sae, emb);
  report.recon_cosine_mean = reconstruction_cosine(*sae, emb).mean;
  report.recovered_recall_pct = recovered_pct(report.nested->recall.mean, report.base.recall.mean);
  report.recovered_ndcg_pct = recovered_pct(report.nested->ndcg.mean, report.base.ndcg.mean);
  return report;
}

inline Json mean_stat_json(const MeanStat& s) {
  return {{"mean", round_sig9(s.mean)}, {"sem", round_sig9(s.sem)}, {"users", s.count}};
}

inline Json ranking_json(const RankingMetrics& m) {
  return {{"recall", mean_stat_json(m.recall)},
          {"ndcg", mean_stat_json(m.ndcg)},
          {"users_skipped", m.users_skipped}};
}

inline Json report_to_json(const MetricsReport& r) {
  Json j = {{"n", r.n}, {"recall_normalization", kRecallNormalization}, {"base", ranking_json(r.base)}};
  if (r.nested) {
    j["nested"] = ranking_json(*r.nested);
    j["l0_mean"] = round_sig9(r.l0_mean);
    j["recon_cosine_mean"] = round_sig9(r.recon_cosine_mean);
    j["recovered_recall_pct"] = round_sig9(r.recovered_recall_pct);
    j["recovered_ndcg_pct"] = round_sig9(r.recovered_ndcg_pct);
  }
  return j;
}

// ---------------------------------------------------------------------------
// Sparsity / accuracy sweep
// ---------------------------------------------------------------------------

struct SweepCell {
  SaeVariant variant = SaeVariant::topk;
  std::size_t width_ratio = 8;
  std::size_t k = 32;
  double lambda1 = 3e-4;
  SaeLossKind loss = SaeLossKind::l2;
};

struct SweepCellResult {
  SweepCell cell;
  bool ok = false;
  std::string error;
  MetricsReport report;
};

// One SAE per cell, trained on the training-user embeddings with the given
// base configuration (variant, width, k, lambda and loss taken from the cell).
inline std::vector<SweepCellResult> sparsity_accuracy_sweep(
    const Cfae& cfae, std::span<const std::vector<index_t>> train_rows,
    std::span<const std::vector<index_t>> val_rows, const HoldoutSet& eval_users,
    std::span<const SweepCell> grid, const SaeTrainConfig& base, std::size_t n = 20) {
  const RowMatrix train_emb = user_embeddings(cfae, train_rows);
  const RowMatrix val_emb = user_embeddings(cfae, val_rows);
  std::vector<SweepCellResult> results;
  for (const auto& cell : grid) {
    SweepCellResult res;
    res.cell = cell;
    SaeTrainConfig cfg = base;
    cfg.variant = cell.variant;
    cfg.width_ratio = cell.width_ratio;
    cfg.k = cell.k;
    cfg.lambda1 = cell.lambda1;
    cfg.loss = cell.loss;
    try {
      const SaeModel sae = sae_train(train_emb, val_emb, cfg);
      res.report = evaluate(cfae, &sae, eval_users, n);
      res.ok = true;
    } catch (const Error& e) {
      res.error = e.what();
    }
    results.push_back(std::move(res));
  }
  return results;
}

inline void write_sparsity_csv(std::ostream& out, std::span<const SweepCellResult> results) {
  out << "variant,width_ratio,k,lambda1,loss,status,l0_mean,recon_cosine,recall_at_20,ndcg_at_20,"
         "recovered_recall_pct,recovered_ndcg_pct\n";
  for (const auto& r : results) {
    char buf[512];
    const auto& nested = r.report.nested;
    std::snprintf(buf, sizeof(buf), "%s,%zu,%zu,%.9g,%s,%s,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                  to_string(r.cell.variant).c_str(), r.cell.width_ratio, r.cell.k, r.cell.lambda1,
                  to_string(r.cell.loss).c_str(), r.ok ? "ok" : "failed", r.report.l0_mean,
                  r.report.recon_cosine_mean, nested ? nested->recall.mean : 0.0,
                  nested ? nested->ndcg.mean : 0.0, r.report.recovered_recall_pct,
                  r.report.recovered_ndcg_pct);
    out << buf;
  }
}

// Three parallel panels: L0, reconstruction cosine, recovered percentages.
inline Json sparsity_plot_json(std::span<const SweepCellResult> results) {
  Json labels = Json::array(), l0 = Json::array(), cosine = Json::array(), rec_recall = Json::array(),
       rec_ndcg = Json::array();
  for (const auto& r : results) {
    if (!r.ok) continue;
    labels.push_back(to_string(r.cell.variant) + "/k=" + std::to_string(r.cell.k) + "/" +
                     to_string(r.cell.loss));
    l0.push_back(round_sig9(r.report.l0_mean));
    cosine.push_back(round_sig9(r.report.recon_cosine_mean));
    rec_recall.push_back(round_sig9(r.report.recovered_recall_pct));
    rec_ndcg.push_back(round_sig9(r.report.recovered_ndcg_pct));
  }
  return {{"cells", labels},
          {"l0", l0},
          {"recon_cosine", cosine},
          {"recovered_recall_pct", rec_recall},
          {"recovered_ndcg_pct", rec_ndcg}};
}

// ---------------------------------------------------------------------------
// Planted-concept recovery
// ---------------------------------------------------------------------------

struct ConceptRecovery {
  std::string concept_name;
  std::optional<std::size_t> neuron;
  double purity = 0.0;  // share of the neuron's top items carrying the concept
  bool recovered = false;
};

struct RecoveryScore {
  double score = 0.0;
  std::size_t distinct_neurons = 0;
  std::vector<ConceptRecovery> concepts;
};

// Top-k items by activation in one neuron column; only positive
// activations count, ties go to the lower item index.
inline std::vector<index_t> top_activating_items(const SparseRowMatrix& codes, std::size_t neuron,
                                                 std::size_t k) {
  std::vector<std::pair<double, index_t>> active;
  for (Eigen::Index i = 0; i < codes.rows(); ++i) {
    const double v = codes.coeff(i, static_cast<Eigen::Index>(neuron));
    if (v > 0.0) active.push_back({v, static_cast<index_t>(i)});
  }
  std::sort(active.begin(), active.end(), [](const auto& a, const auto& b) {
    return a.first > b.first || (a.first == b.first && a.second < b.second);
  });
  std::vector<index_t> out;
  for (std::size_t r = 0; r < std::min(k, active.size()); ++r) out.push_back(active[r].second);
  return out;
}

inline RecoveryScore concept_recovery_score(const ConceptNeuronMap& map, const SyntheticTruth& truth,
                                            std::size_t top_items = 10, double purity = 0.9) {
  RecoveryScore out;
  std::vector<std::size_t> neurons;
  std::size_t hits = 0;
  for (std::size_t g = 0; g < truth.concepts.size(); ++g) {
    ConceptRecovery rec;
    rec.concept_name = truth.concepts[g];
    const auto it = std::lower_bound(map.tag_names.begin(), map.tag_names.end(), rec.concept_name);
    if (it != map.tag_names.end() && *it == rec.concept_name)
      rec.neuron = map.maps.representative_neuron_for_tag[static_cast<std::size_t>(it - map.tag_names.begin())];
    if (rec.neuron) {
      neurons.push_back(*rec.neuron);
      const auto top = top_activating_items(map.item_codes, *rec.neuron, top_items);
      std::size_t inside = 0;
      for (index_t i : top) inside += truth.carries(i, g) ? 1 : 0;
      rec.purity = static_cast<double>(inside) / static_cast<double>(top_items);
      rec.recovered = rec.purity >= purity;
    }
    hits += rec.recovered ? 1 : 0;
    out.concepts.push_back(std::move(rec));
  }
  std::sort(neurons.begin(), neurons.end());
  out.distinct_neurons =
      static_cast<std::size_t>(std::unique(neurons.begin(), neurons.end()) - neurons.begin());
  out.score = truth.concepts.empty()
                  ? 0.0
                  : static_cast<double>(hits) / static_cast<double>(truth.concepts.size());
  return out;
}

inline Json recovery_to_json(const RecoveryScore& r) {
  Json concepts = Json::array();
  for (const auto& c : r.concepts)
    concepts.push_back({{"concept", c.concept_name},
                        {"neuron", c.neuron ? Json(*c.neuron) : Json(nullptr)},
                        {"purity", round_sig9(c.purity)},
                        {"recovered", c.recovered}});
  return {{"score", round_sig9(r.score)}, {"distinct_neurons", r.distinct_neurons}, {"concepts", concepts}};
}

}  // namespace knobs
