#pragma once

#include <algorithm>
#include <cstdio>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "knobs/concept_map.hpp"
#include "knobs/corpus.hpp"
#include "knobs/metrics.hpp"
#include "knobs/nested.hpp"

namespace knobs {

struct Segment {
  std::string tag;
  std::vector<index_t> items;  // sorted

  bool contains(index_t item) const { return contains_sorted(items, item); }
};

inline std::vector<index_t> sorted_unique(std::span<const index_t> items) {
  std::vector<index_t> out(items.begin(), items.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// Top-n of the (optionally steered) nested model. History items are masked
// when mask_seen is set; ties go to the lower item index.
inline std::vector<ScoredItem> recommend(const Cfae& cfae, const SaeModel* sae,
                                         std::span<const index_t> history,
                                         const SteeringDirective* directive, std::size_t n,
                                         bool mask_seen = true) {
  const std::size_t num_items = cfae_items(cfae);
  for (index_t i : history)
    if (i >= num_items)
      throw Error(ErrorCode::incompatible_dims,
                  "history item " + std::to_string(i) + " outside catalog of " +
                      std::to_string(num_items));
  if (directive != nullptr) {
    if (sae == nullptr) throw Error(ErrorCode::contract, "steering requires a sparse autoencoder");
    directive->validate(sae->width());
    if (history.empty() && directive->alpha < 1.0)
      throw Error(ErrorCode::degenerate_profile, "empty history can only be steered at alpha = 1");
    if (directive->alpha == 0.0) directive = nullptr;
  }
  const auto seen = sorted_unique(history);
  const Vector scores = nested_scores(cfae, sae, seen, directive);
  return top_n(scores, n, mask_seen ? std::span<const index_t>(seen) : std::span<const index_t>());
}

// The tag whose share among the holdout items exceeds its share among the
// input items by the most. Ties go to the lexicographically smaller tag.
inline Segment select_salient_segment(const HoldoutPair& user, const TagTable& tags,
                                      const std::vector<std::vector<std::size_t>>& tags_by_item,
                                      const std::vector<std::vector<index_t>>& items_by_tag) {
  std::vector<double> holdout_hits(tags.num_tags(), 0.0);
  std::vector<double> input_hits(tags.num_tags(), 0.0);
  for (index_t i : user.target)
    for (std::size_t t : tags_by_item[i]) holdout_hits[t] += 1.0;
  for (index_t i : user.input)
    for (std::size_t t : tags_by_item[i]) input_hits[t] += 1.0;
  std::optional<std::size_t> best;
  double best_lift = -std::numeric_limits<double>::infinity();
  const double nh = static_cast<double>(user.target.size());
  const double ni = static_cast<double>(user.input.size());
  // tags are sorted, so a strict comparison keeps the smaller tag on ties
  for (std::size_t t = 0; t < tags.num_tags(); ++t) {
    if (holdout_hits[t] == 0.0) continue;
    const double lift = holdout_hits[t] / nh - (ni > 0.0 ? input_hits[t] / ni : 0.0);
    if (lift > best_lift) {
      best_lift = lift;
      best = t;
    }
  }
  if (!best) throw Error(ErrorCode::no_segment, "no tagged holdout items");
  return {tags.tags[*best], items_by_tag[*best]};
}

inline Segment select_salient_segment(const HoldoutPair& user, const TagTable& tags) {
  return select_salient_segment(user, tags, tags.tags_by_item(), tags.items_by_tag());
}

inline const std::vector<double>& default_alpha_grid() {
  static const std::vector<double> grid{0.0, 0.05, 0.1, 0.15, 0.2, 0.4, 0.6, 0.8};
  return grid;
}

struct SweepRow {
  NeuronMapping mapping = NeuronMapping::representative;
  double alpha = 0.0;
  double recall_at_20 = 0.0;
  double segment_precision_at_20 = 0.0;
  std::size_t users_evaluated = 0;
};

struct SweepTable {
  std::vector<SweepRow> rows;
  std::size_t users_skipped = 0;  // no tagged holdout item or unmapped tag
};

// Each user is steered toward their salient segment's neuron under each
// mapping and alpha; input items are masked from the top-20.
inline SweepTable steering_sweep(const Cfae& cfae, const SaeModel& sae, const ConceptLabels& labels,
                                 const HoldoutSet& users, const TagTable& tags,
                                 std::span<const double> alphas,
                                 std::span<const NeuronMapping> mappings) {
  constexpr std::size_t kDepth = 20;
  if (users.users.empty()) throw Error(ErrorCode::config, "steering sweep needs at least one user");
  if (alphas.empty()) throw Error(ErrorCode::config, "steering sweep needs an alpha grid");
  for (double a : alphas)
    if (!(a >= 0.0 && a <= 1.0)) throw Error(ErrorCode::config, "alpha must lie in [0, 1]");

  const auto tags_by_item = tags.tags_by_item();
  const auto items_by_tag = tags.items_by_tag();
  struct Prepared {
    const HoldoutPair* pair;
    Segment segment;
    std::vector<index_t> target;
  };
  std::vector<Prepared> prepared;
  SweepTable table;
  for (const auto& [u, pair] : users.users) {
    try {
      prepared.push_back({&pair, select_salient_segment(pair, tags, tags_by_item, items_by_tag),
                          sorted_unique(pair.target)});
    } catch (const Error& e) {
      if (e.code() != ErrorCode::no_segment) throw;
      ++table.users_skipped;
    }
  }

  for (NeuronMapping mapping : mappings) {
    std::vector<MeanAccumulator> recall(alphas.size());
    std::vector<MeanAccumulator> precision(alphas.size());
    for (const auto& p : prepared) {
      const auto neuron = labels.neuron_for(p.segment.tag, mapping);
      if (!neuron) continue;
      for (std::size_t a = 0; a < alphas.size(); ++a) {
        const auto directive = SteeringDirective::single(static_cast<index_t>(*neuron), alphas[a]);
        const auto top = item_ids(recommend(cfae, &sae, p.pair->input, &directive, kDepth));
        if (const auto r = recall_at_n(top, p.target, kDepth)) recall[a].add(*r);
        precision[a].add(segment_precision_at_n(top, p.segment.items, kDepth));
      }
    }
    for (std::size_t a = 0; a < alphas.size(); ++a)
      table.rows.push_back({mapping, alphas[a], recall[a].mean(), precision[a].mean(),
                            precision[a].count()});
  }
  return table;
}

inline void write_sweep_csv(std::ostream& out, const SweepTable& table) {
  out << "mapping_kind,alpha,recall_at_20,segment_precision_at_20,users_evaluated\n";
  for (const auto& r : table.rows) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%s,%.9g,%.9g,%.9g,%zu\n", to_string(r.mapping).c_str(), r.alpha,
                  r.recall_at_20, r.segment_precision_at_20, r.users_evaluated);
    out << buf;
  }
}

// Effect of boosting one tag's neuron for every user, compared with the
// unsteered nested model on the same users.
struct ConceptBoostEffect {
  std::string tag;
  std::size_t neuron = 0;
  double baseline_precision = 0.0;
  double steered_precision = 0.0;
  double baseline_recall = 0.0;
  double steered_recall = 0.0;
  std::size_t users = 0;
  std::size_t users_improved = 0;  // strictly more segment items in the top-20
};

inline ConceptBoostEffect concept_boost_effect(const Cfae& cfae, const SaeModel& sae,
                                               const HoldoutSet& users, const Segment& segment,
                                               std::size_t neuron, double alpha) {
  constexpr std::size_t kDepth = 20;
  ConceptBoostEffect effect;
  effect.tag = segment.tag;
  effect.neuron = neuron;
  MeanAccumulator bp, sp, br, sr;
  const auto directive = SteeringDirective::single(static_cast<index_t>(neuron), alpha);
  for (const auto& [u, pair] : users.users) {
    if (pair.input.empty()) continue;
    const auto target = sorted_unique(pair.target);
    const auto base = item_ids(recommend(cfae, &sae, pair.input, nullptr, kDepth));
    const auto steered = item_ids(recommend(cfae, &sae, pair.input, &directive, kDepth));
    const double b = segment_precision_at_n(base, segment.items, kDepth);
    const double s = segment_precision_at_n(steered, segment.items, kDepth);
    bp.add(b);
    sp.add(s);
    effect.users_improved += s > b ? 1 : 0;
    if (const auto r = recall_at_n(base, target, kDepth)) br.add(*r);
    if (const auto r = recall_at_n(steered, target, kDepth)) sr.add(*r);
  }
  effect.baseline_precision = bp.mean();
  effect.steered_precision = sp.mean();
  effect.baseline_recall = br.mean();
  effect.steered_recall = sr.mean();
  effect.users = bp.count();
  return effect;
}

}  // namespace knobs
