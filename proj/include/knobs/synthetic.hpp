#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "knobs/corpus.hpp"
#include "knobs/json_util.hpp"
#include "knobs/rng.hpp"

namespace knobs {

struct SyntheticSpec {
  std::size_t num_concepts = 16;
  std::size_t items_per_concept = 25;
  std::size_t num_users = 3000;
  std::size_t interactions_per_user = 40;
  // Per-user counts are uniform on [min, 2 * mean - min]; min = mean gives
  // every user exactly interactions_per_user items.
  std::size_t min_interactions_per_user = 40;
  double concentration = 0.3;
  double overlap = 0.1;
  // Popularity decay inside a concept block: weight of rank r is (r + 1)^-zipf.
  double zipf = 0.6;
  std::uint64_t seed = 0;

  std::size_t num_items() const { return num_concepts * items_per_concept; }
  std::size_t max_interactions_per_user() const {
    return 2 * interactions_per_user - min_interactions_per_user;
  }

  void validate() const {
    if (num_concepts < 1 || items_per_concept < 1 || num_users < 1 || interactions_per_user < 1)
      throw Error(ErrorCode::config, "synthetic counts must all be >= 1");
    if (!(overlap >= 0.0 && overlap < 1.0))
      throw Error(ErrorCode::config, "overlap must lie in [0, 1)");
    if (!(concentration > 0.0)) throw Error(ErrorCode::config, "concentration must be > 0");
    if (!(zipf >= 0.0)) throw Error(ErrorCode::config, "zipf exponent must be >= 0");
    if (min_interactions_per_user < 1 || min_interactions_per_user > interactions_per_user)
      throw Error(ErrorCode::config, "min_interactions_per_user must lie in [1, interactions_per_user]");
    if (max_interactions_per_user() > num_items())
      throw Error(ErrorCode::config, "interactions per user exceed the number of items");
  }
};

// Concept names double as tag strings.
inline std::string concept_name(std::size_t g) {
  static const char* const names[] = {"children", "love story", "film noir", "david lynch",
                                      "sci-fi",   "horror",     "musical",   "western",
                                      "documentary", "anime",  "comedy",    "war",
                                      "superhero", "heist",     "mystery",   "sports"};
  constexpr std::size_t count = sizeof(names) / sizeof(names[0]);
  return g < count ? names[g] : "concept_" + std::to_string(g);
}

struct SyntheticCorpus {
  InteractionMatrix x;
  TagTable tags;
  std::vector<std::string> titles;          // by item index
  std::vector<std::string> concepts;        // concept names, by concept index
  std::vector<std::vector<std::size_t>> item_concepts;  // by item index, ascending
  std::vector<RawTag> raw_tags;
};

namespace detail {

inline std::string padded_id(char prefix, std::size_t v, int width) {
  std::string digits = std::to_string(v);
  if (digits.size() < static_cast<std::size_t>(width)) digits.insert(0, width - digits.size(), '0');
  return prefix + digits;
}

inline int digits(std::size_t v) {
  int d = 1;
  while (v >= 10) {
    v /= 10;
    ++d;
  }
  return d;
}

}  // namespace detail

// Items live in G contiguous blocks; a fraction of them also join a second,
// randomly chosen block. Each user mixes the blocks with Dirichlet weights and
// draws distinct items from the mixture of within-block popularity curves.
inline SyntheticCorpus generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t g_count = spec.num_concepts;
  const std::size_t n = spec.num_items();
  Rng rng(spec.seed);

  std::vector<std::vector<std::size_t>> concepts_of(n);
  for (std::size_t i = 0; i < n; ++i) concepts_of[i].push_back(i / spec.items_per_concept);
  if (g_count > 1) {
    auto order = iota_indices(n);
    rng.shuffle(order);
    const auto shared = static_cast<std::size_t>(std::floor(spec.overlap * static_cast<double>(n)));
    for (std::size_t k = 0; k < shared; ++k) {
      const std::size_t i = order[k];
      std::size_t second = rng.below(g_count - 1);
      if (second >= concepts_of[i][0]) ++second;
      concepts_of[i].push_back(second);
      std::sort(concepts_of[i].begin(), concepts_of[i].end());
    }
  }

  // p(i | g): members of g weighted by a random popularity rank.
  std::vector<std::vector<std::pair<std::size_t, double>>> block(g_count);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t g : concepts_of[i]) block[g].push_back({i, 0.0});
  for (auto& members : block) {
    auto ranks = iota_indices(members.size());
    rng.shuffle(ranks);
    double total = 0.0;
    for (std::size_t m = 0; m < members.size(); ++m) {
      members[m].second = std::pow(static_cast<double>(ranks[m] + 1), -spec.zipf);
      total += members[m].second;
    }
    for (auto& m : members) m.second /= total;
  }

  const int item_width = detail::digits(n - 1) < 4 ? 4 : detail::digits(n - 1);
  const int user_width = detail::digits(spec.num_users - 1) < 5 ? 5 : detail::digits(spec.num_users - 1);
  std::vector<RawRecord> records;
  records.reserve(spec.num_users * spec.max_interactions_per_user());
  std::vector<double> weights(n);
  std::vector<std::size_t> picked;
  for (std::size_t u = 0; u < spec.num_users; ++u) {
    const auto theta = rng.dirichlet(spec.concentration, g_count);
    const std::size_t span = spec.max_interactions_per_user() - spec.min_interactions_per_user + 1;
    const std::size_t count = spec.min_interactions_per_user + (span > 1 ? rng.below(span) : 0);
    std::fill(weights.begin(), weights.end(), 0.0);
    for (std::size_t g = 0; g < g_count; ++g)
      for (const auto& [i, p] : block[g]) weights[i] += theta[g] * p;
    picked.clear();
    for (std::size_t draw = 0; draw < count; ++draw) {
      double total = 0.0;
      for (double w : weights) total += w;
      std::size_t chosen = n;
      if (total > 0.0) {
        double target = rng.uniform() * total;
        for (std::size_t i = 0; i < n; ++i) {
          if (weights[i] <= 0.0) continue;
          chosen = i;
          target -= weights[i];
          if (target < 0.0) break;
        }
      } else {
        // mixture mass exhausted: uniform over the remaining items
        std::size_t remaining = rng.below(n - picked.size());
        for (std::size_t i = 0; i < n; ++i) {
          if (std::find(picked.begin(), picked.end(), i) != picked.end()) continue;
          if (remaining-- == 0) {
            chosen = i;
            break;
          }
        }
      }
      picked.push_back(chosen);
      weights[chosen] = 0.0;
    }
    std::sort(picked.begin(), picked.end());
    const std::string user = detail::padded_id('u', u, user_width);
    for (std::size_t i : picked) records.push_back({user, detail::padded_id('i', i, item_width), 1.0});
  }

  SyntheticCorpus corpus;
  corpus.x = binarize_threshold(records, 1.0);
  for (std::size_t g = 0; g < g_count; ++g) corpus.concepts.push_back(concept_name(g));

  const std::size_t n_live = corpus.x.num_items();
  corpus.item_concepts.resize(n_live);
  corpus.titles.resize(n_live);
  for (std::size_t i = 0; i < n; ++i) {
    const std::string id = detail::padded_id('i', i, item_width);
    const auto live = corpus.x.items.find(id);
    // tag counts are drawn for every generated item so the stream does not
    // depend on which items were sampled
    for (std::size_t c = 0; c < concepts_of[i].size(); ++c) {
      const std::size_t g = concepts_of[i][c];
      const bool primary = g == i / spec.items_per_concept;
      const std::size_t reps = 1 + rng.below(primary ? 5 : 3);
      if (!live) continue;
      for (std::size_t r = 0; r < reps; ++r) corpus.raw_tags.push_back({id, corpus.concepts[g]});
    }
    if (!live) continue;
    corpus.item_concepts[*live] = concepts_of[i];
    corpus.titles[*live] = corpus.concepts[i / spec.items_per_concept] + " #" + std::to_string(i);
  }
  corpus.tags = build_tag_table(corpus.raw_tags, corpus.x, 1.0);
  return corpus;
}

// Ground truth keyed by external item id.
inline Json truth_to_json(const SyntheticCorpus& corpus) {
  Json items = Json::object();
  for (std::size_t i = 0; i < corpus.item_concepts.size(); ++i)
    items[corpus.x.items.id(i)] = corpus.item_concepts[i];
  return {{"concepts", corpus.concepts}, {"item_concepts", items}};
}

struct SyntheticTruth {
  std::vector<std::string> concepts;
  std::vector<std::vector<std::size_t>> item_concepts;  // by item index

  bool carries(std::size_t item, std::size_t concept_index) const {
    const auto& c = item_concepts[item];
    return std::find(c.begin(), c.end(), concept_index) != c.end();
  }
};

inline SyntheticTruth truth_from_corpus(const SyntheticCorpus& corpus) {
  return {corpus.concepts, corpus.item_concepts};
}

inline SyntheticTruth truth_from_json(const Json& j, const InteractionMatrix& x) {
  SyntheticTruth truth;
  try {
    truth.concepts = j.at("concepts").get<std::vector<std::string>>();
    truth.item_concepts.resize(x.num_items());
    for (const auto& [id, cs] : j.at("item_concepts").items()) {
      const auto i = x.items.find(id);
      if (!i) continue;
      truth.item_concepts[*i] = cs.get<std::vector<std::size_t>>();
    }
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::format, std::string("truth file: ") + e.what());
  }
  return truth;
}

}  // namespace knobs
