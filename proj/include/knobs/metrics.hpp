#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "knobs/types.hpp"

namespace knobs {

struct ScoredItem {
  index_t item = 0;
  double score = 0.0;

  friend bool operator==(const ScoredItem&, const ScoredItem&) = default;
};

// Top-n by score, ties to the lower item index. Items in `exclude` (sorted)
// are skipped.
inline std::vector<ScoredItem> top_n(const Vector& scores, std::size_t n,
                                     std::span<const index_t> exclude = {}) {
  std::vector<index_t> candidates;
  candidates.reserve(static_cast<std::size_t>(scores.size()));
  auto skip = exclude.begin();
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    while (skip != exclude.end() && *skip < i) ++skip;
    if (skip != exclude.end() && *skip == i) continue;
    candidates.push_back(static_cast<index_t>(i));
  }
  const auto better = [&](index_t a, index_t b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
  };
  const std::size_t keep = std::min(n, candidates.size());
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep),
                    candidates.end(), better);
  std::vector<ScoredItem> out;
  out.reserve(keep);
  for (std::size_t r = 0; r < keep; ++r) out.push_back({candidates[r], scores[candidates[r]]});
  return out;
}

inline bool contains_sorted(std::span<const index_t> sorted, index_t item) {
  return std::binary_search(sorted.begin(), sorted.end(), item);
}

// |top[0..n) ∩ targets| / min(n, |targets|); nullopt when targets is empty.
inline std::optional<double> recall_at_n(std::span<const index_t> ranked,
                                         std::span<const index_t> targets, std::size_t n) {
  if (targets.empty() || n == 0) return std::nullopt;
  std::size_t hits = 0;
  const std::size_t depth = std::min(n, ranked.size());
  for (std::size_t r = 0; r < depth; ++r) hits += contains_sorted(targets, ranked[r]) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(std::min(n, targets.size()));
}

// Binary-relevance nDCG with gains 1 / log2(rank + 2), ranks from 0.
inline std::optional<double> ndcg_at_n(std::span<const index_t> ranked,
                                       std::span<const index_t> targets, std::size_t n) {
  if (targets.empty() || n == 0) return std::nullopt;
  double dcg = 0.0;
  const std::size_t depth = std::min(n, ranked.size());
  for (std::size_t r = 0; r < depth; ++r)
    if (contains_sorted(targets, ranked[r])) dcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  double idcg = 0.0;
  const std::size_t ideal = std::min(n, targets.size());
  for (std::size_t r = 0; r < ideal; ++r) idcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  return dcg / idcg;
}

// Fraction of the top-n that falls inside the segment, over n.
inline double segment_precision_at_n(std::span<const index_t> ranked,
                                     std::span<const index_t> segment, std::size_t n) {
  std::size_t hits = 0;
  const std::size_t depth = std::min(n, ranked.size());
  for (std::size_t r = 0; r < depth; ++r) hits += contains_sorted(segment, ranked[r]) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(n);
}

inline std::vector<index_t> item_ids(std::span<const ScoredItem> ranked) {
  std::vector<index_t> out;
  out.reserve(ranked.size());
  for (const auto& r : ranked) out.push_back(r.item);
  return out;
}

// Mean with standard error of the mean, accumulated in insertion order.
class MeanAccumulator {
 public:
  void add(double v) { values_.push_back(v); }
  std::size_t count() const { return values_.size(); }

  double mean() const {
    if (values_.empty()) return 0.0;
    double s = 0.0;
    for (double v : values_) s += v;
    return s / static_cast<double>(values_.size());
  }

  double standard_error() const {
    if (values_.size() < 2) return 0.0;
    const double m = mean();
    double ss = 0.0;
    for (double v : values_) ss += (v - m) * (v - m);
    const auto n = static_cast<double>(values_.size());
    return std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  }

 private:
  std::vector<double> values_;
};

struct MeanStat {
  double mean = 0.0;
  double sem = 0.0;
  std::size_t count = 0;

  static MeanStat from(const MeanAccumulator& acc) {
    return {acc.mean(), acc.standard_error(), acc.count()};
  }
};

// nested / base * 100; zero base yields zero.
inline double recovered_pct(double nested, double base) {
  return base > 0.0 ? 100.0 * nested / base : 0.0;
}

inline double cosine_similarity(const Vector& a, const Vector& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

}  // namespace knobs
