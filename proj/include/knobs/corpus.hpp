#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "knobs/error.hpp"
#include "knobs/rng.hpp"
#include "knobs/types.hpp"

namespace knobs {

// ---------------------------------------------------------------------------
// Raw records and TSV parsing
// ---------------------------------------------------------------------------

enum class RecordFormat { explicit_ratings, implicit };

struct RawRecord {
  std::string user;
  std::string item;
  double value = 1.0;
};

namespace detail {

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find('\t', start);
    if (pos == std::string_view::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

inline void chomp(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

inline std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::missing_input, "cannot open " + path.string());
  return in;
}

}  // namespace detail

// Reads `user_id<TAB>item_id<TAB>value` lines after a mandatory header row.
// Records keep file order; duplicates survive until binarization.
inline std::vector<RawRecord> parse_interactions(std::istream& in, RecordFormat format) {
  std::vector<RawRecord> records;
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    detail::chomp(line);
    if (!header_seen) {
      header_seen = true;
      continue;
    }
    if (line.empty()) continue;
    const auto fields = detail::split_tabs(line);
    const std::size_t needed = format == RecordFormat::explicit_ratings ? 3 : 2;
    if (fields.size() < needed || fields.size() > 3) {
      throw Error(ErrorCode::parse, "line " + std::to_string(line_no) + ": expected " +
                                        std::to_string(needed) + " tab-separated fields");
    }
    if (fields[0].empty() || fields[1].empty())
      throw Error(ErrorCode::parse, "line " + std::to_string(line_no) + ": empty id");
    RawRecord rec{std::string(fields[0]), std::string(fields[1]), 1.0};
    if (format == RecordFormat::explicit_ratings) {
      const auto text = fields[2];
      const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), rec.value);
      if (ec != std::errc() || ptr != text.data() + text.size())
        throw Error(ErrorCode::parse,
                    "line " + std::to_string(line_no) + ": bad value '" + std::string(text) + "'");
    }
    records.push_back(std::move(rec));
  }
  if (records.empty()) throw Error(ErrorCode::empty_corpus, "no interaction records");
  return records;
}

inline std::vector<RawRecord> load_interactions(const std::filesystem::path& path,
                                                RecordFormat format) {
  auto in = detail::open_input(path);
  return parse_interactions(in, format);
}

// ---------------------------------------------------------------------------
// Interaction matrix
// ---------------------------------------------------------------------------

// Bidirectional external id <-> dense index map, indices in first-seen order.
class IdIndex {
 public:
  std::size_t intern(const std::string& id) {
    const auto [it, inserted] = lookup_.try_emplace(id, ids_.size());
    if (inserted) ids_.push_back(id);
    return it->second;
  }

  std::optional<std::size_t> find(const std::string& id) const {
    const auto it = lookup_.find(id);
    if (it == lookup_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& id(std::size_t index) const { return ids_[index]; }
  std::size_t size() const { return ids_.size(); }
  const std::vector<std::string>& ids() const { return ids_; }

 private:
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::size_t> lookup_;
};

struct InteractionMatrix {
  // One ascending, duplicate-free item list per user.
  std::vector<std::vector<index_t>> rows;
  IdIndex users;
  IdIndex items;

  std::size_t num_users() const { return rows.size(); }
  std::size_t num_items() const { return items.size(); }

  std::size_t nnz() const {
    std::size_t total = 0;
    for (const auto& r : rows) total += r.size();
    return total;
  }

  double density() const {
    if (num_users() == 0 || num_items() == 0) return 0.0;
    return static_cast<double>(nnz()) /
           (static_cast<double>(num_users()) * static_cast<double>(num_items()));
  }

  std::vector<std::size_t> item_counts() const {
    std::vector<std::size_t> counts(num_items(), 0);
    for (const auto& r : rows)
      for (index_t i : r) ++counts[i];
    return counts;
  }

  // Rows of the given users, in the given order. Item indexing is shared.
  std::vector<std::vector<index_t>> select_rows(std::span<const std::size_t> user_ids) const {
    std::vector<std::vector<index_t>> out;
    out.reserve(user_ids.size());
    for (std::size_t u : user_ids) out.push_back(rows.at(u));
    return out;
  }
};

// Keeps records with value >= threshold as unit interactions, deduplicated.
inline InteractionMatrix binarize_threshold(std::span<const RawRecord> records, double threshold) {
  if (!std::isfinite(threshold)) throw Error(ErrorCode::config, "threshold must be finite");
  InteractionMatrix x;
  for (const auto& rec : records) {
    if (!(rec.value >= threshold)) continue;
    const std::size_t u = x.users.intern(rec.user);
    const std::size_t i = x.items.intern(rec.item);
    if (u == x.rows.size()) x.rows.emplace_back();
    x.rows[u].push_back(static_cast<index_t>(i));
  }
  for (auto& r : x.rows) {
    std::sort(r.begin(), r.end());
    r.erase(std::unique(r.begin(), r.end()), r.end());
  }
  return x;
}

// Item filter, then user filter, one pass each; survivors re-indexed densely
// in their original relative order. Items left without interactions after
// the user filter are dropped as well.
inline InteractionMatrix filter_min_activity(const InteractionMatrix& x,
                                             std::size_t min_item_interactions,
                                             std::size_t min_user_interactions) {
  const auto counts = x.item_counts();
  std::vector<bool> item_ok(x.num_items());
  for (std::size_t i = 0; i < counts.size(); ++i) item_ok[i] = counts[i] >= min_item_interactions;

  std::vector<std::vector<index_t>> kept_rows;
  std::vector<std::size_t> kept_users;
  for (std::size_t u = 0; u < x.num_users(); ++u) {
    std::vector<index_t> row;
    for (index_t i : x.rows[u])
      if (item_ok[i]) row.push_back(i);
    if (row.size() >= min_user_interactions && !row.empty()) {
      kept_rows.push_back(std::move(row));
      kept_users.push_back(u);
    }
  }
  if (kept_rows.empty()) throw Error(ErrorCode::empty_corpus, "activity filter removed every user");

  std::vector<bool> item_used(x.num_items(), false);
  for (const auto& r : kept_rows)
    for (index_t i : r) item_used[i] = true;
  std::vector<index_t> remap(x.num_items(), 0);
  InteractionMatrix out;
  for (std::size_t i = 0; i < x.num_items(); ++i) {
    if (item_used[i]) remap[i] = static_cast<index_t>(out.items.intern(x.items.id(i)));
  }
  for (std::size_t k = 0; k < kept_rows.size(); ++k) {
    out.users.intern(x.users.id(kept_users[k]));
    auto& row = kept_rows[k];
    for (auto& i : row) i = remap[i];
    out.rows.push_back(std::move(row));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct SplitSpec {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
  std::uint64_t seed = 0;
};

// User-disjoint train/val/test partition from one seeded shuffle.
inline SplitSpec split_strong_generalization(std::size_t num_users, double test_frac,
                                             double val_frac, std::uint64_t seed) {
  if (test_frac < 0.0 || val_frac < 0.0 || test_frac + val_frac >= 1.0)
    throw Error(ErrorCode::config, "split fractions must be >= 0 and sum below 1");
  auto order = iota_indices(num_users);
  Rng rng(seed);
  rng.shuffle(order);
  const auto m = static_cast<double>(num_users);
  const auto n_test = static_cast<std::size_t>(std::floor(m * test_frac));
  const auto n_val = static_cast<std::size_t>(std::floor(m * val_frac));
  if (n_test + n_val >= num_users) throw Error(ErrorCode::config, "split leaves no training users");
  SplitSpec split;
  split.seed = seed;
  split.test.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  split.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test),
                   order.begin() + static_cast<std::ptrdiff_t>(n_test + n_val));
  split.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test + n_val), order.end());
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

inline SplitSpec split_strong_generalization(const InteractionMatrix& x, double test_frac,
                                             double val_frac, std::uint64_t seed) {
  return split_strong_generalization(x.num_users(), test_frac, val_frac, seed);
}

inline nlohmann::json split_to_json(const SplitSpec& split) {
  return {{"seed", split.seed}, {"train", split.train}, {"val", split.val}, {"test", split.test}};
}

inline SplitSpec split_from_json(const nlohmann::json& j) {
  SplitSpec split;
  try {
    split.seed = j.at("seed").get<std::uint64_t>();
    split.train = j.at("train").get<std::vector<std::size_t>>();
    split.val = j.at("val").get<std::vector<std::size_t>>();
    split.test = j.at("test").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::format, std::string("split manifest: ") + e.what());
  }
  return split;
}

struct HoldoutPair {
  std::vector<index_t> input;
  std::vector<index_t> target;
};

struct HoldoutSet {
  std::map<std::size_t, HoldoutPair> users;
  // Users whose history was too short to form both sides.
  std::vector<std::size_t> skipped;
};

// Per-user seeded shuffle; target size max(1, floor(|history| * frac)).
// Each user's stream is derived from (seed, user) so the result does not
// depend on the order or membership of the requested user set.
inline HoldoutSet split_holdout_per_user(const InteractionMatrix& x,
                                         std::span<const std::size_t> users, double target_frac,
                                         std::uint64_t seed) {
  if (!(target_frac > 0.0 && target_frac < 1.0))
    throw Error(ErrorCode::config, "holdout fraction must lie in (0, 1)");
  HoldoutSet out;
  for (std::size_t u : users) {
    const auto& history = x.rows.at(u);
    if (history.size() < 2) {
      out.skipped.push_back(u);
      continue;
    }
    std::vector<index_t> shuffled = history;
    Rng rng(mix_seed(seed, u));
    rng.shuffle(shuffled);
    const auto n_target = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(static_cast<double>(history.size()) * target_frac)));
    HoldoutPair pair;
    pair.target.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(n_target));
    pair.input.assign(shuffled.begin() + static_cast<std::ptrdiff_t>(n_target), shuffled.end());
    std::sort(pair.target.begin(), pair.target.end());
    std::sort(pair.input.begin(), pair.input.end());
    out.users.emplace(u, std::move(pair));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tags
// ---------------------------------------------------------------------------

struct TagAssignment {
  std::size_t tag = 0;
  index_t item = 0;
  double count = 0.0;
};

// Filtered tag vocabulary (sorted) plus aggregated tag x item counts.
struct TagTable {
  std::vector<std::string> tags;
  // Sorted by (tag, item); one entry per pair.
  std::vector<TagAssignment> counts;
  double total = 0.0;
  std::size_t num_items = 0;

  std::size_t num_tags() const { return tags.size(); }

  std::optional<std::size_t> find(std::string_view tag) const {
    const auto it = std::lower_bound(tags.begin(), tags.end(), tag);
    if (it == tags.end() || *it != tag) return std::nullopt;
    return static_cast<std::size_t>(it - tags.begin());
  }

  double p_hat(const TagAssignment& a) const { return a.count / total; }

  // |T| x n matrix of the joint distribution p(t, i).
  SparseRowMatrix joint() const {
    std::vector<Eigen::Triplet<double>> triplets;
    triplets.reserve(counts.size());
    for (const auto& a : counts)
      triplets.emplace_back(static_cast<int>(a.tag), static_cast<int>(a.item), p_hat(a));
    SparseRowMatrix p(static_cast<Eigen::Index>(num_tags()), static_cast<Eigen::Index>(num_items));
    p.setFromTriplets(triplets.begin(), triplets.end());
    return p;
  }

  // Items carrying each tag (the tag's segment), ascending.
  std::vector<std::vector<index_t>> items_by_tag() const {
    std::vector<std::vector<index_t>> out(num_tags());
    for (const auto& a : counts) out[a.tag].push_back(a.item);
    return out;
  }

  // Tags on each item, ascending by tag index.
  std::vector<std::vector<std::size_t>> tags_by_item() const {
    std::vector<std::vector<std::size_t>> out(num_items);
    for (const auto& a : counts) out[a.item].push_back(a.tag);
    return out;
  }
};

inline std::string normalize_tag(std::string_view raw) {
  const auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
  std::size_t b = 0;
  std::size_t e = raw.size();
  while (b < e && is_space(static_cast<unsigned char>(raw[b]))) ++b;
  while (e > b && is_space(static_cast<unsigned char>(raw[e - 1]))) --e;
  std::string out(raw.substr(b, e - b));
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

struct RawTag {
  std::string item;
  std::string tag;
};

inline std::vector<RawTag> parse_tags(std::istream& in) {
  std::vector<RawTag> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    detail::chomp(line);
    if (line_no == 1 || line.empty()) continue;
    const auto fields = detail::split_tabs(line);
    if (fields.size() != 2)
      throw Error(ErrorCode::parse, "tags line " + std::to_string(line_no) + ": expected 2 fields");
    out.push_back({std::string(fields[0]), normalize_tag(fields[1])});
  }
  return out;
}

// Drops assignments to unknown items, then tags whose total count is below
// min_count, and normalizes the remaining counts into p(t, i).
inline TagTable build_tag_table(std::span<const RawTag> raw, const InteractionMatrix& x,
                                double min_count) {
  std::map<std::string, std::map<index_t, double>> agg;
  for (const auto& r : raw) {
    const auto item = x.items.find(r.item);
    if (!item || r.tag.empty()) continue;
    agg[r.tag][static_cast<index_t>(*item)] += 1.0;
  }
  TagTable table;
  table.num_items = x.num_items();
  for (const auto& [tag, per_item] : agg) {
    double tag_total = 0.0;
    for (const auto& [item, c] : per_item) tag_total += c;
    if (tag_total < min_count) continue;
    const std::size_t t = table.tags.size();
    table.tags.push_back(tag);
    for (const auto& [item, c] : per_item) {
      table.counts.push_back({t, item, c});
      table.total += c;
    }
  }
  if (table.tags.empty()) throw Error(ErrorCode::empty_tags, "no tags survive filtering");
  return table;
}

inline TagTable load_tags(const std::filesystem::path& path, const InteractionMatrix& x,
                          double min_count) {
  auto in = detail::open_input(path);
  const auto raw = parse_tags(in);
  return build_tag_table(raw, x, min_count);
}

// ---------------------------------------------------------------------------
// Writers and the optional catalog
// ---------------------------------------------------------------------------

// Rows are written in index order so that reloading reproduces the indexing.
inline void write_interactions(std::ostream& out, const InteractionMatrix& x) {
  out << "user_id\titem_id\tvalue\n";
  for (std::size_t u = 0; u < x.num_users(); ++u)
    for (index_t i : x.rows[u]) out << x.users.id(u) << '\t' << x.items.id(i) << "\t1\n";
}

// One line per unit of count, so that reloading rebuilds the same counts.
inline void write_tags(std::ostream& out, const TagTable& tags, const InteractionMatrix& x) {
  out << "item_id\ttag\n";
  for (const auto& a : tags.counts) {
    const auto reps = static_cast<std::size_t>(std::llround(a.count));
    for (std::size_t r = 0; r < reps; ++r) out << x.items.id(a.item) << '\t' << tags.tags[a.tag] << '\n';
  }
}

// Titles by item index; items missing from the catalog fall back to their id.
inline std::vector<std::string> load_catalog(const std::filesystem::path& path,
                                             const InteractionMatrix& x) {
  std::vector<std::string> titles = x.items.ids();
  if (path.empty() || !std::filesystem::exists(path)) return titles;
  auto in = detail::open_input(path);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    detail::chomp(line);
    if (line_no == 1 || line.empty()) continue;
    const auto fields = detail::split_tabs(line);
    if (fields.size() != 2) throw Error(ErrorCode::parse, "catalog line " + std::to_string(line_no));
    if (const auto i = x.items.find(std::string(fields[0]))) titles[*i] = std::string(fields[1]);
  }
  return titles;
}

}  // namespace knobs
