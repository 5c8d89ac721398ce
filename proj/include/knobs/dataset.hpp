#pragma once

#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "knobs/corpus.hpp"
#include "knobs/json_util.hpp"
#include "knobs/synthetic.hpp"

namespace knobs {

// A prepared dataset directory: items.tsv (catalog in index order),
// interactions.tsv, tags.tsv, split.json and, for synthetic corpora,
// truth.json. Reloading reproduces the user and item indexing exactly.
struct Dataset {
  InteractionMatrix x;
  TagTable tags;
  std::vector<std::string> titles;
  SplitSpec split;
  std::optional<SyntheticTruth> truth;
};

inline const char* const kDatasetFiles[] = {"items.tsv", "interactions.tsv", "tags.tsv", "split.json"};

inline void write_dataset(const std::filesystem::path& dir, const Dataset& d,
                          const std::optional<Json>& truth_json = std::nullopt) {
  std::ostringstream items;
  items << "item_id\ttitle\n";
  for (std::size_t i = 0; i < d.x.num_items(); ++i) items << d.x.items.id(i) << '\t' << d.titles[i] << '\n';
  write_text(dir / "items.tsv", items.str());
  std::ostringstream inter;
  write_interactions(inter, d.x);
  write_text(dir / "interactions.tsv", inter.str());
  std::ostringstream tags;
  write_tags(tags, d.tags, d.x);
  write_text(dir / "tags.tsv", tags.str());
  write_json(dir / "split.json", split_to_json(d.split));
  if (truth_json) write_json(dir / "truth.json", *truth_json);
}

inline InteractionMatrix load_indexed_interactions(const std::filesystem::path& dir) {
  InteractionMatrix x;
  auto catalog = detail::open_input(dir / "items.tsv");
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(catalog, line)) {
    ++line_no;
    detail::chomp(line);
    if (line_no == 1 || line.empty()) continue;
    const auto fields = detail::split_tabs(line);
    x.items.intern(std::string(fields[0]));
  }
  const auto records = load_interactions(dir / "interactions.tsv", RecordFormat::explicit_ratings);
  for (const auto& rec : records) {
    const auto item = x.items.find(rec.item);
    if (!item) throw Error(ErrorCode::format, "item '" + rec.item + "' is not in items.tsv");
    const std::size_t u = x.users.intern(rec.user);
    if (u == x.rows.size()) x.rows.emplace_back();
    x.rows[u].push_back(static_cast<index_t>(*item));
  }
  for (auto& r : x.rows) {
    std::sort(r.begin(), r.end());
    r.erase(std::unique(r.begin(), r.end()), r.end());
  }
  return x;
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  for (const char* name : kDatasetFiles)
    if (!std::filesystem::exists(dir / name))
      throw Error(ErrorCode::missing_input, "dataset is missing " + (dir / name).string());
  Dataset d;
  d.x = load_indexed_interactions(dir);
  d.tags = load_tags(dir / "tags.tsv", d.x, 1.0);
  d.titles = load_catalog(dir / "items.tsv", d.x);
  d.split = split_from_json(read_json(dir / "split.json"));
  for (const auto* part : {&d.split.train, &d.split.val, &d.split.test})
    for (std::size_t u : *part)
      if (u >= d.x.num_users()) throw Error(ErrorCode::format, "split references an unknown user");
  if (std::filesystem::exists(dir / "truth.json"))
    d.truth = truth_from_json(read_json(dir / "truth.json"), d.x);
  return d;
}

// Hash over the dataset files, used in run manifests and snapshot hashes.
inline std::string dataset_hash(const std::filesystem::path& dir) {
  std::string all;
  for (const char* name : kDatasetFiles) all += file_hash(dir / name);
  if (std::filesystem::exists(dir / "truth.json")) all += file_hash(dir / "truth.json");
  return fnv1a_hex(all);
}

}  // namespace knobs
