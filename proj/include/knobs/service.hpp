#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "knobs/concept_map.hpp"
#include "knobs/corpus.hpp"
#include "knobs/dataset.hpp"
#include "knobs/json_util.hpp"
#include "knobs/model_io.hpp"
#include "knobs/steering.hpp"

namespace knobs {

struct CorpusStats {
  std::size_t num_users = 0;
  std::size_t num_items = 0;
  std::size_t interactions = 0;
};

// Everything the service reads; never mutated after construction.
struct EngineSnapshot {
  Cfae cfae;
  SaeModel sae;
  ConceptLabels labels;
  std::vector<std::string> titles;  // by item index
  CorpusStats stats;
  std::string config_hash;

  void check() const {
    check_compatible(cfae, sae);
    if (labels.width != sae.width())
      throw Error(ErrorCode::incompatible_dims, "concept map width " + std::to_string(labels.width) +
                                                    " != SAE width " + std::to_string(sae.width()));
    if (titles.size() != cfae_items(cfae))
      throw Error(ErrorCode::incompatible_dims, "catalog size does not match the model's items");
  }
};

struct SnapshotPaths {
  std::filesystem::path cfae;
  std::filesystem::path sae;
  std::filesystem::path concept_map;
  std::filesystem::path data_dir;  // optional: titles and corpus stats
};

inline EngineSnapshot load_snapshot(const SnapshotPaths& paths) {
  for (const auto& p : {paths.cfae, paths.sae, paths.concept_map})
    if (!std::filesystem::exists(p)) throw Error(ErrorCode::missing_input, "missing " + p.string());
  EngineSnapshot s{load_cfae(paths.cfae), load_sae(paths.sae),
                   labels_from_json(read_json(paths.concept_map)), {}, {}, {}};
  std::string hashed = file_hash(paths.cfae) + file_hash(paths.sae) + file_hash(paths.concept_map);
  if (!paths.data_dir.empty()) {
    const Dataset d = load_dataset(paths.data_dir);
    s.titles = d.titles;
    s.stats = {d.x.num_users(), d.x.num_items(), d.x.nnz()};
    hashed += dataset_hash(paths.data_dir);
  }
  if (s.titles.empty()) {
    for (std::size_t i = 0; i < cfae_items(s.cfae); ++i) s.titles.push_back(std::to_string(i));
    s.stats.num_items = s.titles.size();
  }
  s.config_hash = fnv1a_hex(hashed);
  s.check();
  return s;
}

struct Response {
  int status = 200;
  std::string body;
};

using QueryParams = std::map<std::string, std::string>;

namespace detail {

inline Response json_response(const Json& j, int status = 200) { return {status, j.dump()}; }

inline Response error_response(int status, std::string_view code, const std::string& message) {
  return json_response({{"error", {{"code", code}, {"message", message}}}}, status);
}

inline int status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::parse:
    case ErrorCode::format: return 400;
    case ErrorCode::missing_input: return 404;
    default: return 422;
  }
}

// Thrown by request decoding: malformed bodies map to 400.
struct BadRequest {
  std::string message;
};

inline std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

inline std::optional<std::size_t> parse_limit(const QueryParams& q) {
  const auto it = q.find("limit");
  if (it == q.end()) return std::nullopt;
  const auto& v = it->second;
  if (v.empty() || !std::all_of(v.begin(), v.end(), [](unsigned char c) { return std::isdigit(c); }))
    throw BadRequest{"limit must be a nonnegative integer"};
  return std::stoull(v);
}

inline Json parse_body(const std::string& body) {
  Json j;
  try {
    j = Json::parse(body);
  } catch (const Json::parse_error& e) {
    throw BadRequest{std::string("malformed JSON: ") + e.what()};
  }
  if (!j.is_object()) throw BadRequest{"request body must be a JSON object"};
  return j;
}

inline std::vector<index_t> parse_history(const Json& body, std::size_t num_items) {
  std::vector<index_t> history;
  if (!body.contains("history")) return history;
  const auto& h = body.at("history");
  if (!h.is_array()) throw BadRequest{"history must be an array of item indices"};
  for (const auto& v : h) {
    if (!v.is_number_integer() || v.get<long long>() < 0)
      throw BadRequest{"history must be an array of item indices"};
    const auto i = v.get<unsigned long long>();
    if (i >= num_items)
      throw Error(ErrorCode::incompatible_dims, "history item " + std::to_string(i) +
                                                    " outside catalog of " + std::to_string(num_items));
    history.push_back(static_cast<index_t>(i));
  }
  return sorted_unique(history);
}

template <class T>
T optional_field(const Json& body, const char* key, T fallback) {
  if (!body.contains(key)) return fallback;
  try {
    return body.at(key).get<T>();
  } catch (const Json::exception&) {
    throw BadRequest{std::string("field '") + key + "' has the wrong type"};
  }
}

inline Json ranked_json(const EngineSnapshot& s, const std::vector<ScoredItem>& ranked) {
  Json out = Json::array();
  for (const auto& r : ranked)
    out.push_back({{"item", r.item}, {"title", s.titles[r.item]}, {"score", round_sig9(r.score)}});
  return out;
}

template <class Fn>
Response guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const BadRequest& e) {
    return error_response(400, "bad_request", e.message);
  } catch (const Error& e) {
    return error_response(status_for(e.code()), to_string(e.code()), e.what());
  }
}

}  // namespace detail

inline Response handle_health(const EngineSnapshot& s) {
  return detail::json_response({{"status", "ok"},
                                {"model", cfae_name(s.cfae)},
                                {"d_sparse", s.sae.width()},
                                {"config_hash", s.config_hash}});
}

inline Response handle_knobs(const EngineSnapshot& s, const QueryParams& q) {
  return detail::guarded([&] {
    const auto limit = detail::parse_limit(q);
    Json out = Json::array();
    for (const auto& n : s.labels.neurons) {
      if (limit && out.size() >= *limit) break;
      Json top = Json::array();
      for (const auto& t : n.top_tags) top.push_back({{"tag", t.tag}, {"score", round_sig9(t.score)}});
      out.push_back({{"neuron", n.neuron}, {"distinctive_tag", n.distinctive_tag}, {"top_tags", top}});
    }
    return detail::json_response(out);
  });
}

inline Response handle_tags(const EngineSnapshot& s, const QueryParams& q) {
  return detail::guarded([&] {
    const auto it = q.find("query");
    const std::string needle = detail::lower(it == q.end() ? "" : it->second);
    const auto limit = detail::parse_limit(q);
    Json out = Json::array();
    for (const auto& t : s.labels.tags) {
      if (limit && out.size() >= *limit) break;
      if (t.tag.find(needle) == std::string::npos) continue;
      out.push_back({{"tag", t.tag},
                     {"unique_neuron", t.unique_neuron},
                     {"representative_neuron", t.representative_neuron}});
    }
    return detail::json_response(out);
  });
}

inline Response handle_items(const EngineSnapshot& s, const QueryParams& q) {
  return detail::guarded([&] {
    const auto it = q.find("query");
    const std::string needle = detail::lower(it == q.end() ? "" : it->second);
    const auto limit = detail::parse_limit(q);
    Json out = Json::array();
    for (std::size_t i = 0; i < s.titles.size(); ++i) {
      if (limit && out.size() >= *limit) break;
      if (detail::lower(s.titles[i]).find(needle) == std::string::npos) continue;
      out.push_back({{"item", i}, {"title", s.titles[i]}});
    }
    return detail::json_response(out);
  });
}

// Boost weights are renormalized to sum 1; tag boosts resolve through the
// requested mapping. Empty boosts leave the recommendation unsteered.
// Shared by POST /recommend and the steer subcommand.
inline Json recommend_json(const EngineSnapshot& s, const Json& req) {
  const auto history = detail::parse_history(req, cfae_items(s.cfae));
  const double alpha = detail::optional_field<double>(req, "alpha", 0.0);
  const auto n = detail::optional_field<long long>(req, "n", 20);
  const bool mask_seen = detail::optional_field<bool>(req, "mask_seen", true);
  const bool include_baseline = detail::optional_field<bool>(req, "include_baseline", false);
  const auto mapping = parse_mapping(detail::optional_field<std::string>(req, "mapping", "representative"));
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorCode::config, "alpha must lie in [0, 1]");
  if (n < 1) throw Error(ErrorCode::config, "n must be >= 1");

  SteeringDirective directive;
  directive.alpha = alpha;
  double total = 0.0;
  if (req.contains("boosts")) {
    const auto& boosts = req.at("boosts");
    if (!boosts.is_array()) throw detail::BadRequest{"boosts must be an array"};
    for (const auto& b : boosts) {
      if (!b.is_object()) throw detail::BadRequest{"each boost must be an object"};
      const bool has_neuron = b.contains("neuron");
      const bool has_tag = b.contains("tag");
      if (has_neuron == has_tag)
        throw detail::BadRequest{"each boost needs exactly one of 'neuron' or 'tag'"};
      const double weight = detail::optional_field<double>(b, "weight", 1.0);
      if (!(weight >= 0.0)) throw Error(ErrorCode::config, "boost weights must be nonnegative");
      std::size_t neuron = 0;
      if (has_neuron) {
        const auto& v = b.at("neuron");
        if (!v.is_number_integer() || v.get<long long>() < 0)
          throw detail::BadRequest{"neuron must be a nonnegative integer"};
        neuron = v.get<std::size_t>();
        if (neuron >= s.sae.width())
          throw Error(ErrorCode::incompatible_dims, "neuron " + std::to_string(neuron) +
                                                        " outside sparse width " +
                                                        std::to_string(s.sae.width()));
      } else {
        const auto tag = normalize_tag(detail::optional_field<std::string>(b, "tag", ""));
        const auto mapped = s.labels.neuron_for(tag, mapping);
        if (!mapped) throw Error(ErrorCode::config, "unknown tag '" + tag + "'");
        neuron = *mapped;
      }
      directive.boosts.push_back({static_cast<index_t>(neuron), weight});
      total += weight;
    }
  }
  const bool steered = !directive.boosts.empty();
  if (steered) {
    if (!(total > 0.0)) throw Error(ErrorCode::config, "boost weights sum to zero");
    for (auto& b : directive.boosts) b.weight /= total;
  }
  const auto count = static_cast<std::size_t>(n);
  const auto ranked = recommend(s.cfae, &s.sae, history, steered ? &directive : nullptr, count, mask_seen);
  Json out = {{"items", detail::ranked_json(s, ranked)}};
  if (include_baseline)
    out["baseline"] = detail::ranked_json(s, recommend(s.cfae, &s.sae, history, nullptr, count, mask_seen));
  return out;
}

inline Response handle_recommend(const EngineSnapshot& s, const std::string& body) {
  return detail::guarded([&] { return detail::json_response(recommend_json(s, detail::parse_body(body))); });
}

inline Response handle_encode(const EngineSnapshot& s, const std::string& body) {
  return detail::guarded([&] {
    const Json req = detail::parse_body(body);
    const auto history = detail::parse_history(req, cfae_items(s.cfae));
    const SparseCode code = s.sae.encode(cfae_encode(s.cfae, history));
    Json out = Json::array();
    for (const auto& e : code.entries)
      out.push_back({{"neuron", e.neuron}, {"activation", round_sig9(e.value)}});
    return detail::json_response({{"code", out}});
  });
}

// Single entry point used by the HTTP layer and by tests.
inline Response dispatch(const EngineSnapshot& s, const std::string& method, const std::string& path,
                         const QueryParams& query, const std::string& body) {
  if (method == "GET") {
    if (path == "/health") return handle_health(s);
    if (path == "/knobs") return handle_knobs(s, query);
    if (path == "/tags") return handle_tags(s, query);
    if (path == "/items") return handle_items(s, query);
  } else if (method == "POST") {
    if (path == "/recommend") return handle_recommend(s, body);
    if (path == "/encode") return handle_encode(s, body);
  }
  return detail::error_response(404, "not_found", method + " " + path);
}

}  // namespace knobs
