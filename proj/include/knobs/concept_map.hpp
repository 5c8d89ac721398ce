#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "knobs/corpus.hpp"
#include "knobs/json_util.hpp"
#include "knobs/nested.hpp"
#include "knobs/sae.hpp"

namespace knobs {

// Row i = E_s(E_c(onehot(i))): the sparse code of every single item.
inline SparseRowMatrix item_codes(const Cfae& cfae, const SaeModel& sae) {
  check_compatible(cfae, sae);
  const std::size_t n = cfae_items(cfae);
  std::vector<Eigen::Triplet<double>> triplets;
  for (std::size_t i = 0; i < n; ++i) {
    const index_t item = static_cast<index_t>(i);
    const SparseCode code = sae.encode(cfae_encode(cfae, std::span<const index_t>(&item, 1)));
    for (const auto& e : code.entries)
      triplets.emplace_back(static_cast<int>(i), static_cast<int>(e.neuron), e.value);
  }
  SparseRowMatrix z(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(sae.width()));
  z.setFromTriplets(triplets.begin(), triplets.end());
  return z;
}

// M = P Z with P the |T| x n joint tag-item distribution.
inline RowMatrix tag_activation_matrix(const TagTable& tags, const SparseRowMatrix& codes) {
  if (static_cast<std::size_t>(codes.rows()) != tags.num_items)
    throw Error(ErrorCode::incompatible_dims, "item code rows do not match the tag table items");
  const SparseRowMatrix product = tags.joint() * codes;
  return RowMatrix(product);
}

enum class TfidfOrientation { tags_as_terms, neurons_as_terms };

inline constexpr const char* kTfidfVariant =
    "tf=mass/doc_total;idf=ln(N_live_docs/(1+df))+1;clamp>=0";

namespace detail {

// Rows are terms, columns are documents. Dead (all-zero) documents score 0
// and are not counted in N.
inline RowMatrix tfidf_columns_as_documents(const RowMatrix& m) {
  const Eigen::VectorXd doc_mass = m.colwise().sum().transpose();
  double live_docs = 0.0;
  for (Eigen::Index c = 0; c < doc_mass.size(); ++c) live_docs += doc_mass[c] > 0.0 ? 1.0 : 0.0;
  RowMatrix out = RowMatrix::Zero(m.rows(), m.cols());
  if (live_docs == 0.0) return out;
  for (Eigen::Index t = 0; t < m.rows(); ++t) {
    double df = 0.0;
    for (Eigen::Index c = 0; c < m.cols(); ++c) df += m(t, c) > 0.0 ? 1.0 : 0.0;
    if (df == 0.0) continue;
    const double idf = std::log(live_docs / (1.0 + df)) + 1.0;
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (m(t, c) > 0.0) out(t, c) = std::max(0.0, m(t, c) / doc_mass[c] * idf);
    }
  }
  return out;
}

}  // namespace detail

// TF-IDF of the |T| x d tag-activation matrix; output keeps that shape.
inline RowMatrix tfidf(const RowMatrix& m, TfidfOrientation orientation) {
  if (orientation == TfidfOrientation::tags_as_terms) return detail::tfidf_columns_as_documents(m);
  const RowMatrix transposed = m.transpose();
  return detail::tfidf_columns_as_documents(transposed).transpose();
}

struct OverlapEntry {
  std::size_t key = 0;                 // the shared counterpart
  std::vector<std::size_t> selectors;  // who picked it
};

struct OverlapReport {
  std::size_t distinct_unique_neurons = 0;
  std::size_t distinct_representative_neurons = 0;
  std::size_t distinct_distinctive_tags = 0;
  std::size_t distinct_characteristic_tags = 0;
  std::vector<OverlapEntry> shared_unique_neurons;
  std::vector<OverlapEntry> shared_representative_neurons;
  std::vector<OverlapEntry> shared_distinctive_tags;
};

struct ArgmaxMaps {
  std::vector<std::optional<std::size_t>> unique_neuron_for_tag;
  std::vector<std::optional<std::size_t>> representative_neuron_for_tag;
  std::vector<std::optional<std::size_t>> characteristic_tag_for_neuron;
  std::vector<std::optional<std::size_t>> distinctive_tag_for_neuron;
  OverlapReport overlap;
};

namespace detail {

inline std::optional<std::size_t> argmax_row(const RowMatrix& s, Eigen::Index r) {
  std::optional<std::size_t> best;
  double best_v = 0.0;
  for (Eigen::Index c = 0; c < s.cols(); ++c) {
    if (s(r, c) > best_v) {
      best_v = s(r, c);
      best = static_cast<std::size_t>(c);
    }
  }
  return best;
}

inline std::optional<std::size_t> argmax_col(const RowMatrix& s, Eigen::Index c) {
  std::optional<std::size_t> best;
  double best_v = 0.0;
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    if (s(r, c) > best_v) {
      best_v = s(r, c);
      best = static_cast<std::size_t>(r);
    }
  }
  return best;
}

inline std::pair<std::size_t, std::vector<OverlapEntry>> collect_overlap(
    const std::vector<std::optional<std::size_t>>& map) {
  std::map<std::size_t, std::vector<std::size_t>> by_target;
  for (std::size_t k = 0; k < map.size(); ++k)
    if (map[k]) by_target[*map[k]].push_back(k);
  std::vector<OverlapEntry> shared;
  for (auto& [target, selectors] : by_target)
    if (selectors.size() > 1) shared.push_back({target, std::move(selectors)});
  return {by_target.size(), std::move(shared)};
}

}  // namespace detail

// Four argmax maps over strictly positive scores (ties -> lowest index).
// Tags or neurons whose scores are all zero are left unmapped.
inline ArgmaxMaps build_argmax_maps(const RowMatrix& tags_to_neurons,
                                    const RowMatrix& neurons_to_tags) {
  ArgmaxMaps maps;
  const auto n_tags = tags_to_neurons.rows();
  const auto n_neurons = tags_to_neurons.cols();
  for (Eigen::Index t = 0; t < n_tags; ++t) {
    maps.unique_neuron_for_tag.push_back(detail::argmax_row(tags_to_neurons, t));
    maps.representative_neuron_for_tag.push_back(detail::argmax_row(neurons_to_tags, t));
  }
  for (Eigen::Index n = 0; n < n_neurons; ++n) {
    maps.characteristic_tag_for_neuron.push_back(detail::argmax_col(tags_to_neurons, n));
    maps.distinctive_tag_for_neuron.push_back(detail::argmax_col(neurons_to_tags, n));
  }
  auto [du, su] = detail::collect_overlap(maps.unique_neuron_for_tag);
  auto [dr, sr] = detail::collect_overlap(maps.representative_neuron_for_tag);
  auto [dd, sd] = detail::collect_overlap(maps.distinctive_tag_for_neuron);
  maps.overlap.distinct_unique_neurons = du;
  maps.overlap.shared_unique_neurons = std::move(su);
  maps.overlap.distinct_representative_neurons = dr;
  maps.overlap.shared_representative_neurons = std::move(sr);
  maps.overlap.distinct_distinctive_tags = dd;
  maps.overlap.shared_distinctive_tags = std::move(sd);
  maps.overlap.distinct_characteristic_tags =
      detail::collect_overlap(maps.characteristic_tag_for_neuron).first;
  return maps;
}

struct ConceptNeuronMap {
  std::vector<std::string> tag_names;
  SparseRowMatrix item_codes;  // n x d
  RowMatrix activation;        // M, |T| x d
  RowMatrix tags_to_neurons;   // M_{t->n}
  RowMatrix neurons_to_tags;   // M_{n->t}
  std::vector<bool> live_neurons;
  std::vector<bool> live_tags;
  ArgmaxMaps maps;

  std::size_t width() const { return static_cast<std::size_t>(activation.cols()); }
  std::size_t inactive_neurons() const {
    return static_cast<std::size_t>(std::count(live_neurons.begin(), live_neurons.end(), false));
  }
};

inline ConceptNeuronMap build_concept_map(const Cfae& cfae, const SaeModel& sae,
                                          const TagTable& tags) {
  ConceptNeuronMap map;
  map.tag_names = tags.tags;
  map.item_codes = item_codes(cfae, sae);
  map.activation = tag_activation_matrix(tags, map.item_codes);
  map.tags_to_neurons = tfidf(map.activation, TfidfOrientation::tags_as_terms);
  map.neurons_to_tags = tfidf(map.activation, TfidfOrientation::neurons_as_terms);
  const Eigen::VectorXd col_mass = map.activation.colwise().sum().transpose();
  const Eigen::VectorXd row_mass = map.activation.rowwise().sum();
  for (Eigen::Index c = 0; c < col_mass.size(); ++c) map.live_neurons.push_back(col_mass[c] > 0.0);
  for (Eigen::Index r = 0; r < row_mass.size(); ++r) map.live_tags.push_back(row_mass[r] > 0.0);
  map.maps = build_argmax_maps(map.tags_to_neurons, map.neurons_to_tags);
  return map;
}

// ---------------------------------------------------------------------------
// Serializable labels (what the service and steering sweeps consume)
// ---------------------------------------------------------------------------

struct TagScore {
  std::string tag;
  double score = 0.0;
};

struct NeuronLabel {
  std::size_t neuron = 0;
  std::vector<TagScore> top_tags;
  std::string distinctive_tag;
};

struct TagLabel {
  std::string tag;
  std::size_t unique_neuron = 0;
  std::size_t representative_neuron = 0;
};

enum class NeuronMapping { representative, unique };

inline NeuronMapping parse_mapping(const std::string& s) {
  if (s == "representative") return NeuronMapping::representative;
  if (s == "unique") return NeuronMapping::unique;
  throw Error(ErrorCode::config, "unknown mapping '" + s + "'");
}

inline std::string to_string(NeuronMapping m) {
  return m == NeuronMapping::representative ? "representative" : "unique";
}

struct ConceptLabels {
  std::size_t width = 0;
  std::string tfidf_variant = kTfidfVariant;
  std::vector<NeuronLabel> neurons;  // ascending neuron
  std::vector<TagLabel> tags;        // ascending tag string

  const TagLabel* find_tag(const std::string& tag) const {
    const auto it = std::lower_bound(tags.begin(), tags.end(), tag,
                                     [](const TagLabel& l, const std::string& s) { return l.tag < s; });
    return it != tags.end() && it->tag == tag ? &*it : nullptr;
  }

  std::optional<std::size_t> neuron_for(const std::string& tag, NeuronMapping mapping) const {
    const auto* label = find_tag(tag);
    if (label == nullptr) return std::nullopt;
    return mapping == NeuronMapping::representative ? label->representative_neuron
                                                    : label->unique_neuron;
  }

  const NeuronLabel* find_neuron(std::size_t neuron) const {
    const auto it =
        std::lower_bound(neurons.begin(), neurons.end(), neuron,
                         [](const NeuronLabel& l, std::size_t n) { return l.neuron < n; });
    return it != neurons.end() && it->neuron == neuron ? &*it : nullptr;
  }
};

// Labels for every live neuron (top tags by M_{t->n}) and every mapped tag.
inline ConceptLabels make_labels(const ConceptNeuronMap& map, std::size_t top_tags = 5) {
  ConceptLabels labels;
  labels.width = map.width();
  for (std::size_t n = 0; n < map.width(); ++n) {
    if (!map.live_neurons[n]) continue;
    NeuronLabel label;
    label.neuron = n;
    std::vector<std::size_t> order;
    for (Eigen::Index t = 0; t < map.tags_to_neurons.rows(); ++t)
      if (map.tags_to_neurons(t, static_cast<Eigen::Index>(n)) > 0.0)
        order.push_back(static_cast<std::size_t>(t));
    const auto col = static_cast<Eigen::Index>(n);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return map.tags_to_neurons(static_cast<Eigen::Index>(a), col) >
             map.tags_to_neurons(static_cast<Eigen::Index>(b), col);
    });
    if (order.size() > top_tags) order.resize(top_tags);
    for (std::size_t t : order)
      label.top_tags.push_back(
          {map.tag_names[t], map.tags_to_neurons(static_cast<Eigen::Index>(t), col)});
    if (const auto d = map.maps.distinctive_tag_for_neuron[n]) label.distinctive_tag = map.tag_names[*d];
    labels.neurons.push_back(std::move(label));
  }
  for (std::size_t t = 0; t < map.tag_names.size(); ++t) {
    const auto u = map.maps.unique_neuron_for_tag[t];
    const auto r = map.maps.representative_neuron_for_tag[t];
    if (!u || !r) continue;
    labels.tags.push_back({map.tag_names[t], *u, *r});
  }
  std::sort(labels.tags.begin(), labels.tags.end(),
            [](const TagLabel& a, const TagLabel& b) { return a.tag < b.tag; });
  return labels;
}

inline Json labels_to_json(const ConceptLabels& labels) {
  Json neurons = Json::array();
  for (const auto& n : labels.neurons) {
    Json top = Json::array();
    for (const auto& t : n.top_tags) top.push_back({{"tag", t.tag}, {"score", round_sig9(t.score)}});
    neurons.push_back({{"id", n.neuron}, {"top_tags", top}, {"distinctive_tag", n.distinctive_tag}});
  }
  Json tags = Json::array();
  for (const auto& t : labels.tags)
    tags.push_back({{"tag", t.tag},
                    {"unique_neuron", t.unique_neuron},
                    {"representative_neuron", t.representative_neuron}});
  return {{"neurons", neurons},
          {"tags", tags},
          {"tfidf_variant", labels.tfidf_variant},
          {"log_base", 2},
          {"d", labels.width}};
}

inline ConceptLabels labels_from_json(const Json& j) {
  ConceptLabels labels;
  try {
    labels.width = j.at("d").get<std::size_t>();
    labels.tfidf_variant = j.at("tfidf_variant").get<std::string>();
    for (const auto& n : j.at("neurons")) {
      NeuronLabel label;
      label.neuron = n.at("id").get<std::size_t>();
      label.distinctive_tag = n.at("distinctive_tag").get<std::string>();
      for (const auto& t : n.at("top_tags"))
        label.top_tags.push_back({t.at("tag").get<std::string>(), t.at("score").get<double>()});
      labels.neurons.push_back(std::move(label));
    }
    for (const auto& t : j.at("tags"))
      labels.tags.push_back({t.at("tag").get<std::string>(), t.at("unique_neuron").get<std::size_t>(),
                             t.at("representative_neuron").get<std::size_t>()});
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::format, std::string("concept map: ") + e.what());
  }
  std::sort(labels.neurons.begin(), labels.neurons.end(),
            [](const NeuronLabel& a, const NeuronLabel& b) { return a.neuron < b.neuron; });
  std::sort(labels.tags.begin(), labels.tags.end(),
            [](const TagLabel& a, const TagLabel& b) { return a.tag < b.tag; });
  return labels;
}

inline Json overlap_to_json(const OverlapReport& r, const std::vector<std::string>& tag_names) {
  const auto entries = [&](const std::vector<OverlapEntry>& v, bool key_is_tag) {
    Json out = Json::array();
    for (const auto& e : v) {
      Json sel = Json::array();
      for (auto s : e.selectors) key_is_tag ? sel.push_back(s) : sel.push_back(tag_names[s]);
      if (key_is_tag)
        out.push_back({{"tag", tag_names[e.key]}, {"neurons", sel}});
      else
        out.push_back({{"neuron", e.key}, {"tags", sel}});
    }
    return out;
  };
  return {{"distinct_unique_neurons", r.distinct_unique_neurons},
          {"distinct_representative_neurons", r.distinct_representative_neurons},
          {"distinct_distinctive_tags", r.distinct_distinctive_tags},
          {"distinct_characteristic_tags", r.distinct_characteristic_tags},
          {"shared_unique_neurons", entries(r.shared_unique_neurons, false)},
          {"shared_representative_neurons", entries(r.shared_representative_neurons, false)},
          {"shared_distinctive_tags", entries(r.shared_distinctive_tags, true)}};
}

// ---------------------------------------------------------------------------
// Selectivity (entropy and KL divergence, in bits)
// ---------------------------------------------------------------------------

inline constexpr double kSelectivitySmoothing = 1e-10;

struct RowSelectivity {
  std::string key;
  double entropy_bits = 0.0;
  double kl_bits = 0.0;
  double rel_entropy_decrease = 0.0;
};

struct SideSelectivity {
  std::vector<RowSelectivity> rows;
  double baseline_entropy_bits = 0.0;
  std::size_t excluded_rows = 0;
};

struct SelectivityReport {
  SideSelectivity tags;     // rows of M_{t->n} over live neurons
  SideSelectivity neurons;  // neuron rows of M_{n->t} over live tags
};

inline double entropy_bits(const Eigen::VectorXd& q) {
  double h = 0.0;
  for (Eigen::Index j = 0; j < q.size(); ++j)
    if (q[j] > 0.0) h -= q[j] * std::log2(q[j]);
  return h;
}

// D_KL(p || q) in bits.
inline double kl_bits(const Eigen::VectorXd& p, const Eigen::VectorXd& q) {
  double d = 0.0;
  for (Eigen::Index j = 0; j < p.size(); ++j)
    if (p[j] > 0.0) d += p[j] * std::log2(p[j] / q[j]);
  return d;
}

// L1-normalize, add epsilon, renormalize.
inline Eigen::VectorXd smoothed_distribution(const Eigen::VectorXd& row) {
  Eigen::VectorXd q = row / row.sum();
  q.array() += kSelectivitySmoothing;
  return q / q.sum();
}

// Each row is compared against the mean of all normalized rows:
// D_KL(avg || row) and (H_avg - H_row) / H_avg.
inline SideSelectivity row_selectivity(const RowMatrix& rows, const std::vector<std::string>& keys) {
  SideSelectivity side;
  std::vector<Eigen::VectorXd> dists;
  std::vector<std::size_t> kept;
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    const Eigen::VectorXd row = rows.row(r).transpose();
    if (!(row.sum() > 0.0)) {
      ++side.excluded_rows;
      continue;
    }
    dists.push_back(smoothed_distribution(row));
    kept.push_back(static_cast<std::size_t>(r));
  }
  if (dists.empty()) return side;
  Eigen::VectorXd avg = Eigen::VectorXd::Zero(rows.cols());
  for (const auto& q : dists) avg += q;
  avg /= static_cast<double>(dists.size());
  side.baseline_entropy_bits = entropy_bits(avg);
  for (std::size_t k = 0; k < dists.size(); ++k) {
    RowSelectivity s;
    s.key = keys[kept[k]];
    s.entropy_bits = entropy_bits(dists[k]);
    s.kl_bits = kl_bits(avg, dists[k]);
    s.rel_entropy_decrease = side.baseline_entropy_bits > 0.0
                                 ? (side.baseline_entropy_bits - s.entropy_bits) /
                                       side.baseline_entropy_bits
                                 : 0.0;
    side.rows.push_back(std::move(s));
  }
  return side;
}

namespace detail {

inline RowMatrix select_columns(const RowMatrix& m, const std::vector<bool>& keep) {
  std::vector<Eigen::Index> cols;
  for (std::size_t c = 0; c < keep.size(); ++c)
    if (keep[c]) cols.push_back(static_cast<Eigen::Index>(c));
  RowMatrix out(m.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t k = 0; k < cols.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = m.col(cols[k]);
  return out;
}

}  // namespace detail

inline SelectivityReport selectivity(const RowMatrix& tags_to_neurons,
                                     const RowMatrix& neurons_to_tags,
                                     const std::vector<std::string>& tag_names) {
  std::vector<bool> live_neurons(static_cast<std::size_t>(tags_to_neurons.cols()));
  for (Eigen::Index c = 0; c < tags_to_neurons.cols(); ++c)
    live_neurons[static_cast<std::size_t>(c)] = tags_to_neurons.col(c).sum() > 0.0;
  std::vector<bool> live_tags(static_cast<std::size_t>(neurons_to_tags.rows()));
  for (Eigen::Index r = 0; r < neurons_to_tags.rows(); ++r)
    live_tags[static_cast<std::size_t>(r)] = neurons_to_tags.row(r).sum() > 0.0;

  SelectivityReport report;
  report.tags = row_selectivity(detail::select_columns(tags_to_neurons, live_neurons), tag_names);
  const RowMatrix neuron_rows = neurons_to_tags.transpose();
  std::vector<std::string> neuron_keys;
  for (Eigen::Index n = 0; n < neuron_rows.rows(); ++n) neuron_keys.push_back(std::to_string(n));
  report.neurons = row_selectivity(detail::select_columns(neuron_rows, live_tags), neuron_keys);
  return report;
}

inline void write_selectivity_csv(std::ostream& out, const SelectivityReport& report) {
  out << "side,key,entropy_bits,kl_bits,rel_entropy_decrease\n";
  const auto emit = [&](const char* side, const SideSelectivity& s) {
    for (const auto& r : s.rows) {
      std::string key = r.key;
      if (key.find_first_of(",\"") != std::string::npos) {
        std::string quoted = "\"";
        for (char c : key) quoted += c == '"' ? std::string("\"\"") : std::string(1, c);
        key = quoted + "\"";
      }
      char buf[128];
      std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g", r.entropy_bits, r.kl_bits,
                    r.rel_entropy_decrease);
      out << side << ',' << key << ',' << buf << '\n';
    }
  };
  emit("tag", report.tags);
  emit("neuron", report.neurons);
}

}  // namespace knobs
