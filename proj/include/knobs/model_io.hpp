#pragma once

#include <filesystem>
#include <string>

#include "knobs/container.hpp"
#include "knobs/nested.hpp"

namespace knobs {

namespace detail {

inline Json rounded(const std::vector<double>& values) {
  Json out = Json::array();
  for (double v : values) out.push_back(round_sig9(v));
  return out;
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& model) {
  auto p = model;
  p.replace_extension(".json");
  return p;
}

template <class T>
T meta_get(const Json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception&) {
    throw Error(ErrorCode::format, std::string("model metadata is missing '") + key + "'");
  }
}

}  // namespace detail

inline Json cfae_sidecar(const Cfae& cfae) {
  if (const auto* elsa = std::get_if<ElsaModel>(&cfae))
    return {{"model", "elsa"},
            {"r", elsa->dim()},
            {"n", elsa->num_items()},
            {"pooling", to_string(elsa->pooling())},
            {"seed", elsa->meta.seed}};
  const auto& vae = std::get<MultVaeModel>(cfae);
  return {{"model", "multvae"},
          {"d", vae.dim()},
          {"n", vae.num_items()},
          {"beta_cap", round_sig9(vae.beta_cap())},
          {"dropout", round_sig9(1.0 - vae.keep_prob())}};
}

inline Container cfae_container(const Cfae& cfae) {
  Container c;
  c.metadata = cfae_sidecar(cfae);
  if (const auto* elsa = std::get_if<ElsaModel>(&cfae)) {
    c.tensors.push_back(tensor_from("A", elsa->embeddings()));
    const auto& m = elsa->meta;
    c.metadata["training_meta"] = {{"epochs_run", m.epochs_run},
                                   {"best_epoch", m.best_epoch},
                                   {"initial_val_loss", round_sig9(m.initial_val_loss)},
                                   {"best_val_loss", round_sig9(m.best_val_loss)},
                                   {"loss_reduction", m.loss_reduction},
                                   {"val_history", detail::rounded(m.val_history)}};
    return c;
  }
  const auto& vae = std::get<MultVaeModel>(cfae);
  const auto& p = vae.params();
  c.tensors = {tensor_from("enc_w1", p.enc_w1), tensor_from("enc_b1", p.enc_b1),
               tensor_from("mu_w", p.mu_w),     tensor_from("mu_b", p.mu_b),
               tensor_from("lv_w", p.lv_w),     tensor_from("lv_b", p.lv_b),
               tensor_from("dec_w1", p.dec_w1), tensor_from("dec_b1", p.dec_b1),
               tensor_from("out_w", p.out_w),   tensor_from("out_b", p.out_b)};
  const auto& m = vae.meta;
  c.metadata["seed"] = m.seed;
  c.metadata["training_meta"] = {{"epochs_run", m.epochs_run},
                                 {"best_epoch", m.best_epoch},
                                 {"steps", m.steps},
                                 {"final_beta", round_sig9(m.final_beta)},
                                 {"best_val_nll", round_sig9(m.best_val_nll)},
                                 {"val_history", detail::rounded(m.val_history)}};
  return c;
}

inline Cfae cfae_from_container(const Container& c) {
  const auto kind = detail::meta_get<std::string>(c.metadata, "model");
  if (kind == "elsa") {
    ElsaModel model(to_matrix(c.get("A")),
                    parse_elsa_pooling(c.metadata.value("pooling", std::string("mean"))));
    if (model.dim() != detail::meta_get<std::size_t>(c.metadata, "r") ||
        model.num_items() != detail::meta_get<std::size_t>(c.metadata, "n"))
      throw Error(ErrorCode::format, "ELSA tensor shape disagrees with its metadata");
    model.meta.seed = c.metadata.value("seed", std::uint64_t{0});
    return model;
  }
  if (kind == "multvae") {
    MultVaeParams p;
    p.enc_w1 = to_matrix(c.get("enc_w1"));
    p.enc_b1 = to_row_vector(c.get("enc_b1"));
    p.mu_w = to_matrix(c.get("mu_w"));
    p.mu_b = to_row_vector(c.get("mu_b"));
    p.lv_w = to_matrix(c.get("lv_w"));
    p.lv_b = to_row_vector(c.get("lv_b"));
    p.dec_w1 = to_matrix(c.get("dec_w1"));
    p.dec_b1 = to_row_vector(c.get("dec_b1"));
    p.out_w = to_matrix(c.get("out_w"));
    p.out_b = to_row_vector(c.get("out_b"));
    const auto n = p.num_items();
    const auto h = p.hidden();
    const auto d = p.dim();
    const bool consistent = p.enc_b1.size() == static_cast<Eigen::Index>(h) &&
                            p.mu_w.rows() == static_cast<Eigen::Index>(h) &&
                            p.lv_w.rows() == static_cast<Eigen::Index>(h) &&
                            p.lv_w.cols() == static_cast<Eigen::Index>(d) &&
                            p.dec_w1.rows() == static_cast<Eigen::Index>(d) &&
                            p.dec_w1.cols() == static_cast<Eigen::Index>(h) &&
                            p.out_w.rows() == static_cast<Eigen::Index>(h) &&
                            p.out_w.cols() == static_cast<Eigen::Index>(n) &&
                            d == detail::meta_get<std::size_t>(c.metadata, "d") &&
                            n == detail::meta_get<std::size_t>(c.metadata, "n");
    if (!consistent) throw Error(ErrorCode::format, "MultVAE tensor shapes are inconsistent");
    MultVaeModel model(std::move(p), detail::meta_get<double>(c.metadata, "beta_cap"),
                       1.0 - detail::meta_get<double>(c.metadata, "dropout"));
    model.meta.seed = c.metadata.value("seed", std::uint64_t{0});
    return model;
  }
  throw Error(ErrorCode::format, "unknown CFAE kind '" + kind + "'");
}

inline Json sae_sidecar(const SaeModel& sae, const std::string& parent_model) {
  Json j = {{"model", "sae"},
            {"variant", to_string(sae.variant())},
            {"loss", to_string(sae.loss_kind())},
            {"lambda1", round_sig9(sae.lambda1())},
            {"p", sae.input_dim()},
            {"d", sae.width()},
            {"parent_model", parent_model}};
  if (sae.variant() == SaeVariant::topk) j["k"] = sae.k();
  return j;
}

inline Container sae_container(const SaeModel& sae, const std::string& parent_model) {
  Container c;
  c.metadata = sae_sidecar(sae, parent_model);
  const auto& p = sae.params();
  c.tensors = {tensor_from("W_E", p.enc_w), tensor_from("b_E", p.enc_b),
               tensor_from("W_D", p.dec_w), tensor_from("b_D", p.dec_b),
               tensor_from("mu", sae.standardizer().mean), tensor_from("s", sae.standardizer().scale)};
  const auto& m = sae.meta;
  c.metadata["seed"] = m.seed;
  c.metadata["training_meta"] = {{"epochs_run", m.epochs_run},
                                 {"best_epoch", m.best_epoch},
                                 {"best_val_loss", round_sig9(m.best_val_loss)},
                                 {"dead_fraction", round_sig9(m.dead_fraction)},
                                 {"warnings", m.warnings}};
  return c;
}

inline SaeModel sae_from_container(const Container& c) {
  if (detail::meta_get<std::string>(c.metadata, "model") != "sae")
    throw Error(ErrorCode::format, "model file does not hold a sparse autoencoder");
  SaeParams p;
  p.enc_w = to_matrix(c.get("W_E"));
  p.enc_b = to_row_vector(c.get("b_E"));
  p.dec_w = to_matrix(c.get("W_D"));
  p.dec_b = to_row_vector(c.get("b_D"));
  Standardizer s{to_row_vector(c.get("mu")), to_row_vector(c.get("s"))};
  const auto d = p.enc_w.rows();
  const auto in = p.enc_w.cols();
  if (p.enc_b.size() != d || p.dec_w.rows() != in || p.dec_w.cols() != d || p.dec_b.size() != in ||
      s.mean.size() != in || s.scale.size() != in ||
      static_cast<std::size_t>(d) != detail::meta_get<std::size_t>(c.metadata, "d") ||
      static_cast<std::size_t>(in) != detail::meta_get<std::size_t>(c.metadata, "p"))
    throw Error(ErrorCode::format, "SAE tensor shapes are inconsistent");
  const auto variant = parse_variant(detail::meta_get<std::string>(c.metadata, "variant"));
  const std::size_t k = variant == SaeVariant::topk ? detail::meta_get<std::size_t>(c.metadata, "k") : 0;
  SaeModel model(std::move(p), std::move(s), variant, k,
                 parse_loss_kind(detail::meta_get<std::string>(c.metadata, "loss")),
                 detail::meta_get<double>(c.metadata, "lambda1"));
  model.meta.seed = c.metadata.value("seed", std::uint64_t{0});
  return model;
}

// Model file plus a JSON sidecar next to it (same stem, .json).
inline void save_cfae(const std::filesystem::path& path, const Cfae& cfae) {
  const Container c = cfae_container(cfae);
  save_container(path, c);
  write_json(detail::sidecar_path(path), c.metadata);
}

inline Cfae load_cfae(const std::filesystem::path& path) {
  return cfae_from_container(load_container(path));
}

inline void save_sae(const std::filesystem::path& path, const SaeModel& sae,
                     const std::string& parent_model) {
  const Container c = sae_container(sae, parent_model);
  save_container(path, c);
  write_json(detail::sidecar_path(path), c.metadata);
}

inline SaeModel load_sae(const std::filesystem::path& path) {
  return sae_from_container(load_container(path));
}

}  // namespace knobs
