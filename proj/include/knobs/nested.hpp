#pragma once

#include <span>
#include <string>
#include <variant>

#include "knobs/directive.hpp"
#include "knobs/elsa.hpp"
#include "knobs/multvae.hpp"
#include "knobs/sae.hpp"

namespace knobs {

// Either outer collaborative-filtering autoencoder.
using Cfae = std::variant<ElsaModel, MultVaeModel>;

inline std::string cfae_name(const Cfae& c) {
  return std::holds_alternative<ElsaModel>(c) ? "elsa" : "multvae";
}

inline std::size_t cfae_dim(const Cfae& c) {
  return std::visit([](const auto& m) { return m.dim(); }, c);
}

inline std::size_t cfae_items(const Cfae& c) {
  return std::visit([](const auto& m) { return m.num_items(); }, c);
}

inline Vector cfae_encode(const Cfae& c, std::span<const index_t> items) {
  if (const auto* elsa = std::get_if<ElsaModel>(&c)) return elsa->encode(items);
  return std::get<MultVaeModel>(c).encode_mean(items);
}

// ELSA subtracts the input history; MultVAE returns the softmax over items.
inline Vector cfae_decode(const Cfae& c, const Vector& z, std::span<const index_t> items) {
  if (const auto* elsa = std::get_if<ElsaModel>(&c)) return elsa->decode(z, items);
  return std::get<MultVaeModel>(c).decode(z);
}

inline void check_compatible(const Cfae& c, const SaeModel& sae) {
  if (sae.input_dim() != cfae_dim(c))
    throw Error(ErrorCode::incompatible_dims, "SAE input dim " + std::to_string(sae.input_dim()) +
                                                  " != CFAE embedding dim " +
                                                  std::to_string(cfae_dim(c)));
}

// D_c(D_s(steer(E_s(E_c(x))))) with the SAE and steering optional.
inline Vector nested_scores(const Cfae& cfae, const SaeModel* sae, std::span<const index_t> items,
                            const SteeringDirective* directive = nullptr) {
  if (directive != nullptr && sae == nullptr)
    throw Error(ErrorCode::contract, "steering requires a sparse autoencoder");
  const Vector z = cfae_encode(cfae, items);
  if (sae == nullptr) return cfae_decode(cfae, z, items);
  check_compatible(cfae, *sae);
  const SparseCode code = sae->encode(z);
  if (directive == nullptr) return cfae_decode(cfae, sae->decode(code), items);
  // Decoding through the sparse path keeps alpha = 0 bitwise identical.
  const SparseCode steered = SparseCode::from_dense(steered_activations(code, *directive));
  return cfae_decode(cfae, sae->decode(steered), items);
}

}  // namespace knobs
