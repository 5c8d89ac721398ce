#pragma once

#include <cmath>
#include <vector>

#include "knobs/error.hpp"
#include "knobs/sae.hpp"

namespace knobs {

struct Boost {
  index_t neuron = 0;
  double weight = 1.0;
};

// Neuron boosts (weights summing to one) blended in with intensity alpha.
struct SteeringDirective {
  std::vector<Boost> boosts;
  double alpha = 0.0;

  static SteeringDirective single(index_t neuron, double alpha) { return {{{neuron, 1.0}}, alpha}; }

  void validate(std::size_t width) const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorCode::config, "alpha must lie in [0, 1]");
    if (boosts.empty()) throw Error(ErrorCode::config, "directive has no boosts");
    double total = 0.0;
    for (const auto& b : boosts) {
      if (b.neuron >= width)
        throw Error(ErrorCode::incompatible_dims,
                    "boosted neuron " + std::to_string(b.neuron) + " outside sparse width " +
                        std::to_string(width));
      if (!(b.weight >= 0.0)) throw Error(ErrorCode::config, "boost weights must be nonnegative");
      total += b.weight;
    }
    if (std::abs(total - 1.0) > 1e-9) throw Error(ErrorCode::config, "boost weights must sum to 1");
  }
};

// Unit-sum steered code: (1 - alpha) z / sum(z) + alpha * sum_j w_j e_j.
inline Vector steer_code(const SparseCode& code, const SteeringDirective& directive) {
  directive.validate(code.dim);
  const double mass = code.sum();
  if (!(mass > 0.0) && directive.alpha < 1.0)
    throw Error(ErrorCode::degenerate_profile, "user code is empty; only alpha = 1 is defined");
  Vector out = Vector::Zero(static_cast<Eigen::Index>(code.dim));
  if (mass > 0.0)
    for (const auto& e : code.entries) out[e.neuron] = (1.0 - directive.alpha) * (e.value / mass);
  for (const auto& b : directive.boosts) out[b.neuron] += directive.alpha * b.weight;
  return out;
}

// The activations handed to the SAE decoder: the steered code rescaled to the
// user's original code mass, i.e. (1 - alpha) z + alpha * sum(z) * sum_j w_j e_j.
// At alpha = 0 this is z itself, so the unsteered model is reproduced exactly.
// An empty code (only valid at alpha = 1) is decoded at unit mass.
inline Vector steered_activations(const SparseCode& code, const SteeringDirective& directive) {
  directive.validate(code.dim);
  const double mass = code.sum();
  if (!(mass > 0.0) && directive.alpha < 1.0)
    throw Error(ErrorCode::degenerate_profile, "user code is empty; only alpha = 1 is defined");
  const double scale = mass > 0.0 ? mass : 1.0;
  Vector out = Vector::Zero(static_cast<Eigen::Index>(code.dim));
  for (const auto& e : code.entries) out[e.neuron] = (1.0 - directive.alpha) * e.value;
  for (const auto& b : directive.boosts) out[b.neuron] += directive.alpha * scale * b.weight;
  return out;
}

}  // namespace knobs
