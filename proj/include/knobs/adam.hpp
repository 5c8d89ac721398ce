#pragma once

#include <cmath>
#include <cstddef>

namespace knobs {

struct AdamConfig {
  double alpha = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double epsilon = 1e-8;
};

// First and second moment buffers shaped like one parameter block.
template <typename Param>
struct AdamSlot {
  Param m;
  Param v;

  explicit AdamSlot(const Param& like)
      : m(Param::Zero(like.rows(), like.cols())), v(Param::Zero(like.rows(), like.cols())) {}
};

class Adam {
 public:
  explicit Adam(AdamConfig config) : config_(config) {}

  // Advances the shared timestep; call once per optimizer step before apply().
  void next_step() {
    ++t_;
    bias1_ = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    bias2_ = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  }

  template <typename Param, typename Grad>
  void apply(Param& param, const Grad& grad, AdamSlot<Param>& slot) const {
    slot.m = config_.beta1 * slot.m + (1.0 - config_.beta1) * grad;
    slot.v = config_.beta2 * slot.v + (1.0 - config_.beta2) * grad.cwiseProduct(grad);
    param.array() -= config_.alpha * (slot.m.array() / bias1_) /
                     ((slot.v.array() / bias2_).sqrt() + config_.epsilon);
  }

  std::size_t steps() const { return t_; }
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  std::size_t t_ = 0;
  double bias1_ = 1.0;
  double bias2_ = 1.0;
};

}  // namespace knobs
