#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "knobs/adam.hpp"
#include "knobs/corpus.hpp"
#include "knobs/error.hpp"
#include "knobs/rng.hpp"
#include "knobs/types.hpp"

namespace knobs {

struct MultVaeConfig {
  std::size_t batch_size = 1024;
  std::size_t epochs = 25;
  AdamConfig adam{1e-3, 0.9, 0.99, 1e-8};
  double beta_step = 1e-6;
  double beta_cap = 0.2;
  double keep_prob = 0.5;
  std::uint64_t seed = 0;
};

// Weights are stored input x output (row-vector convention): h = x W + b.
struct MultVaeParams {
  RowMatrix enc_w1;  // n x 3d
  RowVector enc_b1;
  RowMatrix mu_w;  // 3d x d
  RowVector mu_b;
  RowMatrix lv_w;  // 3d x d
  RowVector lv_b;
  RowMatrix dec_w1;  // d x 3d
  RowVector dec_b1;
  RowMatrix out_w;  // 3d x n
  RowVector out_b;

  std::size_t num_items() const { return static_cast<std::size_t>(enc_w1.rows()); }
  std::size_t hidden() const { return static_cast<std::size_t>(enc_w1.cols()); }
  std::size_t dim() const { return static_cast<std::size_t>(mu_w.cols()); }

  bool all_finite() const {
    return enc_w1.allFinite() && enc_b1.allFinite() && mu_w.allFinite() && mu_b.allFinite() &&
           lv_w.allFinite() && lv_b.allFinite() && dec_w1.allFinite() && dec_b1.allFinite() &&
           out_w.allFinite() && out_b.allFinite();
  }

  static MultVaeParams zeros_like(const MultVaeParams& p) {
    MultVaeParams z;
    z.enc_w1 = RowMatrix::Zero(p.enc_w1.rows(), p.enc_w1.cols());
    z.enc_b1 = RowVector::Zero(p.enc_b1.size());
    z.mu_w = RowMatrix::Zero(p.mu_w.rows(), p.mu_w.cols());
    z.mu_b = RowVector::Zero(p.mu_b.size());
    z.lv_w = RowMatrix::Zero(p.lv_w.rows(), p.lv_w.cols());
    z.lv_b = RowVector::Zero(p.lv_b.size());
    z.dec_w1 = RowMatrix::Zero(p.dec_w1.rows(), p.dec_w1.cols());
    z.dec_b1 = RowVector::Zero(p.dec_b1.size());
    z.out_w = RowMatrix::Zero(p.out_w.rows(), p.out_w.cols());
    z.out_b = RowVector::Zero(p.out_b.size());
    return z;
  }
};

inline constexpr double kLogvarMin = -10.0;
inline constexpr double kLogvarMax = 10.0;

// beta after `steps` optimizer steps: min(cap, steps * step).
inline double beta_schedule(std::size_t steps, double beta_step, double beta_cap) {
  return std::min(beta_cap, static_cast<double>(steps) * beta_step);
}

// KL(N(mu, exp(lv)) || N(0, I)) for one row.
inline double gaussian_kl(const RowVector& mu, const RowVector& logvar) {
  return 0.5 * (logvar.array().exp() + mu.array().square() - 1.0 - logvar.array()).sum();
}

namespace detail {

inline RowMatrix add_bias(RowMatrix m, const RowVector& b) {
  m.rowwise() += b;
  return m;
}

inline RowMatrix log_softmax_rows(const RowMatrix& logits) {
  RowMatrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
    out.row(r) = logits.row(r).array() - lse;
  }
  return out;
}

}  // namespace detail

// L2-normalized indicator rows (empty rows stay zero).
inline SparseRowMatrix normalized_input(std::span<const std::vector<index_t>> rows,
                                        std::size_t num_items) {
  SparseRowMatrix x = indicator_batch(rows, num_items);
  for (Eigen::Index r = 0; r < x.outerSize(); ++r) {
    const double nnz = static_cast<double>(rows[static_cast<std::size_t>(r)].size());
    if (nnz == 0) continue;
    const double scale = 1.0 / std::sqrt(nnz);
    for (SparseRowMatrix::InnerIterator it(x, r); it; ++it) it.valueRef() = scale;
  }
  return x;
}

struct VaeLossParts {
  double total = 0.0;
  double nll = 0.0;
  double kl = 0.0;
};

// Batch loss mean_u[-sum_j x_uj log pi_uj + beta * KL_u] and its gradient.
// `input` is the encoder input (normalized, possibly dropped out), `targets`
// the binary history, `noise` the reparameterization draws (B x d).
inline VaeLossParts multvae_loss_grad(const MultVaeParams& p, const SparseRowMatrix& input,
                                      const SparseRowMatrix& targets, const RowMatrix& noise,
                                      double beta, MultVaeParams* grad) {
  const auto batch = static_cast<double>(input.rows());
  const RowMatrix h1 = detail::add_bias(input * p.enc_w1, p.enc_b1).array().tanh().matrix();
  const RowMatrix mu = detail::add_bias(h1 * p.mu_w, p.mu_b);
  const RowMatrix lv_raw = detail::add_bias(h1 * p.lv_w, p.lv_b);
  const RowMatrix lv = lv_raw.cwiseMax(kLogvarMin).cwiseMin(kLogvarMax);
  const RowMatrix sd = (0.5 * lv.array()).exp().matrix();
  const RowMatrix z = mu + sd.cwiseProduct(noise);
  const RowMatrix h2 = detail::add_bias(z * p.dec_w1, p.dec_b1).array().tanh().matrix();
  const RowMatrix logits = detail::add_bias(h2 * p.out_w, p.out_b);
  const RowMatrix logp = detail::log_softmax_rows(logits);

  const RowMatrix x_dense = targets;
  VaeLossParts parts;
  parts.nll = -(x_dense.cwiseProduct(logp)).sum() / batch;
  double kl_sum = 0.0;
  for (Eigen::Index r = 0; r < mu.rows(); ++r) kl_sum += gaussian_kl(mu.row(r), lv.row(r));
  parts.kl = kl_sum / batch;
  parts.total = parts.nll + beta * parts.kl;
  if (grad == nullptr) return parts;

  // d/dlogits of -sum_j x_j log softmax_j = (sum_j x_j) pi - x.
  const Eigen::VectorXd x_mass = x_dense.rowwise().sum();
  RowMatrix d_logits = logp.array().exp().matrix();
  for (Eigen::Index r = 0; r < d_logits.rows(); ++r) d_logits.row(r) *= x_mass[r];
  d_logits -= x_dense;
  d_logits /= batch;

  grad->out_w = h2.transpose() * d_logits;
  grad->out_b = d_logits.colwise().sum();
  const RowMatrix d_pre2 =
      (d_logits * p.out_w.transpose()).cwiseProduct((1.0 - h2.array().square()).matrix());
  grad->dec_w1 = z.transpose() * d_pre2;
  grad->dec_b1 = d_pre2.colwise().sum();
  const RowMatrix d_z = d_pre2 * p.dec_w1.transpose();

  const double kl_scale = beta / batch;
  const RowMatrix d_mu = d_z + kl_scale * mu;
  RowMatrix d_lv = d_z.cwiseProduct(noise).cwiseProduct(0.5 * sd) +
                   (kl_scale * 0.5 * (lv.array().exp() - 1.0)).matrix();
  // The clamp passes no gradient outside its range.
  d_lv = (lv_raw.array() >= kLogvarMin && lv_raw.array() <= kLogvarMax)
             .select(d_lv, RowMatrix::Zero(d_lv.rows(), d_lv.cols()));

  grad->mu_w = h1.transpose() * d_mu;
  grad->mu_b = d_mu.colwise().sum();
  grad->lv_w = h1.transpose() * d_lv;
  grad->lv_b = d_lv.colwise().sum();
  const RowMatrix d_h1 = d_mu * p.mu_w.transpose() + d_lv * p.lv_w.transpose();
  const RowMatrix d_pre1 = d_h1.cwiseProduct((1.0 - h1.array().square()).matrix());
  grad->enc_w1 = input.transpose() * d_pre1;
  grad->enc_b1 = d_pre1.colwise().sum();
  return parts;
}

struct MultVaeTrainingMeta {
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  std::size_t steps = 0;
  double final_beta = 0.0;
  double best_val_nll = 0.0;
  std::vector<double> val_history;
  std::uint64_t seed = 0;
};

class MultVaeModel {
 public:
  MultVaeModel() = default;
  MultVaeModel(MultVaeParams params, double beta_cap, double keep_prob)
      : params_(std::move(params)), beta_cap_(beta_cap), keep_prob_(keep_prob) {}

  const MultVaeParams& params() const { return params_; }
  std::size_t num_items() const { return params_.num_items(); }
  std::size_t dim() const { return params_.dim(); }
  double beta_cap() const { return beta_cap_; }
  double keep_prob() const { return keep_prob_; }

  // Mean head of the encoder; an empty history encodes the zero vector.
  Vector encode_mean(std::span<const index_t> items) const {
    RowVector h = params_.enc_b1;
    if (!items.empty()) {
      const double scale = 1.0 / std::sqrt(static_cast<double>(items.size()));
      for (index_t i : items) h += scale * params_.enc_w1.row(i);
    }
    h = h.array().tanh().matrix();
    return (h * params_.mu_w + params_.mu_b).transpose();
  }

  Vector decode_logits(const Vector& z) const {
    const RowVector h = (z.transpose() * params_.dec_w1 + params_.dec_b1).array().tanh().matrix();
    return (h * params_.out_w + params_.out_b).transpose();
  }

  // Softmax over items.
  Vector decode(const Vector& z) const {
    const Vector logits = decode_logits(z);
    const double mx = logits.maxCoeff();
    Vector pi = (logits.array() - mx).exp().matrix();
    pi /= pi.sum();
    return pi;
  }

  MultVaeTrainingMeta meta;

 private:
  MultVaeParams params_;
  double beta_cap_ = 0.2;
  double keep_prob_ = 0.5;
};

inline MultVaeParams multvae_init(std::size_t num_items, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t hidden = 3 * dim;
  const auto layer = [&](std::size_t fan_in, std::size_t fan_out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    RowMatrix w(fan_in, fan_out);
    for (Eigen::Index i = 0; i < w.rows(); ++i)
      for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = rng.uniform(-bound, bound);
    return w;
  };
  MultVaeParams p;
  p.enc_w1 = layer(num_items, hidden);
  p.enc_b1 = RowVector::Zero(hidden);
  p.mu_w = layer(hidden, dim);
  p.mu_b = RowVector::Zero(dim);
  p.lv_w = layer(hidden, dim);
  p.lv_b = RowVector::Zero(dim);
  p.dec_w1 = layer(dim, hidden);
  p.dec_b1 = RowVector::Zero(hidden);
  p.out_w = layer(hidden, num_items);
  p.out_b = RowVector::Zero(num_items);
  return p;
}

// Validation criterion: multinomial NLL through the mean head, no dropout.
inline double multvae_val_nll(const MultVaeParams& p, std::span<const std::vector<index_t>> rows,
                              std::size_t chunk) {
  if (rows.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t start = 0; start < rows.size(); start += chunk) {
    const auto len = std::min(chunk, rows.size() - start);
    const auto sub = rows.subspan(start, len);
    const auto input = normalized_input(sub, p.num_items());
    const auto targets = indicator_batch(sub, p.num_items());
    const RowMatrix zero_noise = RowMatrix::Zero(static_cast<Eigen::Index>(len), p.dim());
    total += multvae_loss_grad(p, input, targets, zero_noise, 0.0, nullptr).nll *
             static_cast<double>(len);
  }
  return total / static_cast<double>(rows.size());
}

// Fixed epoch budget; the parameters with the best validation NLL are kept.
inline MultVaeModel multvae_train(std::span<const std::vector<index_t>> train_rows,
                                  std::span<const std::vector<index_t>> val_rows,
                                  std::size_t num_items, std::size_t dim,
                                  const MultVaeConfig& config) {
  if (dim < 1) throw Error(ErrorCode::config, "bottleneck dimension must be >= 1");
  if (train_rows.empty()) throw Error(ErrorCode::config, "empty training split");
  if (!(config.keep_prob > 0.0 && config.keep_prob <= 1.0))
    throw Error(ErrorCode::config, "keep probability must lie in (0, 1]");

  MultVaeParams p = multvae_init(num_items, dim, config.seed);
  MultVaeParams grad = MultVaeParams::zeros_like(p);
  Adam adam(config.adam);
  AdamSlot<RowMatrix> s_enc_w1(p.enc_w1), s_mu_w(p.mu_w), s_lv_w(p.lv_w), s_dec_w1(p.dec_w1),
      s_out_w(p.out_w);
  AdamSlot<RowVector> s_enc_b1(p.enc_b1), s_mu_b(p.mu_b), s_lv_b(p.lv_b), s_dec_b1(p.dec_b1),
      s_out_b(p.out_b);
  Rng rng(mix_seed(config.seed, 2));
  const auto monitor = val_rows.empty() ? train_rows : val_rows;

  MultVaeTrainingMeta meta;
  meta.seed = config.seed;
  MultVaeParams best = p;
  meta.best_val_nll = multvae_val_nll(p, monitor, config.batch_size);

  auto order = iota_indices(train_rows.size());
  std::vector<std::vector<index_t>> batch_rows;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      batch_rows.clear();
      for (std::size_t k = start; k < end; ++k) batch_rows.push_back(train_rows[order[k]]);
      SparseRowMatrix input = normalized_input(batch_rows, num_items);
      if (config.keep_prob < 1.0) {
        // Inverted dropout on the observed entries only.
        for (Eigen::Index r = 0; r < input.outerSize(); ++r)
          for (SparseRowMatrix::InnerIterator it(input, r); it; ++it)
            it.valueRef() = rng.uniform() < config.keep_prob ? it.value() / config.keep_prob : 0.0;
      }
      const auto targets = indicator_batch(batch_rows, num_items);
      RowMatrix noise(static_cast<Eigen::Index>(batch_rows.size()), static_cast<Eigen::Index>(dim));
      for (Eigen::Index r = 0; r < noise.rows(); ++r)
        for (Eigen::Index c = 0; c < noise.cols(); ++c) noise(r, c) = rng.normal();
      const double beta = beta_schedule(adam.steps(), config.beta_step, config.beta_cap);
      const auto parts = multvae_loss_grad(p, input, targets, noise, beta, &grad);
      if (!std::isfinite(parts.total))
        throw Error(ErrorCode::training, "MultVAE loss diverged at epoch " + std::to_string(epoch));
      adam.next_step();
      adam.apply(p.enc_w1, grad.enc_w1, s_enc_w1);
      adam.apply(p.enc_b1, grad.enc_b1, s_enc_b1);
      adam.apply(p.mu_w, grad.mu_w, s_mu_w);
      adam.apply(p.mu_b, grad.mu_b, s_mu_b);
      adam.apply(p.lv_w, grad.lv_w, s_lv_w);
      adam.apply(p.lv_b, grad.lv_b, s_lv_b);
      adam.apply(p.dec_w1, grad.dec_w1, s_dec_w1);
      adam.apply(p.dec_b1, grad.dec_b1, s_dec_b1);
      adam.apply(p.out_w, grad.out_w, s_out_w);
      adam.apply(p.out_b, grad.out_b, s_out_b);
    }
    const double val = multvae_val_nll(p, monitor, config.batch_size);
    if (!std::isfinite(val) || !p.all_finite())
      throw Error(ErrorCode::training, "MultVAE loss diverged at epoch " + std::to_string(epoch));
    meta.val_history.push_back(val);
    meta.epochs_run = epoch;
    if (val < meta.best_val_nll) {
      meta.best_val_nll = val;
      meta.best_epoch = epoch;
      best = p;
    }
  }
  meta.steps = adam.steps();
  meta.final_beta = beta_schedule(adam.steps(), config.beta_step, config.beta_cap);
  MultVaeModel model(std::move(best), config.beta_cap, config.keep_prob);
  model.meta = std::move(meta);
  return model;
}

inline MultVaeModel multvae_train(const InteractionMatrix& x, const SplitSpec& split,
                                  std::size_t dim, const MultVaeConfig& config) {
  const auto train = x.select_rows(split.train);
  const auto val = x.select_rows(split.val);
  return multvae_train(train, val, x.num_items(), dim, config);
}

}  // namespace knobs
