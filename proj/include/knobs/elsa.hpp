#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "knobs/adam.hpp"
#include "knobs/corpus.hpp"
#include "knobs/error.hpp"
#include "knobs/rng.hpp"
#include "knobs/types.hpp"

namespace knobs {

enum class ElsaLoss { squared, normalized };

inline std::string to_string(ElsaLoss l) { return l == ElsaLoss::squared ? "squared" : "normalized"; }

inline ElsaLoss parse_elsa_loss(const std::string& s) {
  if (s == "squared") return ElsaLoss::squared;
  if (s == "normalized") return ElsaLoss::normalized;
  throw Error(ErrorCode::config, "unknown ELSA loss '" + s + "'");
}

enum class ElsaPooling { sum, mean };

inline std::string to_string(ElsaPooling p) { return p == ElsaPooling::sum ? "sum" : "mean"; }

inline ElsaPooling parse_elsa_pooling(const std::string& s) {
  if (s == "sum") return ElsaPooling::sum;
  if (s == "mean") return ElsaPooling::mean;
  throw Error(ErrorCode::config, "unknown ELSA pooling '" + s + "'");
}

struct TrainConfig {
  std::size_t batch_size = 1024;
  std::size_t max_epochs = 25;
  std::size_t patience = 10;
  AdamConfig adam{3e-4, 0.9, 0.99, 1e-8};
  ElsaLoss loss = ElsaLoss::normalized;
  ElsaPooling pooling = ElsaPooling::mean;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1) throw Error(ErrorCode::config, "batch_size must be >= 1");
    if (patience > max_epochs) throw Error(ErrorCode::config, "patience exceeds max_epochs");
    if (!(adam.beta1 > 0 && adam.beta1 < 1 && adam.beta2 > 0 && adam.beta2 < 1))
      throw Error(ErrorCode::config, "Adam betas must lie in (0, 1)");
  }
};

struct ElsaTrainingMeta {
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double initial_val_loss = 0.0;
  double best_val_loss = 0.0;
  double final_val_loss = 0.0;
  std::uint64_t seed = 0;
  // Batch loss is the mean over users of the per-user squared error.
  std::string loss_reduction = "mean_over_users";
  std::vector<double> val_history;
};

// Shallow linear CFAE with unit-norm item rows. With sum pooling the encoder
// is z = A^T x and the decoder A z - x. Mean pooling divides z by |x| and the
// decoder multiplies by |x| again, so the end-to-end scores are the same while
// user embeddings live on the scale of a single item row.
class ElsaModel {
 public:
  ElsaModel() = default;
  explicit ElsaModel(RowMatrix embeddings, ElsaPooling pooling = ElsaPooling::mean)
      : a_(std::move(embeddings)), pooling_(pooling) {}

  const RowMatrix& embeddings() const { return a_; }
  std::size_t num_items() const { return static_cast<std::size_t>(a_.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(a_.cols()); }
  ElsaPooling pooling() const { return pooling_; }
  void set_pooling(ElsaPooling pooling) { pooling_ = pooling; }

  Vector encode(std::span<const index_t> items) const {
    Vector z = Vector::Zero(a_.cols());
    for (index_t i : items) z += a_.row(i).transpose();
    if (pooling_ == ElsaPooling::mean && !items.empty()) z /= static_cast<double>(items.size());
    return z;
  }

  // A z - x (rescaled by |x| under mean pooling), with x the same history
  // that produced z. An empty history decodes at unit scale.
  Vector decode(const Vector& z, std::span<const index_t> items) const {
    Vector scores = a_ * z;
    if (pooling_ == ElsaPooling::mean && items.size() > 1) scores *= static_cast<double>(items.size());
    for (index_t i : items) scores[i] -= 1.0;
    return scores;
  }

  ElsaTrainingMeta meta;

 private:
  RowMatrix a_;
  ElsaPooling pooling_ = ElsaPooling::mean;
};

inline void normalize_rows(RowMatrix& a) {
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double norm = a.row(i).norm();
    if (norm > 0.0) a.row(i) /= norm;
  }
}

namespace detail {

// Per-user loss and its gradient with respect to the prediction P = X A A^T - X.
// squared: ||x - p||^2. normalized: ||x/|x| - p/|p|||^2; zero rows contribute 0.
inline double elsa_residual(const RowMatrix& pred, const SparseRowMatrix& batch, ElsaLoss loss,
                            RowMatrix* d_pred) {
  const RowMatrix x(batch);
  if (loss == ElsaLoss::squared) {
    const RowMatrix r = pred - x;
    if (d_pred != nullptr) *d_pred = 2.0 * r;
    return r.squaredNorm();
  }
  if (d_pred != nullptr) *d_pred = RowMatrix::Zero(pred.rows(), pred.cols());
  double total = 0.0;
  for (Eigen::Index u = 0; u < pred.rows(); ++u) {
    const double xn = x.row(u).norm();
    const double pn = pred.row(u).norm();
    if (xn == 0.0 || pn == 0.0) continue;
    const RowVector xh = x.row(u) / xn;
    const RowVector ph = pred.row(u) / pn;
    const double c = xh.dot(ph);
    total += 2.0 - 2.0 * c;
    if (d_pred != nullptr) d_pred->row(u) = -2.0 * (xh - c * ph) / pn;
  }
  return total;
}

}  // namespace detail

// Mean over batch users of the per-user loss between x and x A A^T - x.
inline double elsa_loss(const RowMatrix& a, const SparseRowMatrix& batch,
                        ElsaLoss loss = ElsaLoss::squared) {
  if (batch.rows() == 0) return 0.0;
  const RowMatrix y = batch * a;
  RowMatrix pred = y * a.transpose();
  pred -= RowMatrix(batch);
  return detail::elsa_residual(pred, batch, loss, nullptr) / static_cast<double>(batch.rows());
}

// Analytic gradient of elsa_loss with respect to A. With G = dL/dP for
// P = X A A^T - X:  dL/dA = (1/B) (X^T G A + G^T X A).
inline RowMatrix elsa_grad(const RowMatrix& a, const SparseRowMatrix& batch,
                           ElsaLoss loss = ElsaLoss::squared) {
  if (batch.rows() == 0) return RowMatrix::Zero(a.rows(), a.cols());
  const RowMatrix y = batch * a;
  RowMatrix pred = y * a.transpose();
  pred -= RowMatrix(batch);
  RowMatrix g;
  detail::elsa_residual(pred, batch, loss, &g);
  RowMatrix grad = batch.transpose() * (g * a);
  grad.noalias() += g.transpose() * y;
  grad /= static_cast<double>(batch.rows());
  return grad;
}

namespace detail {

inline double elsa_full_loss(const RowMatrix& a, std::span<const std::vector<index_t>> rows,
                             std::size_t num_items, std::size_t chunk, ElsaLoss loss) {
  if (rows.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t start = 0; start < rows.size(); start += chunk) {
    const std::size_t len = std::min(chunk, rows.size() - start);
    const auto batch = indicator_batch(rows.subspan(start, len), num_items);
    total += elsa_loss(a, batch, loss) * static_cast<double>(len);
  }
  return total / static_cast<double>(rows.size());
}

}  // namespace detail

inline RowMatrix elsa_init(std::size_t num_items, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
  RowMatrix a(num_items, dim);
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) a(i, j) = rng.uniform(-bound, bound);
  normalize_rows(a);
  return a;
}

// Adam on the batch objective with row re-projection after every step and
// early stopping on the validation loss. The best-validation A is returned.
inline ElsaModel elsa_train(std::span<const std::vector<index_t>> train_rows,
                            std::span<const std::vector<index_t>> val_rows, std::size_t num_items,
                            std::size_t dim, const TrainConfig& config) {
  config.validate();
  if (dim < 1) throw Error(ErrorCode::config, "embedding dimension must be >= 1");
  if (train_rows.empty()) throw Error(ErrorCode::config, "empty training split");

  RowMatrix a = elsa_init(num_items, dim, config.seed);
  Adam adam(config.adam);
  AdamSlot<RowMatrix> slot(a);
  Rng rng(mix_seed(config.seed, 1));
  const auto monitor = val_rows.empty() ? train_rows : val_rows;

  ElsaTrainingMeta meta;
  meta.seed = config.seed;
  meta.initial_val_loss = detail::elsa_full_loss(a, monitor, num_items, config.batch_size, config.loss);
  meta.best_val_loss = meta.initial_val_loss;
  RowMatrix best = a;
  std::size_t since_best = 0;

  auto order = iota_indices(train_rows.size());
  std::vector<std::vector<index_t>> batch_rows;
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      batch_rows.clear();
      for (std::size_t k = start; k < end; ++k) batch_rows.push_back(train_rows[order[k]]);
      const auto batch = indicator_batch(batch_rows, num_items);
      const RowMatrix grad = elsa_grad(a, batch, config.loss);
      adam.next_step();
      adam.apply(a, grad, slot);
      normalize_rows(a);
    }
    const double val = detail::elsa_full_loss(a, monitor, num_items, config.batch_size, config.loss);
    if (!std::isfinite(val) || !a.allFinite())
      throw Error(ErrorCode::training, "ELSA loss diverged at epoch " + std::to_string(epoch));
    meta.val_history.push_back(val);
    meta.epochs_run = epoch;
    meta.final_val_loss = val;
    if (val < meta.best_val_loss) {
      meta.best_val_loss = val;
      meta.best_epoch = epoch;
      best = a;
      since_best = 0;
    } else if (++since_best >= config.patience && config.patience > 0) {
      break;
    }
  }
  ElsaModel model(std::move(best), config.pooling);
  model.meta = std::move(meta);
  return model;
}

inline ElsaModel elsa_train(const InteractionMatrix& x, const SplitSpec& split, std::size_t dim,
                            const TrainConfig& config) {
  const auto train = x.select_rows(split.train);
  const auto val = x.select_rows(split.val);
  return elsa_train(train, val, x.num_items(), dim, config);
}

}  // namespace knobs
