#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "knobs/adam.hpp"
#include "knobs/error.hpp"
#include "knobs/rng.hpp"
#include "knobs/types.hpp"

namespace knobs {

enum class SaeVariant { basic, topk };
enum class SaeLossKind { l2, cosine };

inline std::string to_string(SaeVariant v) { return v == SaeVariant::basic ? "basic" : "topk"; }
inline std::string to_string(SaeLossKind l) { return l == SaeLossKind::l2 ? "l2" : "cosine"; }

inline SaeVariant parse_variant(const std::string& s) {
  if (s == "basic") return SaeVariant::basic;
  if (s == "topk") return SaeVariant::topk;
  throw Error(ErrorCode::config, "unknown SAE variant '" + s + "'");
}

inline SaeLossKind parse_loss_kind(const std::string& s) {
  if (s == "l2") return SaeLossKind::l2;
  if (s == "cosine") return SaeLossKind::cosine;
  throw Error(ErrorCode::config, "unknown SAE loss '" + s + "'");
}

inline constexpr double kScaleFloor = 1e-8;
inline constexpr double kCosineGuard = 1e-12;

// Per-dimension (y - mean) / scale, fit on training embeddings only.
struct Standardizer {
  RowVector mean;
  RowVector scale;

  static Standardizer fit(const RowMatrix& y) {
    Standardizer s;
    const auto n = static_cast<double>(y.rows());
    s.mean = y.colwise().mean();
    const RowMatrix centered = y.rowwise() - s.mean;
    s.scale = (centered.array().square().colwise().sum() / n).sqrt().max(kScaleFloor).matrix();
    return s;
  }

  static Standardizer identity(std::size_t dim) {
    return {RowVector::Zero(static_cast<Eigen::Index>(dim)),
            RowVector::Ones(static_cast<Eigen::Index>(dim))};
  }

  Vector apply(const Vector& y) const {
    return ((y.transpose() - mean).array() / scale.array()).matrix().transpose();
  }
  Vector restore(const Vector& y) const {
    return (y.transpose().array() * scale.array() + mean.array()).matrix().transpose();
  }
  RowMatrix apply_rows(const RowMatrix& y) const {
    return ((y.rowwise() - mean).array().rowwise() / scale.array()).matrix();
  }
};

struct Activation {
  index_t neuron = 0;
  double value = 0.0;

  friend bool operator==(const Activation&, const Activation&) = default;
};

// Nonnegative sparse code: strictly positive entries, ascending neurons.
struct SparseCode {
  std::size_t dim = 0;
  std::vector<Activation> entries;

  std::size_t l0() const { return entries.size(); }

  double sum() const {
    double s = 0.0;
    for (const auto& e : entries) s += e.value;
    return s;
  }

  Vector dense() const {
    Vector out = Vector::Zero(static_cast<Eigen::Index>(dim));
    for (const auto& e : entries) out[e.neuron] = e.value;
    return out;
  }

  // Keeps the nonzero entries of a dense activation vector.
  static SparseCode from_dense(const Vector& v) {
    SparseCode code{static_cast<std::size_t>(v.size()), {}};
    for (Eigen::Index j = 0; j < v.size(); ++j)
      if (v[j] != 0.0) code.entries.push_back({static_cast<index_t>(j), v[j]});
    return code;
  }
};

struct SaeParams {
  RowMatrix enc_w;  // d x p
  RowVector enc_b;  // d
  RowMatrix dec_w;  // p x d, unit-norm columns
  RowVector dec_b;  // p
};

namespace detail {

// Applies ReLU and, for TopK, keeps the k largest positive values (ties ->
// lower index) in place. Returns the surviving indices in ascending order.
inline std::vector<index_t> sparsify_row(Eigen::Ref<RowVector> pre, SaeVariant variant,
                                         std::size_t k) {
  std::vector<index_t> active;
  for (Eigen::Index j = 0; j < pre.size(); ++j) {
    if (pre[j] > 0.0)
      active.push_back(static_cast<index_t>(j));
    else
      pre[j] = 0.0;
  }
  if (variant == SaeVariant::topk && active.size() > k) {
    const auto better = [&](index_t a, index_t b) {
      return pre[a] > pre[b] || (pre[a] == pre[b] && a < b);
    };
    std::nth_element(active.begin(), active.begin() + static_cast<std::ptrdiff_t>(k), active.end(),
                     better);
    for (auto it = active.begin() + static_cast<std::ptrdiff_t>(k); it != active.end(); ++it)
      pre[*it] = 0.0;
    active.resize(k);
    std::sort(active.begin(), active.end());
  }
  return active;
}

}  // namespace detail

struct SaeLossTerms {
  double total = 0.0;
  double recon = 0.0;
  double l1 = 0.0;
  // Set when the cosine guard fired (zero-norm input or reconstruction).
  bool guarded = false;
};

// Encodes a batch of standardized inputs into dense (B x d) activations.
inline RowMatrix sae_encode_batch(const SaeParams& p, SaeVariant variant, std::size_t k,
                                  const RowMatrix& y_std) {
  RowMatrix codes = (y_std.rowwise() - p.dec_b) * p.enc_w.transpose();
  codes.rowwise() += p.enc_b;
  for (Eigen::Index r = 0; r < codes.rows(); ++r) detail::sparsify_row(codes.row(r), variant, k);
  return codes;
}

// Mean batch loss in standardized space and (optionally) its gradient.
// The TopK selection mask is treated as constant in the backward pass.
inline SaeLossTerms sae_loss_grad(const SaeParams& p, SaeVariant variant, std::size_t k,
                                  SaeLossKind loss, double lambda1, const RowMatrix& y_std,
                                  SaeParams* grad) {
  const auto batch = static_cast<double>(y_std.rows());
  const RowMatrix centered = y_std.rowwise() - p.dec_b;
  const RowMatrix codes = sae_encode_batch(p, variant, k, y_std);
  RowMatrix recon = codes * p.dec_w.transpose();
  recon.rowwise() += p.dec_b;

  SaeLossTerms terms;
  RowMatrix d_recon(recon.rows(), recon.cols());
  for (Eigen::Index r = 0; r < y_std.rows(); ++r) {
    if (loss == SaeLossKind::l2) {
      const RowVector diff = recon.row(r) - y_std.row(r);
      terms.recon += diff.squaredNorm();
      d_recon.row(r) = 2.0 * diff;
    } else {
      const double ny = y_std.row(r).norm();
      const double nr = recon.row(r).norm();
      if (ny < kCosineGuard || nr < kCosineGuard) {
        terms.recon += 1.0;
        terms.guarded = true;
        d_recon.row(r).setZero();
        continue;
      }
      const double cos = y_std.row(r).dot(recon.row(r)) / (ny * nr);
      terms.recon += 1.0 - cos;
      d_recon.row(r) = -(y_std.row(r) / (ny * nr) - cos * recon.row(r) / (nr * nr));
    }
  }
  terms.l1 = lambda1 * codes.sum();
  terms.recon /= batch;
  terms.l1 /= batch;
  terms.total = terms.recon + terms.l1;
  if (grad == nullptr) return terms;

  d_recon /= batch;
  grad->dec_w = d_recon.transpose() * codes;
  RowMatrix d_codes = d_recon * p.dec_w;
  d_codes.array() += lambda1 / batch;
  // Only surviving (strictly positive) activations pass gradient.
  d_codes = (codes.array() > 0.0).select(d_codes, RowMatrix::Zero(codes.rows(), codes.cols()));
  grad->enc_w = d_codes.transpose() * centered;
  grad->enc_b = d_codes.colwise().sum();
  grad->dec_b = d_recon.colwise().sum() - d_codes.colwise().sum() * p.enc_w;
  return terms;
}

inline void normalize_columns(RowMatrix& w) {
  for (Eigen::Index j = 0; j < w.cols(); ++j) {
    const double norm = w.col(j).norm();
    if (norm > 0.0) w.col(j) /= norm;
  }
}

struct SaeTrainingMeta {
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  double dead_fraction = 0.0;
  std::vector<std::string> warnings;
  std::uint64_t seed = 0;
};

class SaeModel {
 public:
  SaeModel() = default;
  SaeModel(SaeParams params, Standardizer standardizer, SaeVariant variant, std::size_t k,
           SaeLossKind loss, double lambda1)
      : params_(std::move(params)),
        standardizer_(std::move(standardizer)),
        variant_(variant),
        k_(k),
        loss_(loss),
        lambda1_(lambda1) {}

  const SaeParams& params() const { return params_; }
  const Standardizer& standardizer() const { return standardizer_; }
  SaeVariant variant() const { return variant_; }
  std::size_t k() const { return k_; }
  SaeLossKind loss_kind() const { return loss_; }
  double lambda1() const { return lambda1_; }
  std::size_t input_dim() const { return static_cast<std::size_t>(params_.enc_w.cols()); }
  std::size_t width() const { return static_cast<std::size_t>(params_.enc_w.rows()); }

  SparseCode encode(const Vector& y) const { return encode_standardized(standardizer_.apply(y)); }

  SparseCode encode_standardized(const Vector& y_std) const {
    RowVector pre = (y_std.transpose() - params_.dec_b) * params_.enc_w.transpose() + params_.enc_b;
    const auto active = detail::sparsify_row(pre, variant_, k_);
    SparseCode code{width(), {}};
    code.entries.reserve(active.size());
    for (index_t j : active) code.entries.push_back({j, pre[j]});
    return code;
  }

  // W_D c + b_D in standardized space.
  Vector decode_standardized(const Vector& code) const {
    return params_.dec_w * code + params_.dec_b.transpose();
  }

  Vector decode_standardized(const SparseCode& code) const {
    Vector out = params_.dec_b.transpose();
    for (const auto& e : code.entries) out += e.value * params_.dec_w.col(e.neuron);
    return out;
  }

  Vector decode(const SparseCode& code) const {
    return standardizer_.restore(decode_standardized(code));
  }

  // Dense activations (e.g. a steered code); entries need not be sparse.
  Vector decode(const Vector& code) const {
    return standardizer_.restore(decode_standardized(code));
  }

  SaeLossTerms loss(const Vector& y) const {
    const RowMatrix y_std = standardizer_.apply(y).transpose();
    return sae_loss_grad(params_, variant_, k_, loss_, lambda1_, y_std, nullptr);
  }

  SaeTrainingMeta meta;

 private:
  SaeParams params_;
  Standardizer standardizer_;
  SaeVariant variant_ = SaeVariant::topk;
  std::size_t k_ = 0;
  SaeLossKind loss_ = SaeLossKind::l2;
  double lambda1_ = 0.0;
};

struct SaeTrainConfig {
  std::size_t width_ratio = 8;
  SaeVariant variant = SaeVariant::topk;
  std::size_t k = 32;
  SaeLossKind loss = SaeLossKind::l2;
  double lambda1 = 3e-4;
  AdamConfig adam{3e-4, 0.9, 0.99, 1e-8};
  std::size_t batch_size = 1024;
  std::size_t max_epochs = 250;
  std::size_t patience = 50;
  std::uint64_t seed = 0;

  // Settings used for the mapping and steering models.
  static SaeTrainConfig fine_grained() {
    SaeTrainConfig c;
    c.adam.alpha = 1e-4;
    c.max_epochs = 1000;
    c.patience = 250;
    return c;
  }
};

inline SaeParams sae_init(std::size_t input_dim, std::size_t width, std::uint64_t seed) {
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(input_dim));
  SaeParams p;
  p.enc_w.resize(static_cast<Eigen::Index>(width), static_cast<Eigen::Index>(input_dim));
  for (Eigen::Index i = 0; i < p.enc_w.rows(); ++i)
    for (Eigen::Index j = 0; j < p.enc_w.cols(); ++j) p.enc_w(i, j) = rng.uniform(-bound, bound);
  p.enc_b = RowVector::Zero(static_cast<Eigen::Index>(width));
  p.dec_w = p.enc_w.transpose();
  normalize_columns(p.dec_w);
  // Mean of standardized training data, which is zero by construction.
  p.dec_b = RowVector::Zero(static_cast<Eigen::Index>(input_dim));
  return p;
}

// Fraction of neurons that never fire on the given standardized inputs.
inline double dead_fraction(const SaeParams& p, SaeVariant variant, std::size_t k,
                            const RowMatrix& y_std) {
  if (p.enc_w.rows() == 0) return 0.0;
  std::vector<bool> fired(static_cast<std::size_t>(p.enc_w.rows()), false);
  const std::size_t chunk = 1024;
  for (Eigen::Index start = 0; start < y_std.rows(); start += chunk) {
    const auto len = std::min<Eigen::Index>(chunk, y_std.rows() - start);
    const RowMatrix codes = sae_encode_batch(p, variant, k, y_std.middleRows(start, len));
    for (Eigen::Index r = 0; r < codes.rows(); ++r)
      for (Eigen::Index j = 0; j < codes.cols(); ++j)
        if (codes(r, j) > 0.0) fired[static_cast<std::size_t>(j)] = true;
  }
  const auto dead = std::count(fired.begin(), fired.end(), false);
  return static_cast<double>(dead) / static_cast<double>(fired.size());
}

// Trains on CFAE user embeddings (rows). Decoder columns are re-projected to
// unit norm after every step; the best-validation parameters are returned.
inline SaeModel sae_train(const RowMatrix& train_embeddings, const RowMatrix& val_embeddings,
                          const SaeTrainConfig& config) {
  if (train_embeddings.rows() == 0) throw Error(ErrorCode::config, "no training embeddings");
  if (config.width_ratio < 1) throw Error(ErrorCode::config, "width ratio must be >= 1");
  if (config.batch_size < 1) throw Error(ErrorCode::config, "batch_size must be >= 1");
  if (config.variant == SaeVariant::topk && config.k < 1)
    throw Error(ErrorCode::config, "TopK requires k >= 1");
  const auto input_dim = static_cast<std::size_t>(train_embeddings.cols());
  const std::size_t width = config.width_ratio * input_dim;

  SaeTrainingMeta meta;
  meta.seed = config.seed;
  if (width < input_dim) meta.warnings.push_back("sparse width is below the input dimension");

  const Standardizer standardizer = Standardizer::fit(train_embeddings);
  const RowMatrix train_std = standardizer.apply_rows(train_embeddings);
  const RowMatrix val_std =
      val_embeddings.rows() > 0 ? standardizer.apply_rows(val_embeddings) : train_std;

  SaeParams p = sae_init(input_dim, width, config.seed);
  SaeParams grad;
  Adam adam(config.adam);
  AdamSlot<RowMatrix> s_enc_w(p.enc_w), s_dec_w(p.dec_w);
  AdamSlot<RowVector> s_enc_b(p.enc_b), s_dec_b(p.dec_b);
  Rng rng(mix_seed(config.seed, 3));

  const auto val_loss = [&](const SaeParams& params) {
    double total = 0.0;
    const Eigen::Index chunk = 1024;
    for (Eigen::Index start = 0; start < val_std.rows(); start += chunk) {
      const auto len = std::min<Eigen::Index>(chunk, val_std.rows() - start);
      total += sae_loss_grad(params, config.variant, config.k, config.loss, config.lambda1,
                             val_std.middleRows(start, len), nullptr)
                   .total *
               static_cast<double>(len);
    }
    return total / static_cast<double>(val_std.rows());
  };

  SaeParams best = p;
  meta.best_val_loss = val_loss(p);
  std::size_t since_best = 0;
  auto order = iota_indices(static_cast<std::size_t>(train_std.rows()));
  RowMatrix batch;
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      batch.resize(static_cast<Eigen::Index>(end - start), train_std.cols());
      for (std::size_t r = start; r < end; ++r)
        batch.row(static_cast<Eigen::Index>(r - start)) =
            train_std.row(static_cast<Eigen::Index>(order[r]));
      sae_loss_grad(p, config.variant, config.k, config.loss, config.lambda1, batch, &grad);
      adam.next_step();
      adam.apply(p.enc_w, grad.enc_w, s_enc_w);
      adam.apply(p.enc_b, grad.enc_b, s_enc_b);
      adam.apply(p.dec_w, grad.dec_w, s_dec_w);
      adam.apply(p.dec_b, grad.dec_b, s_dec_b);
      normalize_columns(p.dec_w);
    }
    const double val = val_loss(p);
    if (!std::isfinite(val))
      throw Error(ErrorCode::training, "SAE loss diverged at epoch " + std::to_string(epoch));
    meta.epochs_run = epoch;
    if (val < meta.best_val_loss) {
      meta.best_val_loss = val;
      meta.best_epoch = epoch;
      best = p;
      since_best = 0;
    } else if (++since_best >= config.patience && config.patience > 0) {
      break;
    }
  }
  meta.dead_fraction = dead_fraction(best, config.variant, config.k, val_std);
  SaeModel model(std::move(best), standardizer, config.variant, config.k, config.loss,
                 config.lambda1);
  model.meta = std::move(meta);
  return model;
}

}  // namespace knobs
