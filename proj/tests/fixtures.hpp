#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "knobs/elsa.hpp"
#include "knobs/multvae.hpp"
#include "knobs/rng.hpp"
#include "knobs/sae.hpp"

namespace knobs::test {

// Random distinct sorted item lists.
inline std::vector<std::vector<index_t>> random_rows(Rng& rng, std::size_t users, std::size_t items,
                                                     std::size_t min_len, std::size_t max_len) {
  std::vector<std::vector<index_t>> rows(users);
  for (auto& r : rows) {
    const std::size_t len = min_len + rng.below(max_len - min_len + 1);
    auto order = iota_indices(items);
    rng.shuffle(order);
    for (std::size_t k = 0; k < len; ++k) r.push_back(static_cast<index_t>(order[k]));
    std::sort(r.begin(), r.end());
  }
  return rows;
}

inline RowMatrix random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  RowMatrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.uniform(-scale, scale);
  return m;
}

inline RowVector random_row(Rng& rng, Eigen::Index n, double scale = 1.0) {
  return random_matrix(rng, 1, n, scale).row(0);
}

// Central differences of f at every entry of `param`, compared elementwise
// with the analytic gradient. Returns the largest error relative to
// max(|g|, |fd|, floor); entries smaller than floor are compared absolutely
// against floor so that rounding noise on near-zero slopes does not dominate.
template <class Param>
double max_fd_error(Param& param, const Param& analytic, const std::function<double()>& f,
                    double h = 1e-5, double floor = 1e-3) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < param.rows(); ++i)
    for (Eigen::Index j = 0; j < param.cols(); ++j) {
      const double keep = param(i, j);
      param(i, j) = keep + h;
      const double up = f();
      param(i, j) = keep - h;
      const double down = f();
      param(i, j) = keep;
      const double numeric = (up - down) / (2.0 * h);
      const double g = analytic(i, j);
      const double denom = std::max({std::abs(g), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(g - numeric) / denom);
    }
  return worst;
}

inline SaeParams random_sae_params(Rng& rng, std::size_t p, std::size_t d) {
  SaeParams s;
  s.enc_w = random_matrix(rng, static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(p));
  s.enc_b = random_row(rng, static_cast<Eigen::Index>(d), 0.3);
  s.dec_w = random_matrix(rng, static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(d));
  normalize_columns(s.dec_w);
  s.dec_b = random_row(rng, static_cast<Eigen::Index>(p), 0.3);
  return s;
}

inline MultVaeParams random_vae_params(Rng& rng, std::size_t n, std::size_t d) {
  const auto h = static_cast<Eigen::Index>(3 * d);
  const auto N = static_cast<Eigen::Index>(n);
  const auto D = static_cast<Eigen::Index>(d);
  MultVaeParams p;
  p.enc_w1 = random_matrix(rng, N, h, 0.5);
  p.enc_b1 = random_row(rng, h, 0.1);
  p.mu_w = random_matrix(rng, h, D, 0.5);
  p.mu_b = random_row(rng, D, 0.1);
  p.lv_w = random_matrix(rng, h, D, 0.5);
  p.lv_b = random_row(rng, D, 0.1);
  p.dec_w1 = random_matrix(rng, D, h, 0.5);
  p.dec_b1 = random_row(rng, h, 0.1);
  p.out_w = random_matrix(rng, h, N, 0.5);
  p.out_b = random_row(rng, N, 0.1);
  return p;
}

}  // namespace knobs::test
