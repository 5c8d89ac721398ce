#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

namespace knobs {

using index_t = std::uint32_t;

// Parameters are stored row-major so that serialized payloads and row
// access (item embeddings, per-user batches) line up without copies.
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::RowVectorXd;
using Vector = Eigen::VectorXd;
using SparseRowMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

// Binary indicator rows -> sparse matrix with one row per history.
inline SparseRowMatrix indicator_batch(std::span<const std::vector<index_t>> rows,
                                       std::size_t num_items) {
  std::vector<Eigen::Triplet<double>> triplets;
  std::size_t nnz = 0;
  for (const auto& r : rows) nnz += r.size();
  triplets.reserve(nnz);
  for (std::size_t u = 0; u < rows.size(); ++u)
    for (index_t i : rows[u])
      triplets.emplace_back(static_cast<int>(u), static_cast<int>(i), 1.0);
  SparseRowMatrix out(static_cast<Eigen::Index>(rows.size()),
                      static_cast<Eigen::Index>(num_items));
  out.setFromTriplets(triplets.begin(), triplets.end());
  return out;
}

}  // namespace knobs
