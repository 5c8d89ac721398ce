#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "knobs/elsa.hpp"
#include "knobs/synthetic.hpp"

using namespace knobs;
using knobs::test::max_fd_error;

namespace {

RowMatrix unit_rows(Rng& rng, Eigen::Index n, Eigen::Index r) {
  RowMatrix a = test::random_matrix(rng, n, r);
  normalize_rows(a);
  return a;
}

// X (A A^T - I) computed densely.
RowMatrix dense_scores(const RowMatrix& a, const RowMatrix& x) {
  const RowMatrix i = RowMatrix::Identity(a.rows(), a.rows());
  return x * (a * a.transpose() - i);
}

}  // namespace

TEST(ElsaEncode, OneHotGivesItemRow) {
  Rng rng(1);
  const ElsaModel m(unit_rows(rng, 6, 3), ElsaPooling::sum);
  const std::vector<index_t> h{4};
  const Vector z = m.encode(h);
  EXPECT_TRUE(z.isApprox(m.embeddings().row(4).transpose()));
}

TEST(ElsaEncode, EmptyHistoryIsZero) {
  Rng rng(1);
  for (auto pooling : {ElsaPooling::sum, ElsaPooling::mean}) {
    const ElsaModel m(unit_rows(rng, 6, 3), pooling);
    EXPECT_EQ(m.encode({}).norm(), 0.0);
  }
}

TEST(ElsaEncode, SumPoolingMatchesColumnSums) {
  Rng rng(2);
  const ElsaModel m(unit_rows(rng, 20, 4), ElsaPooling::sum);
  const std::vector<index_t> h{1, 5, 7, 12, 19};
  Vector want = Vector::Zero(4);
  for (int c = 0; c < 4; ++c)
    for (index_t i : h) want[c] += m.embeddings()(i, c);
  EXPECT_LT((m.encode(h) - want).norm(), 1e-12);
}

TEST(ElsaEncode, SumPoolingIsLinearOverDisjointHistories) {
  Rng rng(3);
  const ElsaModel m(unit_rows(rng, 30, 5), ElsaPooling::sum);
  for (int trial = 0; trial < 50; ++trial) {
    auto order = iota_indices(30);
    rng.shuffle(order);
    std::vector<index_t> x1(order.begin(), order.begin() + 6), x2(order.begin() + 6, order.begin() + 15);
    std::vector<index_t> both(order.begin(), order.begin() + 15);
    std::sort(x1.begin(), x1.end());
    std::sort(x2.begin(), x2.end());
    std::sort(both.begin(), both.end());
    EXPECT_LT((m.encode(both) - m.encode(x1) - m.encode(x2)).norm(), 1e-12);
  }
}

TEST(ElsaEncode, MeanPoolingIsSumOverLength) {
  Rng rng(4);
  const RowMatrix a = unit_rows(rng, 25, 6);
  const ElsaModel sum(a, ElsaPooling::sum), mean(a, ElsaPooling::mean);
  const auto rows = test::random_rows(rng, 40, 25, 1, 12);
  for (const auto& h : rows)
    EXPECT_LT((mean.encode(h) - sum.encode(h) / static_cast<double>(h.size())).norm(), 1e-12);
}

TEST(ElsaDecode, PoolingDoesNotChangeScores) {
  Rng rng(5);
  const RowMatrix a = unit_rows(rng, 25, 6);
  const ElsaModel sum(a, ElsaPooling::sum), mean(a, ElsaPooling::mean);
  const auto rows = test::random_rows(rng, 40, 25, 1, 12);
  for (const auto& h : rows) {
    const Vector s = sum.decode(sum.encode(h), h);
    const Vector m = mean.decode(mean.encode(h), h);
    EXPECT_LT((s - m).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(ElsaDecode, ZeroCodeAndEmptyHistoryGiveZero) {
  Rng rng(6);
  const ElsaModel m(unit_rows(rng, 8, 3));
  EXPECT_EQ(m.decode(Vector::Zero(3), {}).norm(), 0.0);
}

TEST(ElsaDecode, EndToEndMatchesDenseProduct) {
  Rng rng(7);
  const RowMatrix a = unit_rows(rng, 15, 4);
  const auto rows = test::random_rows(rng, 10, 15, 1, 8);
  const RowMatrix x(indicator_batch(rows, 15));
  const RowMatrix want = dense_scores(a, x);
  for (auto pooling : {ElsaPooling::sum, ElsaPooling::mean}) {
    const ElsaModel m(a, pooling);
    for (std::size_t u = 0; u < rows.size(); ++u) {
      const Vector got = m.decode(m.encode(rows[u]), rows[u]);
      EXPECT_LT((got.transpose() - want.row(static_cast<Eigen::Index>(u))).norm(), 1e-12);
    }
  }
}

TEST(ElsaDecode, SeenItemDropsByOne) {
  Rng rng(8);
  const ElsaModel m(unit_rows(rng, 10, 3), ElsaPooling::sum);
  const std::vector<index_t> h{2, 6};
  const Vector z = m.encode(h);
  const Vector raw = m.embeddings() * z;
  const Vector s = m.decode(z, h);
  EXPECT_NEAR(s[2], raw[2] - 1.0, 1e-12);
  EXPECT_NEAR(s[6], raw[6] - 1.0, 1e-12);
  EXPECT_NEAR(s[3], raw[3], 1e-12);
}

TEST(ElsaLoss, EmptyBatchHasZeroGradient) {
  Rng rng(9);
  const RowMatrix a = unit_rows(rng, 6, 2);
  const std::vector<std::vector<index_t>> none(3);
  const auto batch = indicator_batch(none, 6);
  for (auto loss : {ElsaLoss::squared, ElsaLoss::normalized}) {
    EXPECT_EQ(elsa_loss(a, batch, loss), 0.0);
    EXPECT_EQ(elsa_grad(a, batch, loss).norm(), 0.0);
  }
}

TEST(ElsaLoss, SquaredMatchesDenseFormula) {
  Rng rng(10);
  const RowMatrix a = unit_rows(rng, 12, 3);
  const auto rows = test::random_rows(rng, 7, 12, 1, 6);
  const auto batch = indicator_batch(rows, 12);
  const RowMatrix x(batch);
  const RowMatrix r = x - dense_scores(a, x);
  EXPECT_NEAR(elsa_loss(a, batch, ElsaLoss::squared), r.squaredNorm() / 7.0, 1e-12);
}

TEST(ElsaLoss, TinyFixtureGradientMatchesFiniteDifferences) {
  // 6 items, 3 users, r = 2
  RowMatrix a(6, 2);
  a << 0.8, 0.6, -0.6, 0.8, 1, 0, 0, 1, 0.28, -0.96, -0.96, -0.28;
  const std::vector<std::vector<index_t>> rows{{0, 1, 2}, {2, 3}, {1, 4, 5}};
  const auto batch = indicator_batch(rows, 6);
  for (auto loss : {ElsaLoss::squared, ElsaLoss::normalized}) {
    const RowMatrix g = elsa_grad(a, batch, loss);
    const double err = max_fd_error<RowMatrix>(a, g, [&] { return elsa_loss(a, batch, loss); });
    EXPECT_LT(err, 1e-5) << to_string(loss);
  }
}

TEST(ElsaLoss, RandomFixturesGradientMatchesFiniteDifferences) {
  Rng rng(11);
  for (int trial = 0; trial < 6; ++trial) {
    const auto n = static_cast<Eigen::Index>(5 + rng.below(16));
    const auto r = static_cast<Eigen::Index>(1 + rng.below(8));
    RowMatrix a = unit_rows(rng, n, r);
    const auto rows = test::random_rows(rng, 6, static_cast<std::size_t>(n), 1, 4);
    const auto batch = indicator_batch(rows, static_cast<std::size_t>(n));
    for (auto loss : {ElsaLoss::squared, ElsaLoss::normalized}) {
      const RowMatrix g = elsa_grad(a, batch, loss);
      EXPECT_LT(max_fd_error<RowMatrix>(a, g, [&] { return elsa_loss(a, batch, loss); }), 1e-5);
    }
  }
}

TEST(ElsaLoss, UserOrderDoesNotMatter) {
  Rng rng(12);
  const RowMatrix a = unit_rows(rng, 14, 4);
  auto rows = test::random_rows(rng, 9, 14, 1, 7);
  const auto b1 = indicator_batch(rows, 14);
  std::reverse(rows.begin(), rows.end());
  const auto b2 = indicator_batch(rows, 14);
  for (auto loss : {ElsaLoss::squared, ElsaLoss::normalized}) {
    EXPECT_NEAR(elsa_loss(a, b1, loss), elsa_loss(a, b2, loss), 1e-12);
    EXPECT_LT((elsa_grad(a, b1, loss) - elsa_grad(a, b2, loss)).norm(), 1e-12);
  }
}

TEST(ElsaTrain, RowsStayUnitNorm) {
  Rng rng(13);
  const auto rows = test::random_rows(rng, 60, 20, 2, 8);
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.max_epochs = 5;
  cfg.patience = 5;
  cfg.seed = 1;
  const ElsaModel m = elsa_train(rows, {}, 20, 4, cfg);
  for (Eigen::Index i = 0; i < 20; ++i) EXPECT_NEAR(m.embeddings().row(i).norm(), 1.0, 1e-6);
}

TEST(ElsaTrain, PlantedBlocksLowerValidationLoss) {
  // two blocks of six items; every user draws inside one block
  Rng rng(14);
  std::vector<std::vector<index_t>> train, val;
  for (int u = 0; u < 40; ++u) {
    const index_t base = (u % 2) * 6;
    std::vector<index_t> r;
    for (index_t k = 0; k < 6; ++k)
      if (rng.uniform() < 0.6) r.push_back(base + k);
    if (r.empty()) r.push_back(base);
    (u < 32 ? train : val).push_back(r);
  }
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.max_epochs = 25;
  cfg.patience = 25;
  cfg.adam.alpha = 1e-2;
  cfg.seed = 3;
  for (auto loss : {ElsaLoss::squared, ElsaLoss::normalized}) {
    cfg.loss = loss;
    const ElsaModel m = elsa_train(train, val, 12, 4, cfg);
    EXPECT_LT(m.meta.best_val_loss, m.meta.initial_val_loss);
  }
}

TEST(ElsaTrain, SameSeedSameWeights) {
  SyntheticSpec spec;
  spec.num_users = 200;
  spec.seed = 2;
  const auto corpus = generate_synthetic(spec);
  const auto split = split_strong_generalization(corpus.x, 0.1, 0.1, 1);
  TrainConfig cfg;
  cfg.batch_size = 64;
  cfg.max_epochs = 3;
  cfg.patience = 3;
  cfg.seed = 5;
  const auto a = elsa_train(corpus.x, split, 8, cfg);
  const auto b = elsa_train(corpus.x, split, 8, cfg);
  EXPECT_TRUE((a.embeddings().array() == b.embeddings().array()).all());
  cfg.seed = 6;
  const auto c = elsa_train(corpus.x, split, 8, cfg);
  EXPECT_FALSE((a.embeddings().array() == c.embeddings().array()).all());
}

TEST(ElsaTrain, ConfigValidation) {
  TrainConfig cfg;
  cfg.patience = cfg.max_epochs + 1;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = TrainConfig{};
  cfg.adam.beta2 = 1.0;
  EXPECT_THROW(cfg.validate(), Error);
  EXPECT_THROW(parse_elsa_loss("absolute"), Error);
  EXPECT_THROW(parse_elsa_pooling("max"), Error);
  EXPECT_EQ(parse_elsa_pooling("sum"), ElsaPooling::sum);
}
