#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "pace/learning.hpp"
#include "pace/synthetic.hpp"

namespace {

using pace::Matrix;
using pace::RowMatrix;
using pace::Vector;

struct Instance {
  std::vector<RowMatrix> emb, phi;
  std::vector<Vector> counts;

  std::vector<pace::MStepItem> items() const {
    std::vector<pace::MStepItem> out;
    for (std::size_t m = 0; m < emb.size(); ++m) out.push_back({&emb[m], &phi[m], &counts[m]});
    return out;
  }
};

Instance single_image(const RowMatrix& e, const RowMatrix& phi, const Vector& counts) {
  return {{e}, {phi}, {counts}};
}

// ---- update_mu / update_sigma -----------------------------------------

TEST(UpdateMu, SingleConceptIsPlainMean) {
  std::mt19937_64 rng(1);
  const RowMatrix e = oracle::random_matrix(7, 3, rng);
  const auto inst = single_image(e, RowMatrix::Ones(7, 1), Vector::Ones(7));
  const auto mu = pace::update_mu(inst.items(), 0);
  ASSERT_TRUE(mu);
  EXPECT_LE((*mu - e.colwise().mean().transpose()).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(UpdateMu, WeightedMeanExample) {
  RowMatrix e(2, 1);
  e << 0, 2;
  Vector c(2);
  c << 1, 3;
  const auto inst = single_image(e, RowMatrix::Ones(2, 1), c);
  EXPECT_DOUBLE_EQ((*pace::update_mu(inst.items(), 0))[0], 1.5);
}

TEST(UpdateMu, SingleSupportPointReturnsThatEmbedding) {
  std::mt19937_64 rng(2);
  const RowMatrix e = oracle::random_matrix(4, 2, rng);
  RowMatrix phi(4, 2);
  phi << 1, 0, 1, 0, 0, 1, 1, 0;
  const auto inst = single_image(e, phi, Vector::Ones(4));
  EXPECT_EQ(*pace::update_mu(inst.items(), 1), Vector(e.row(2).transpose()));
}

TEST(UpdateMu, DeadConceptIsSignalled) {
  std::mt19937_64 rng(3);
  RowMatrix phi(3, 2);
  phi << 1, 0, 1, 0, 1, 0;
  const auto inst = single_image(oracle::random_matrix(3, 2, rng), phi, Vector::Ones(3));
  EXPECT_FALSE(pace::update_mu(inst.items(), 1).has_value());
  EXPECT_FALSE(pace::update_sigma(inst.items(), Vector::Zero(2), 1).has_value());
}

TEST(UpdateSigma, Examples) {
  RowMatrix e(2, 1);
  e << -1, 1;
  const auto inst = single_image(e, RowMatrix::Ones(2, 1), Vector::Ones(2));
  EXPECT_DOUBLE_EQ((*pace::update_sigma(inst.items(), Vector::Zero(1), 0)).matrix()(0, 0), 1.0);

  const RowMatrix same = RowMatrix::Constant(3, 2, 0.4);
  const auto flat = single_image(same, RowMatrix::Ones(3, 1), Vector::Ones(3));
  const Matrix s = pace::update_sigma(flat.items(), Vector::Constant(2, 0.4), 0)->matrix();
  EXPECT_TRUE(s.isApprox(pace::default_jitter(pace::SpdMatrix(Matrix::Zero(2, 2))) * Matrix::Identity(2, 2)));

  RowMatrix axis(4, 2);
  axis << 2, 0, -2, 0, 0, 1, 0, -1;
  const auto ax = single_image(axis, RowMatrix::Ones(4, 1), Vector::Ones(4));
  const Matrix a = pace::update_sigma(ax.items(), Vector::Zero(2), 0)->matrix();
  EXPECT_NEAR(a(0, 1), 0.0, 1e-9);
  EXPECT_NEAR(a(0, 0), 2.0, 1e-12);
  EXPECT_NEAR(a(1, 1), 0.5, 1e-12);
}

TEST(UpdateSigma, DiagonalModeDropsCovariances) {
  std::mt19937_64 rng(4);
  const RowMatrix e = oracle::random_matrix(30, 3, rng);
  const auto inst = single_image(e, RowMatrix::Ones(30, 1), Vector::Ones(30));
  const Vector mu = *pace::update_mu(inst.items(), 0);
  const Matrix full = pace::update_sigma(inst.items(), mu, 0)->matrix();
  const Matrix diag = pace::update_sigma(inst.items(), mu, 0, pace::CovarianceKind::kDiagonal)->matrix();
  EXPECT_TRUE(diag.diagonal().isApprox(full.diagonal()));
  EXPECT_EQ(Matrix(diag - Matrix(diag.diagonal().asDiagonal())).cwiseAbs().maxCoeff(), 0.0);
}

TEST(MStep, MatchesNaiveWeightedMomentOracle) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> M(1, 10), J(1, 5), K(1, 3), D(1, 3);
  for (int t = 0; t < 100; ++t) {
    const int m = M(rng), j = J(rng), k = K(rng), d = D(rng);
    Instance inst;
    for (int i = 0; i < m; ++i) {
      inst.emb.push_back(oracle::random_matrix(j, d, rng));
      inst.phi.push_back(oracle::random_phi(j, k, rng));
      auto p = oracle::random_patches(j, 1, rng);
      inst.counts.push_back(pace::effective_counts(p, pace::AttentionRescale::kSumToJ));
    }
    for (int kk = 0; kk < k; ++kk) {
      const auto want = oracle::weighted_moments(inst.emb, inst.phi, inst.counts, kk);
      const auto mu = pace::update_mu(inst.items(), static_cast<std::size_t>(kk));
      ASSERT_TRUE(mu);
      EXPECT_LE((*mu - want.mean).cwiseAbs().maxCoeff(), 1e-9);
      const auto sigma = pace::update_sigma(inst.items(), *mu, static_cast<std::size_t>(kk));
      ASSERT_TRUE(sigma);
      // Jitter only enters when the raw scatter is singular (single-point support).
      const Matrix raw = want.cov;
      const double jitter = (sigma->matrix() - raw).diagonal().mean();
      EXPECT_LE((sigma->matrix() - raw - jitter * Matrix::Identity(d, d)).cwiseAbs().maxCoeff(), 1e-9);
      EXPECT_LE(jitter, pace::default_jitter(pace::SpdMatrix(0.5 * (raw + raw.transpose()))) + 1e-9);
    }
  }
}

// ---- heads ---------------------------------------------------------------

std::vector<pace::HeadBatchItem> random_batch(std::mt19937_64& rng, Eigen::Index K, int N, int size) {
  std::vector<pace::HeadBatchItem> batch(static_cast<std::size_t>(size));
  for (int i = 0; i < size; ++i) {
    auto& it = batch[static_cast<std::size_t>(i)];
    it.phi_bar = oracle::random_simplex(K, rng);
    it.label = i % N;
    if (i % 3 != 0) {
      it.phi_bar_perturbed = oracle::random_simplex(K, rng);
      for (int f = 0; f < 3; ++f) it.negative_phi_bars.push_back(oracle::random_simplex(K, rng));
    }
  }
  return batch;
}

TEST(HeadGradients, MatchFiniteDifferences) {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 20; ++t) {
    const auto batch = random_batch(rng, 3, 2, 6);
    pace::HeadParams head{oracle::random_matrix(2, 3, rng), oracle::random_simplex(3, rng) * 3};
    const auto g = pace::head_gradients(batch, head);
    const double h = 1e-5;
    for (Eigen::Index i = 0; i < head.eta.size(); ++i) {
      auto up = head, dn = head;
      up.eta.data()[i] += h;
      dn.eta.data()[i] -= h;
      EXPECT_NEAR(g.eta.data()[i], (pace::head_objective(batch, up) - pace::head_objective(batch, dn)) / (2 * h), 1e-6);
    }
    for (Eigen::Index i = 0; i < head.beta.size(); ++i) {
      auto up = head, dn = head;
      up.beta[i] += h;
      dn.beta[i] -= h;
      EXPECT_NEAR(g.beta[i], (pace::head_objective(batch, up) - pace::head_objective(batch, dn)) / (2 * h), 1e-6);
    }
  }
}

TEST(HeadGradients, SymmetricBinaryBatchSumsToZero) {
  std::vector<pace::HeadBatchItem> batch(2);
  batch[0].phi_bar = Vector::Constant(2, 0.5);
  batch[0].label = 0;
  batch[1].phi_bar = Vector::Constant(2, 0.5);
  batch[1].label = 1;
  const auto g = pace::head_gradients(batch, pace::HeadParams::zeros(2, 2));
  EXPECT_EQ(Vector(g.eta.colwise().sum().transpose()), Vector::Zero(2));
}

TEST(HeadGradients, BetaVanishesWhenTwinEqualsEveryNegative) {
  std::mt19937_64 rng(7);
  pace::HeadBatchItem it;
  it.phi_bar = oracle::random_simplex(3, rng);
  it.phi_bar_perturbed = oracle::random_simplex(3, rng);
  it.negative_phi_bars = {*it.phi_bar_perturbed, *it.phi_bar_perturbed};
  pace::HeadParams head{oracle::random_matrix(2, 3, rng), oracle::random_simplex(3, rng)};
  const auto g = pace::head_gradients(std::vector{it}, head);
  EXPECT_LE(g.beta.cwiseAbs().maxCoeff(), 1e-16);
}

TEST(StepHeads, ZeroGradientIsAFixedPoint) {
  std::mt19937_64 rng(8);
  pace::HeadParams head{oracle::random_matrix(2, 3, rng), oracle::random_simplex(3, rng)};
  auto state = pace::AdamState::for_head(head);
  const pace::HeadGradients zero{Matrix::Zero(2, 3), Vector::Zero(3)};
  const auto next = pace::step_heads(head, zero, state, {});
  EXPECT_EQ(next.eta, head.eta);
  EXPECT_EQ(next.beta, head.beta);
}

TEST(StepHeads, FirstStepMovesByLearningRateInGradientSign) {
  std::mt19937_64 rng(9);
  const auto head = pace::HeadParams::zeros(2, 3);
  auto state = pace::AdamState::for_head(head);
  const pace::HeadGradients g{oracle::random_matrix(2, 3, rng), oracle::random_matrix(3, 1, rng).col(0)};
  pace::AdamOptions opt;
  opt.learning_rate = 0.05;
  const auto next = pace::step_heads(head, g, state, opt);
  for (Eigen::Index i = 0; i < g.eta.size(); ++i) {
    EXPECT_EQ(std::signbit(next.eta.data()[i]), std::signbit(g.eta.data()[i]));
    EXPECT_NEAR(std::abs(next.eta.data()[i]), 0.05, 1e-6);
  }
}

TEST(StepHeads, ConstraintModeClipsToBounds) {
  pace::HeadParams head{Matrix::Constant(1, 2, 0.99), Vector::Constant(2, 0.01)};
  auto state = pace::AdamState::for_head(head);
  Matrix ge(1, 2);
  ge << 5, -5;
  Vector gb(2);
  gb << -5, 5;
  pace::AdamOptions opt;
  opt.learning_rate = 0.5;
  opt.constrain = true;
  const auto next = pace::step_heads(head, {ge, gb}, state, opt);
  EXPECT_EQ(next.eta(0, 0), 1.0);
  EXPECT_NEAR(next.eta(0, 1), 0.49, 1e-6);
  EXPECT_EQ(next.beta[0], 0.0);
  EXPECT_NO_THROW(next.validate(true));
}

TEST(StepHeads, NonFiniteGradientIsNumericalFailure) {
  const auto head = pace::HeadParams::zeros(1, 2);
  auto state = pace::AdamState::for_head(head);
  pace::HeadGradients g{Matrix::Zero(1, 2), Vector::Zero(2)};
  g.beta[0] = NAN;
  EXPECT_THROW(pace::step_heads(head, g, state, {}), pace::NumericalError);
}

// ---- initialization -----------------------------------------------------

TEST(KMeans, RecoversSeparatedClusters) {
  std::mt19937_64 rng(10);
  std::normal_distribution<double> n(0.0, 0.1);
  const std::vector<std::array<double, 2>> centers{{{0, 0}}, {{5, 5}}, {{-5, 5}}};
  RowMatrix pts(300, 2);
  for (int i = 0; i < 300; ++i) {
    const auto& c = centers[static_cast<std::size_t>(i % 3)];
    pts(i, 0) = c[0] + n(rng);
    pts(i, 1) = c[1] + n(rng);
  }
  const auto got = pace::kmeans_pp(pts, 3, 10, rng);
  ASSERT_EQ(got.size(), 3u);
  for (const auto& c : centers) {
    double best = INFINITY;
    for (const auto& g : got) best = std::min(best, std::hypot(g[0] - c[0], g[1] - c[1]));
    EXPECT_LT(best, 0.1);
  }
}

// ---- fit -------------------------------------------------------------------

std::vector<pace::ImageRecord> small_dataset(std::mt19937_64& rng, std::size_t k, std::size_t m, bool twins) {
  const auto bank = pace::make_separated_bank(k, 3, 6.0, 1.0, 0.5, rng);
  auto head = pace::HeadParams::zeros(2, k);
  head.eta = oracle::random_matrix(2, static_cast<Eigen::Index>(k), rng, 3.0);
  pace::GenerativeOptions opt;
  opt.with_twins = twins;
  return pace::sample_generative(bank, head, m, 12, rng, opt).first.records;
}

TEST(Fit, RejectsZeroEpochs) {
  std::mt19937_64 rng(11);
  const auto recs = small_dataset(rng, 2, 10, false);
  pace::TrainConfig c;
  c.epochs = 0;
  EXPECT_THROW(pace::fit(recs, 2, c), pace::ContractError);
}

TEST(Fit, SingleConceptMeanIsGlobalWeightedMean) {
  std::mt19937_64 rng(12);
  const auto recs = small_dataset(rng, 3, 20, false);
  pace::TrainConfig c;
  c.num_concepts = 1;
  c.epochs = 1;
  const auto r = pace::fit(recs, 2, c);
  Vector acc = Vector::Zero(3);
  double mass = 0;
  for (const auto& rec : recs) {
    const Vector cnt = pace::effective_counts(rec.patches, c.attention);
    acc += rec.patches.embeddings.transpose() * cnt;
    mass += cnt.sum();
  }
  EXPECT_LE((r.bank.means[0] - acc / mass).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Fit, FrozenHeadsGiveMonotoneDatasetElbo) {
  std::mt19937_64 rng(13);
  const auto recs = small_dataset(rng, 3, 60, true);
  pace::TrainConfig c;
  c.num_concepts = 3;
  c.epochs = 10;
  c.train_heads = false;
  const auto r = pace::fit(recs, 2, c);
  for (std::size_t t = 1; t < r.trace.size(); ++t) {
    EXPECT_GE(r.trace[t].elbo_e, r.trace[t - 1].elbo_e - 1e-7) << "epoch " << t + 1;
  }
}

TEST(Fit, SameSeedIsBitReproducibleAndThreadCountInvariant) {
  std::mt19937_64 rng(14);
  const auto recs = small_dataset(rng, 3, 40, true);
  pace::TrainConfig c;
  c.num_concepts = 3;
  c.epochs = 4;
  c.rng_seed = 77;
  const auto a = pace::fit(recs, 2, c);
  c.num_threads = 3;
  const auto b = pace::fit(recs, 2, c);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(a.bank.means[k], b.bank.means[k]);
    EXPECT_EQ(a.bank.covs[k].matrix(), b.bank.covs[k].matrix());
  }
  EXPECT_EQ(a.head.eta, b.head.eta);
  EXPECT_EQ(a.head.beta, b.head.beta);
  for (std::size_t t = 0; t < a.trace.size(); ++t) EXPECT_EQ(a.trace[t].total(), b.trace[t].total());
}

TEST(Fit, RelabeledInitializationGivesRelabeledResultExactly) {
  std::mt19937_64 rng(15);
  const auto recs = small_dataset(rng, 3, 40, true);
  pace::TrainConfig c;
  c.num_concepts = 3;
  c.epochs = 5;
  std::mt19937_64 init_rng(3);
  const auto init = pace::initialize_bank(recs, c, init_rng);
  const std::vector<std::size_t> perm{2, 0, 1};
  auto permuted = init;
  for (std::size_t k = 0; k < 3; ++k) {
    permuted.means[perm[k]] = init.means[k];
    permuted.covs[perm[k]] = init.covs[k];
  }
  pace::FitOptions oa, ob;
  oa.initial_bank = init;
  ob.initial_bank = permuted;
  const auto a = pace::fit(recs, 2, c, oa);
  const auto b = pace::fit(recs, 2, c, ob);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(a.bank.means[k], b.bank.means[perm[k]]);
    EXPECT_EQ(a.bank.covs[k].matrix(), b.bank.covs[perm[k]].matrix());
    EXPECT_EQ(a.head.beta[static_cast<Eigen::Index>(k)], b.head.beta[static_cast<Eigen::Index>(perm[k])]);
    EXPECT_EQ(a.head.eta.col(static_cast<Eigen::Index>(k)), b.head.eta.col(static_cast<Eigen::Index>(perm[k])));
  }
}

TEST(Fit, DeadConceptIsReseededWithWarning) {
  std::mt19937_64 rng(16);
  const auto recs = small_dataset(rng, 2, 20, false);
  pace::TrainConfig c;
  c.num_concepts = 3;
  c.epochs = 2;
  std::mt19937_64 init_rng(1);
  auto init = pace::initialize_bank(recs, c, init_rng);
  init.means[2] = Vector::Constant(3, 1e6);
  init.covs[2] = pace::SpdMatrix::identity(3);
  std::vector<std::string> warnings;
  pace::FitOptions opt;
  opt.initial_bank = init;
  opt.warn = [&](const std::string& m) { warnings.push_back(m); };
  const auto r = pace::fit(recs, 2, c, opt);
  ASSERT_FALSE(warnings.empty());
  EXPECT_NE(warnings.front().find("concept 2"), std::string::npos);
  EXPECT_LT(r.bank.means[2].norm(), 1e3);
}

TEST(Fit, ConstraintModeKeepsHeadsInBounds) {
  std::mt19937_64 rng(17);
  const auto recs = small_dataset(rng, 2, 30, true);
  pace::TrainConfig c;
  c.num_concepts = 2;
  c.epochs = 40;
  c.head_learning_rate = 0.3;
  c.constraint_mode = true;
  const auto r = pace::fit(recs, 2, c);
  EXPECT_NO_THROW(r.head.validate(true));
}

}  // namespace
