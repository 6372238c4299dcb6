#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "pace/numkit.hpp"

namespace {

using pace::Matrix;
using pace::Vector;

TEST(Digamma, MatchesIndependentOracleAtReferencePoints) {
  // Reference values come from the log-gamma difference oracle, not literals.
  EXPECT_NEAR(pace::digamma(1.0), oracle::digamma_fd(1.0), 1e-9);
  EXPECT_NEAR(pace::digamma(0.5), oracle::digamma_fd(0.5), 1e-9);
  const double psi1 = oracle::digamma_fd(1.0);
  EXPECT_NEAR(pace::digamma(2.0), psi1 + 1.0, 1e-9);
}

TEST(Digamma, KnownClosedForms) {
  const double euler = 0.57721566490153286;
  EXPECT_NEAR(pace::digamma(1.0), -euler, 1e-12);
  EXPECT_NEAR(pace::digamma(2.0), 1.0 - euler, 1e-12);
  EXPECT_NEAR(pace::digamma(0.5), -euler - 2 * std::numbers::ln2, 1e-12);
}

TEST(Digamma, AgreesWithBoostAcrossRange) {
  for (double x : {1e-3, 0.01, 0.1, 0.7, 1.5, 3.0, 5.999, 6.0, 10.0, 123.4, 1e4, 1e6}) {
    EXPECT_NEAR(pace::digamma(x), oracle::digamma(x), 1e-10) << "x=" << x;
  }
}

TEST(Digamma, RecurrenceHoldsOnRandomPoints) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.1, 100.0);
  for (int i = 0; i < 1000; ++i) {
    const double x = u(rng);
    EXPECT_NEAR(pace::digamma(x + 1) - pace::digamma(x), 1.0 / x, 1e-10);
  }
}

TEST(Digamma, RejectsNonPositive) {
  EXPECT_THROW(pace::digamma(0.0), pace::DomainError);
  EXPECT_THROW(pace::digamma(-1.5), pace::DomainError);
  EXPECT_THROW(pace::digamma(NAN), pace::DomainError);
}

TEST(Cholesky, IdentityHasZeroLogDet) {
  const auto f = pace::cholesky_factor(pace::SpdMatrix::identity(3), 0.0);
  EXPECT_DOUBLE_EQ(f.log_det, 0.0);
}

TEST(Cholesky, DiagonalAndTwoByTwoLogDets) {
  Matrix d = Matrix::Zero(2, 2);
  d(0, 0) = 4;
  d(1, 1) = 9;
  EXPECT_NEAR(pace::cholesky_factor(pace::SpdMatrix(d), 0.0).log_det, std::log(4.0 * 9.0), 1e-12);

  Matrix m(2, 2);
  m << 2, 1, 1, 2;
  EXPECT_NEAR(pace::cholesky_factor(pace::SpdMatrix(m), 0.0).log_det, std::log(2.0 * 2.0 - 1.0), 1e-12);
}

TEST(Cholesky, RandomRoundTripReconstructs) {
  std::mt19937_64 rng(5);
  for (Eigen::Index d : {1, 2, 5, 17, 64}) {
    const Matrix a = oracle::random_spd(d, rng);
    for (double jitter : {0.0, 0.25}) {
      const auto f = pace::cholesky_factor(pace::SpdMatrix(a), jitter);
      const Matrix target = a + jitter * Matrix::Identity(d, d);
      const double rel = (f.lower * f.lower.transpose() - target).norm() / target.norm();
      EXPECT_LE(rel, 1e-9) << "d=" << d;
      EXPECT_NEAR(f.log_det, std::log(target.determinant()), 1e-8 * std::max(1.0, std::abs(f.log_det)));
    }
  }
}

TEST(Cholesky, IndefiniteMatrixRaisesSingularityWithConcept) {
  Matrix m(2, 2);
  m << 1, 2, 2, 1;
  try {
    pace::cholesky_factor(pace::SpdMatrix(m), 0.0, 3);
    FAIL() << "expected SingularityError";
  } catch (const pace::SingularityError& e) {
    ASSERT_TRUE(e.concept_index().has_value());
    EXPECT_EQ(*e.concept_index(), 3u);
  }
}

TEST(Cholesky, RegularizedFactorRescuesRankDeficient) {
  Matrix m = Matrix::Ones(3, 3);  // rank one
  const auto f = pace::factor_regularized(pace::SpdMatrix(m));
  EXPECT_GT(f.jitter, 0.0);
  EXPECT_TRUE(std::isfinite(f.log_det));
  const auto z = pace::factor_regularized(pace::SpdMatrix(Matrix::Zero(2, 2)));
  EXPECT_GT(z.jitter, 0.0);
}

TEST(SpdMatrix, RejectsAsymmetricAndNonSquare) {
  Matrix m(2, 2);
  m << 1, 0.5, 0.4, 1;
  EXPECT_THROW(pace::SpdMatrix{m}, pace::Error);
  EXPECT_THROW(pace::SpdMatrix{Matrix::Zero(2, 3)}, pace::Error);
}

TEST(LogGaussian, ReferenceValues) {
  const auto id2 = pace::cholesky_factor(pace::SpdMatrix::identity(2), 0.0);
  const Vector mu = Vector::Zero(2);
  EXPECT_NEAR(pace::log_gaussian(mu, mu, id2), -std::log(2 * std::numbers::pi), 1e-12);

  const auto one = pace::cholesky_factor(pace::SpdMatrix::identity(1), 0.0);
  EXPECT_NEAR(pace::log_gaussian(Vector::Constant(1, 1.0), Vector::Zero(1), one),
              -0.5 * std::log(2 * std::numbers::pi) - 0.5, 1e-12);

  const auto four = pace::cholesky_factor(pace::SpdMatrix(Matrix::Constant(1, 1, 4.0)), 0.0);
  EXPECT_NEAR(pace::log_gaussian(Vector::Zero(1), Vector::Zero(1), four),
              -0.5 * std::log(2 * std::numbers::pi) - 0.5 * std::log(4.0), 1e-12);
}

TEST(LogGaussian, AgreesWithDenseInverseOracle) {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 20; ++t) {
    const Matrix s = oracle::random_spd(4, rng);
    const Vector mu = oracle::random_matrix(1, 4, rng).row(0).transpose();
    const Vector e = oracle::random_matrix(1, 4, rng).row(0).transpose();
    const auto f = pace::cholesky_factor(pace::SpdMatrix(s), 0.0);
    EXPECT_NEAR(pace::log_gaussian(e, mu, f), oracle::log_gaussian(e, mu, s), 1e-10);
  }
}

TEST(LogGaussian, DimensionMismatchThrows) {
  const auto f = pace::cholesky_factor(pace::SpdMatrix::identity(2), 0.0);
  EXPECT_THROW(pace::log_gaussian(Vector::Zero(3), Vector::Zero(2), f), pace::ShapeError);
}

TEST(LogGaussian, SampleAverageMatchesNegativeEntropy) {
  std::mt19937_64 rng(21);
  const Matrix s = oracle::random_spd(3, rng);
  const Vector mu = Vector::Constant(3, 0.7);
  const auto f = pace::cholesky_factor(pace::SpdMatrix(s), 0.0);
  std::normal_distribution<double> n(0.0, 1.0);
  const int draws = 100000;
  double sum = 0, sum_sq = 0;
  for (int i = 0; i < draws; ++i) {
    Vector z(3);
    for (auto& v : z) v = n(rng);
    const double lp = pace::log_gaussian(mu + f.lower * z, mu, f);
    sum += lp;
    sum_sq += lp * lp;
  }
  const double mean = sum / draws;
  const double se = std::sqrt((sum_sq / draws - mean * mean) / draws);
  const double neg_entropy = -0.5 * 3 * (1 + std::log(2 * std::numbers::pi)) - 0.5 * std::log(s.determinant());
  EXPECT_NEAR(mean, neg_entropy, 3 * se);
}

TEST(LogSumExp, ReferenceValues) {
  EXPECT_NEAR(pace::log_sum_exp(Vector::Zero(2)), std::log(2.0), 1e-15);
  EXPECT_NEAR(pace::log_sum_exp(Vector::Constant(2, 1000.0)), 1000.0 + std::log(2.0), 1e-12);
  Vector v(2);
  v << 0.0, std::log(3.0);
  EXPECT_NEAR(pace::log_sum_exp(v), std::log(4.0), 1e-15);
}

TEST(LogSumExp, EmptyThrows) { EXPECT_THROW(pace::log_sum_exp(Vector()), pace::DomainError); }

TEST(LogSumExp, ShiftInvariance) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-50, 50);
  for (int t = 0; t < 200; ++t) {
    Vector v(7);
    for (auto& x : v) x = u(rng);
    const double c = u(rng);
    EXPECT_NEAR(pace::log_sum_exp(Vector(v.array() + c)), pace::log_sum_exp(v) + c, 1e-12);
  }
}

TEST(OrderedSum, IndependentOfInputOrder) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1e3, 1e3);
  std::vector<double> v(101);
  for (auto& x : v) x = u(rng) * std::pow(10.0, static_cast<int>(u(rng)) % 8);
  std::vector<double> a = v;
  const double ref = pace::ordered_sum(std::span<double>(a));
  for (int t = 0; t < 20; ++t) {
    std::shuffle(v.begin(), v.end(), rng);
    std::vector<double> b = v;
    EXPECT_EQ(pace::ordered_sum(std::span<double>(b)), ref);
  }
}

}  // namespace
