#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "pace/errors.hpp"

namespace pace {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
// Patch-major storage: row j is patch j.
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

inline double digamma_asymptotic(double x) {
  // Bernoulli terms B_2n / (2n x^2n) through x^-12.
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  const double series =
      inv2 * (1.0 / 12.0 -
              inv2 * (1.0 / 120.0 -
                      inv2 * (1.0 / 252.0 -
                              inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0))))));
  return std::log(x) - 0.5 * inv - series;
}

}  // namespace detail

/// Psi(x) = d/dx log Gamma(x) for x > 0.
///
/// Upward recurrence Psi(x) = Psi(x + 1) - 1/x until x >= 6, then the
/// asymptotic expansion. Absolute error is below 1e-12 on [1e-3, 1e6].
inline double digamma(double x) {
  if (!(x > 0.0) || !std::isfinite(x)) {
    throw DomainError("digamma: argument must be finite and positive, got " + std::to_string(x));
  }
  double shift = 0.0;
  while (x < 6.0) {
    shift += 1.0 / x;
    x += 1.0;
  }
  return detail::digamma_asymptotic(x) - shift;
}

inline double log_gamma(double x) {
  if (!(x > 0.0) || !std::isfinite(x)) {
    throw DomainError("log_gamma: argument must be finite and positive");
  }
  return std::lgamma(x);
}

/// Sum of `values` that does not depend on their order: the span is sorted in
/// place first. Concept-indexed reductions use this so relabeling concepts
/// relabels results bit-for-bit.
inline double ordered_sum(std::span<double> values) {
  std::sort(values.begin(), values.end());
  double total = 0.0;
  for (double v : values) total += v;
  return total;
}

inline double ordered_sum(const Vector& values) {
  std::vector<double> scratch(values.data(), values.data() + values.size());
  return ordered_sum(std::span<double>(scratch));
}

// Dot product whose value is invariant under a common permutation of a and b.
inline double ordered_dot(const Vector& a, const Vector& b) {
  std::vector<double> products(static_cast<std::size_t>(a.size()));
  for (Eigen::Index i = 0; i < a.size(); ++i) products[static_cast<std::size_t>(i)] = a[i] * b[i];
  return ordered_sum(std::span<double>(products));
}

/// log(sum_i exp(v_i)), max-shifted. Overwrites `v` with scratch values.
inline double log_sum_exp_inplace(std::span<double> v) {
  if (v.empty()) throw DomainError("log_sum_exp: empty input");
  const double top = *std::max_element(v.begin(), v.end());
  if (top == -std::numeric_limits<double>::infinity()) return top;
  for (double& x : v) x = std::exp(x - top);
  return top + std::log(ordered_sum(v));
}

inline double log_sum_exp(std::span<const double> v) {
  std::vector<double> scratch(v.begin(), v.end());
  return log_sum_exp_inplace(scratch);
}

inline double log_sum_exp(const Vector& v) {
  return log_sum_exp(std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
}

/// Symmetric positive (semi)definite matrix. Construction checks symmetry to
/// 1e-12 relative to the largest entry; definiteness is checked at
/// factorization time.
class SpdMatrix {
 public:
  SpdMatrix() = default;

  explicit SpdMatrix(Matrix m) : m_(std::move(m)) {
    if (m_.rows() != m_.cols() || m_.rows() == 0) {
      throw ShapeError("SpdMatrix: expected a non-empty square matrix");
    }
    if (!m_.allFinite()) throw DomainError("SpdMatrix: non-finite entry");
    const double scale = std::max(1.0, m_.cwiseAbs().maxCoeff());
    if ((m_ - m_.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
      throw DomainError("SpdMatrix: matrix is not symmetric");
    }
  }

  static SpdMatrix identity(Eigen::Index dim) { return SpdMatrix(Matrix::Identity(dim, dim)); }

  Eigen::Index dim() const { return m_.rows(); }
  const Matrix& matrix() const { return m_; }
  double trace() const { return m_.trace(); }

 private:
  Matrix m_;
};

struct CholeskyFactor {
  Matrix lower;          // L with L L^T = m + jitter I
  double log_det = 0.0;  // log |m + jitter I|
  double jitter = 0.0;

  Eigen::Index dim() const { return lower.rows(); }
};

/// Factor m + jitter*I. Throws SingularityError when a pivot is not positive.
inline CholeskyFactor cholesky_factor(const SpdMatrix& m, double jitter,
                                      std::optional<std::size_t> concept_index = std::nullopt) {
  if (!(jitter >= 0.0)) throw DomainError("cholesky_factor: jitter must be nonnegative");
  Matrix shifted = m.matrix();
  shifted.diagonal().array() += jitter;
  Eigen::LLT<Matrix> llt(shifted);
  if (llt.info() != Eigen::Success) {
    throw SingularityError("cholesky_factor: non-positive pivot", concept_index);
  }
  CholeskyFactor out;
  out.lower = llt.matrixL();
  const auto diag = out.lower.diagonal();
  if ((diag.array() <= 0.0).any() || !diag.allFinite()) {
    throw SingularityError("cholesky_factor: non-positive pivot", concept_index);
  }
  out.log_det = 2.0 * diag.array().log().sum();
  out.jitter = jitter;
  return out;
}

/// Scale-aware jitter, 1e-6 * trace/d (unit scale when the trace vanishes).
inline double default_jitter(const SpdMatrix& m) {
  const double mean_eig = m.trace() / static_cast<double>(m.dim());
  return 1e-6 * (mean_eig > 0.0 ? mean_eig : 1.0);
}

/// Factor as-is, retrying once with default_jitter() when that fails.
inline CholeskyFactor factor_regularized(const SpdMatrix& m,
                                         std::optional<std::size_t> concept_index = std::nullopt) {
  try {
    return cholesky_factor(m, 0.0, concept_index);
  } catch (const SingularityError&) {
    return cholesky_factor(m, default_jitter(m), concept_index);
  }
}

/// (e - mean)^T S^{-1} (e - mean) through the factor of S.
inline double mahalanobis_sq(const Vector& e, const Vector& mean, const CholeskyFactor& cov) {
  if (e.size() != mean.size() || e.size() != cov.dim()) {
    throw ShapeError("mahalanobis_sq: dimension mismatch (e=" + std::to_string(e.size()) +
                     ", mean=" + std::to_string(mean.size()) +
                     ", cov=" + std::to_string(cov.dim()) + ")");
  }
  const Vector y = cov.lower.triangularView<Eigen::Lower>().solve(e - mean);
  return y.squaredNorm();
}

inline double log_gaussian(const Vector& e, const Vector& mean, const CholeskyFactor& cov) {
  const double d = static_cast<double>(e.size());
  return -0.5 * mahalanobis_sq(e, mean, cov) - 0.5 * d * std::log(2.0 * std::numbers::pi) -
         0.5 * cov.log_det;
}

}  // namespace pace
