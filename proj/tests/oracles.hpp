#pragma once

// Independent reference implementations used only by the tests. They are
// written for clarity, not speed, and share no code with the library beyond
// its plain data types.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <boost/math/special_functions/digamma.hpp>
#include <Eigen/Dense>

#include "pace/model.hpp"

namespace oracle {

using pace::Matrix;
using pace::RowMatrix;
using pace::Vector;

inline double digamma(double x) { return boost::math::digamma(x); }

// Five-point central difference of std::lgamma.
inline double digamma_fd(double x, double h = 1e-4) {
  auto f = [](double t) { return std::lgamma(t); };
  return (-f(x + 2 * h) + 8 * f(x + h) - 8 * f(x - h) + f(x - 2 * h)) / (12 * h);
}

inline double log_gaussian(const Vector& e, const Vector& mu, const Matrix& cov) {
  const auto d = static_cast<double>(e.size());
  const Vector diff = e - mu;
  const double quad = diff.dot(cov.inverse() * diff);
  return -0.5 * quad - 0.5 * d * std::log(2 * std::numbers::pi) - 0.5 * std::log(cov.determinant());
}

inline double log_beta(const Vector& a) {
  double s = 0.0;
  for (Eigen::Index k = 0; k < a.size(); ++k) s += std::lgamma(a[k]);
  return s - std::lgamma(a.sum());
}

// Tempered evidence term written out term by term with plain loops.
inline double elbo_e(const Vector& alpha, const Vector& gamma, const RowMatrix& phi, const Vector& counts,
                     const RowMatrix& emb, const std::vector<Vector>& means, const std::vector<Matrix>& covs) {
  const auto K = alpha.size();
  const auto J = phi.rows();
  std::vector<double> elog(static_cast<std::size_t>(K));
  for (Eigen::Index k = 0; k < K; ++k) elog[static_cast<std::size_t>(k)] = digamma(gamma[k]) - digamma(gamma.sum());

  double prior = -log_beta(alpha);
  for (Eigen::Index k = 0; k < K; ++k) prior += (alpha[k] - 1) * elog[static_cast<std::size_t>(k)];

  double data = 0.0;
  for (Eigen::Index j = 0; j < J; ++j) {
    const Vector e = emb.row(j).transpose();
    for (Eigen::Index k = 0; k < K; ++k) {
      const auto kk = static_cast<std::size_t>(k);
      data += counts[j] * phi(j, k) * (elog[kk] + log_gaussian(e, means[kk], covs[kk]));
    }
  }

  double q_theta = -log_beta(gamma);
  for (Eigen::Index k = 0; k < K; ++k) q_theta += (gamma[k] - 1) * elog[static_cast<std::size_t>(k)];

  double q_z = 0.0;
  for (Eigen::Index j = 0; j < J; ++j) {
    for (Eigen::Index k = 0; k < K; ++k) {
      if (phi(j, k) > 0) q_z += phi(j, k) * std::log(phi(j, k));
    }
  }
  return prior + data - q_theta - q_z;
}

struct Moments {
  Vector mean;
  Matrix cov;
};

// Weighted first and second moments by a naive loop over images, patches.
inline Moments weighted_moments(const std::vector<RowMatrix>& emb, const std::vector<RowMatrix>& phi,
                                const std::vector<Vector>& counts, Eigen::Index k) {
  const auto d = emb.front().cols();
  double w = 0.0;
  Vector s = Vector::Zero(d);
  for (std::size_t m = 0; m < emb.size(); ++m) {
    for (Eigen::Index j = 0; j < emb[m].rows(); ++j) {
      const double wj = phi[m](j, k) * counts[m][j];
      w += wj;
      for (Eigen::Index a = 0; a < d; ++a) s[a] += wj * emb[m](j, a);
    }
  }
  const Vector mean = s / w;
  Matrix c = Matrix::Zero(d, d);
  for (std::size_t m = 0; m < emb.size(); ++m) {
    for (Eigen::Index j = 0; j < emb[m].rows(); ++j) {
      const double wj = phi[m](j, k) * counts[m][j];
      for (Eigen::Index a = 0; a < d; ++a) {
        for (Eigen::Index b = 0; b < d; ++b) {
          c(a, b) += wj * (emb[m](j, a) - mean[a]) * (emb[m](j, b) - mean[b]);
        }
      }
    }
  }
  return {mean, c / w};
}

inline double min_assignment_cost_bruteforce(const Matrix& cost) {
  std::vector<int> perm(static_cast<std::size_t>(cost.cols()));
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
  double best = INFINITY;
  do {
    double c = 0.0;
    for (Eigen::Index r = 0; r < cost.rows(); ++r) c += cost(r, perm[static_cast<std::size_t>(r)]);
    best = std::min(best, c);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

// Random helpers for building test instances.

inline Matrix random_spd(Eigen::Index d, std::mt19937_64& rng, double ridge = 1.0) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix a(d, d);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j) a(i, j) = n(rng);
  Matrix s = a * a.transpose() + ridge * Matrix::Identity(d, d);
  return 0.5 * (s + s.transpose());
}

inline Vector random_simplex(Eigen::Index k, std::mt19937_64& rng) {
  std::exponential_distribution<double> ex(1.0);
  Vector v(k);
  for (Eigen::Index i = 0; i < k; ++i) v[i] = ex(rng);
  return v / v.sum();
}

inline RowMatrix random_phi(Eigen::Index j, Eigen::Index k, std::mt19937_64& rng) {
  RowMatrix p(j, k);
  for (Eigen::Index r = 0; r < j; ++r) p.row(r) = random_simplex(k, rng).transpose();
  return p;
}

inline RowMatrix random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  RowMatrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = n(rng);
  return m;
}

inline pace::ConceptBank random_bank(std::size_t k, Eigen::Index d, std::mt19937_64& rng, double spread = 2.0) {
  pace::ConceptBank bank;
  std::uniform_real_distribution<double> u(0.3, 2.0);
  for (std::size_t i = 0; i < k; ++i) {
    bank.means.push_back(random_matrix(1, d, rng, spread).row(0).transpose());
    bank.covs.emplace_back(random_spd(d, rng, 0.5));
  }
  bank.alpha = Vector(static_cast<Eigen::Index>(k));
  for (Eigen::Index i = 0; i < bank.alpha.size(); ++i) bank.alpha[i] = u(rng);
  return bank;
}

inline pace::Patches random_patches(Eigen::Index j, Eigen::Index d, std::mt19937_64& rng, double spread = 2.0) {
  pace::Patches p;
  p.embeddings = random_matrix(j, d, rng, spread);
  std::uniform_real_distribution<double> u(0.1, 1.0);
  p.attentions = Vector(j);
  for (Eigen::Index i = 0; i < j; ++i) p.attentions[i] = u(rng);
  p.attentions /= p.attentions.sum();
  return p;
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& tag) {
  static std::mt19937_64 rng(std::random_device{}());
  auto dir = std::filesystem::temp_directory_path() / ("pace-test-" + tag + "-" + std::to_string(rng()));
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace oracle
