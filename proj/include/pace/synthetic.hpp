#pragma once

#include <algorithm>
#include <limits>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pace/errors.hpp"
#include "pace/inference.hpp"
#include "pace/model.hpp"
#include "pace/numkit.hpp"

#include <Eigen/QR>

namespace pace {

using IndexMatrix = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Latent variables behind a synthetic dataset. Never passed to fit.
struct GroundTruth {
  ConceptBank bank;
  RowMatrix theta;  // M x K
  IndexMatrix z;    // M x J, concept index per patch
  HeadParams head;  // label model (empty for the color data)

  // Color data only: palette names, their RGB rows and the d x 3 encoder.
  std::vector<std::string> palette;
  RowMatrix palette_rgb;
  Matrix encoder;
};

inline Vector sample_dirichlet(const Vector& alpha, std::mt19937_64& rng) {
  Vector out(alpha.size());
  for (Eigen::Index k = 0; k < alpha.size(); ++k) {
    std::gamma_distribution<double> g(alpha[k], 1.0);
    out[k] = g(rng);
  }
  const double total = out.sum();
  if (total > 0.0) return out / total;
  // Every gamma draw underflowed (tiny alpha): put the mass on the largest alpha.
  Eigen::Index top = 0;
  alpha.maxCoeff(&top);
  out.setZero();
  out[top] = 1.0;
  return out;
}

inline std::size_t sample_categorical(const Vector& probs, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double u = unit(rng) * probs.sum();
  double running = 0.0;
  for (Eigen::Index k = 0; k < probs.size(); ++k) {
    running += probs[k];
    if (u < running) return static_cast<std::size_t>(k);
  }
  for (Eigen::Index k = probs.size() - 1; k >= 0; --k) {
    if (probs[k] > 0.0) return static_cast<std::size_t>(k);
  }
  return 0;
}

inline Vector sample_gaussian(const Vector& mean, const CholeskyFactor& cov, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector xi(mean.size());
  for (Eigen::Index i = 0; i < xi.size(); ++i) xi[i] = normal(rng);
  return mean + cov.lower * xi;
}

/// Label draw from the softmax GLM over eta_n^T zbar.
inline int sample_label(const Vector& zbar, const HeadParams& head, std::mt19937_64& rng) {
  return static_cast<int>(sample_categorical(softmax(head.eta * zbar), rng));
}

/// sqrt of the mean covariance eigenvalue over all concepts.
inline double concept_scale(const ConceptBank& bank) {
  double total = 0.0;
  for (const auto& c : bank.covs) total += c.trace() / static_cast<double>(c.dim());
  return std::sqrt(total / static_cast<double>(bank.num_concepts()));
}

struct PerturbOptions {
  double noise_sigma = 0.0;
  bool jitter_attention = true;
  double attention_jitter = 0.1;  // relative, uniform in [-x, x]
};

/// Embedding-space stand-in for an augmented view of the same image: isotropic
/// Gaussian noise on every embedding and a small multiplicative jitter on the
/// attentions, renormalized to their original total.
inline Patches perturb(const Patches& patches, const PerturbOptions& opt, std::mt19937_64& rng) {
  if (!(opt.noise_sigma >= 0.0)) throw DomainError("perturb: noise_sigma must be nonnegative");
  Patches out = patches;
  if (opt.noise_sigma > 0.0) {
    std::normal_distribution<double> normal(0.0, opt.noise_sigma);
    for (Eigen::Index j = 0; j < out.embeddings.rows(); ++j) {
      for (Eigen::Index c = 0; c < out.embeddings.cols(); ++c) out.embeddings(j, c) += normal(rng);
    }
  }
  if (opt.jitter_attention) {
    std::uniform_real_distribution<double> jitter(-opt.attention_jitter, opt.attention_jitter);
    const double before = patches.attentions.sum();
    for (Eigen::Index j = 0; j < out.attentions.size(); ++j) out.attentions[j] *= 1.0 + jitter(rng);
    const double after = out.attentions.sum();
    if (after > 0.0) out.attentions *= before / after;
  }
  return out;
}

namespace detail {

inline std::vector<Split> eight_two_split(std::size_t m, std::mt19937_64& rng) {
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(m)));
  std::vector<Split> splits(m, Split::kTest);
  for (std::size_t i = 0; i < n_train; ++i) splits[order[i]] = Split::kTrain;
  return splits;
}

inline std::string image_id(std::size_t m) {
  std::string digits = std::to_string(m);
  return "img-" + std::string(digits.size() < 5 ? 5 - digits.size() : 0, '0') + digits;
}

}  // namespace detail

struct GenerativeOptions {
  std::optional<double> perturb_sigma;  // default 0.1 * concept_scale(bank)
  bool with_twins = true;
};

/// Exact draw from the generative model: theta ~ Dir(alpha), z ~ Cat(theta),
/// e ~ N(mu_z, Sigma_z), uniform attentions, label ~ GLM(zbar, eta).
inline std::pair<Dataset, GroundTruth> sample_generative(const ConceptBank& bank, const HeadParams& head,
                                                         std::size_t num_images, std::size_t num_patches,
                                                         std::mt19937_64& rng,
                                                         const GenerativeOptions& opt = {}) {
  bank.validate();
  if (num_images == 0 || num_patches == 0) throw ContractError("sample_generative: M and J must be positive");
  if (head.num_classes() < 1 || head.num_concepts() != bank.num_concepts()) {
    throw ShapeError("sample_generative: head does not match the bank");
  }
  const auto K = static_cast<Eigen::Index>(bank.num_concepts());
  const auto J = static_cast<Eigen::Index>(num_patches);
  const auto M = static_cast<Eigen::Index>(num_images);
  std::vector<CholeskyFactor> factors;
  for (std::size_t k = 0; k < bank.num_concepts(); ++k) factors.push_back(factor_regularized(bank.covs[k], k));

  const PerturbOptions popt{opt.perturb_sigma.value_or(0.1 * concept_scale(bank)), true, 0.1};

  Dataset data;
  data.num_classes = head.num_classes();
  GroundTruth truth;
  truth.bank = bank;
  truth.head = head;
  truth.theta.resize(M, K);
  truth.z.resize(M, J);

  for (Eigen::Index m = 0; m < M; ++m) {
    const Vector theta = sample_dirichlet(bank.alpha, rng);
    truth.theta.row(m) = theta.transpose();
    ImageRecord rec;
    rec.id = detail::image_id(static_cast<std::size_t>(m));
    rec.patches.embeddings.resize(J, bank.dim());
    rec.patches.attentions = Vector::Constant(J, 1.0 / static_cast<double>(J));
    Vector zbar = Vector::Zero(K);
    for (Eigen::Index j = 0; j < J; ++j) {
      const auto z = sample_categorical(theta, rng);
      truth.z(m, j) = static_cast<std::int64_t>(z);
      zbar[static_cast<Eigen::Index>(z)] += 1.0 / static_cast<double>(J);
      rec.patches.embeddings.row(j) = sample_gaussian(bank.means[z], factors[z], rng).transpose();
    }
    rec.predicted_label = sample_label(zbar, head, rng);
    if (opt.with_twins) rec.perturbed = perturb(rec.patches, popt, rng);
    data.records.push_back(std::move(rec));
  }
  data.splits = detail::eight_two_split(num_images, rng);
  return {std::move(data), std::move(truth)};
}

/// K concepts with means pairwise at least `separation * sigma` apart and
/// mildly anisotropic covariances whose mean eigenvalue is sigma^2.
inline ConceptBank make_separated_bank(std::size_t k, std::size_t d, double separation, double sigma,
                                       double alpha, std::mt19937_64& rng) {
  if (k == 0 || d == 0) throw ContractError("make_separated_bank: K and d must be positive");
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto dd = static_cast<Eigen::Index>(d);
  ConceptBank bank;
  const double min_dist = separation * sigma;
  for (int attempt = 0; bank.means.size() < k; ++attempt) {
    if (attempt > 100000) throw ContractError("make_separated_bank: could not place separated means");
    Vector cand(dd);
    for (auto i = 0; i < dd; ++i) cand[i] = normal(rng) * min_dist;
    bool ok = true;
    for (const auto& mu : bank.means) ok = ok && (mu - cand).norm() >= min_dist;
    if (ok) bank.means.push_back(cand);
  }
  std::uniform_real_distribution<double> spread(0.5, 1.5);
  for (std::size_t i = 0; i < k; ++i) {
    Matrix g(dd, dd);
    for (auto r = 0; r < dd; ++r)
      for (auto c = 0; c < dd; ++c) g(r, c) = normal(rng);
    const Eigen::HouseholderQR<Matrix> qr(g);
    const Matrix q = qr.householderQ();
    Vector eig(dd);
    for (auto r = 0; r < dd; ++r) eig[r] = spread(rng);
    eig *= static_cast<double>(dd) / eig.sum();
    Matrix cov = sigma * sigma * q * eig.asDiagonal() * q.transpose();
    cov = 0.5 * (cov + cov.transpose());
    bank.covs.emplace_back(cov);
  }
  bank.alpha = Vector::Constant(static_cast<Eigen::Index>(k), alpha);
  return bank;
}

struct ColorOptions {
  std::size_t num_patches = 16;  // S x S grid with S even
  std::size_t dim = 16;
  double noise_sigma = 0.1;
  std::uint64_t encoder_seed = 0x5eed'c010'0000'0001ULL;
  bool with_twins = true;
  std::optional<double> perturb_sigma;  // default 0.1 * noise_sigma
};

namespace color {

inline constexpr std::array<const char*, 5> kNames{"red", "yellow", "green", "blue", "black"};
inline constexpr std::array<std::array<double, 3>, 5> kRgb{{{1, 0, 0}, {1, 1, 0}, {0, 1, 0}, {0, 0, 1}, {0, 0, 0}}};
inline constexpr std::size_t kBlack = 4;
// Palette indices available to each class.
inline constexpr std::array<std::array<std::size_t, 3>, 2> kClassPalette{{{0, 1, 4}, {2, 3, 4}}};

/// Fixed Gaussian d x 3 map from RGB to embedding space.
inline Matrix encoder(std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix w(static_cast<Eigen::Index>(dim), 3);
  for (Eigen::Index r = 0; r < w.rows(); ++r)
    for (Eigen::Index c = 0; c < 3; ++c) w(r, c) = normal(rng);
  return w;
}

inline Vector rgb(std::size_t index) {
  return Vector{{kRgb[index][0], kRgb[index][1], kRgb[index][2]}};
}

}  // namespace color

/// Two-class "flat color" dataset. Each image is a 2x2 grid of color cells
/// (class 0 draws from red/yellow/black, class 1 from green/blue/black, never
/// all black); each cell covers a (S/2) x (S/2) block of patches whose
/// embeddings are encoder * rgb plus Gaussian noise.
inline std::pair<Dataset, GroundTruth> make_color_dataset(std::size_t num_images, std::mt19937_64& rng,
                                                          const ColorOptions& opt = {}) {
  if (num_images == 0 || num_images % 2 != 0) {
    throw ContractError("make_color_dataset: M must be even and positive");
  }
  const auto J = static_cast<Eigen::Index>(opt.num_patches);
  const auto side = static_cast<Eigen::Index>(std::llround(std::sqrt(static_cast<double>(J))));
  if (side * side != J || side % 2 != 0) {
    throw ContractError("make_color_dataset: J must be an even perfect square");
  }
  const auto half = side / 2;
  const auto d = static_cast<Eigen::Index>(opt.dim);
  const Matrix w = color::encoder(opt.dim, opt.encoder_seed);
  const std::size_t P = color::kNames.size();

  GroundTruth truth;
  truth.encoder = w;
  truth.palette_rgb.resize(static_cast<Eigen::Index>(P), 3);
  for (std::size_t p = 0; p < P; ++p) {
    truth.palette.emplace_back(color::kNames[p]);
    truth.palette_rgb.row(static_cast<Eigen::Index>(p)) = color::rgb(p).transpose();
    truth.bank.means.push_back(w * color::rgb(p));
    truth.bank.covs.emplace_back(Matrix(opt.noise_sigma * opt.noise_sigma * Matrix::Identity(d, d)));
  }
  truth.bank.alpha = Vector::Ones(static_cast<Eigen::Index>(P));
  truth.theta.resize(static_cast<Eigen::Index>(num_images), static_cast<Eigen::Index>(P));
  truth.z.resize(static_cast<Eigen::Index>(num_images), J);

  std::vector<int> classes(num_images);
  for (std::size_t m = 0; m < num_images; ++m) classes[m] = m < num_images / 2 ? 0 : 1;
  std::shuffle(classes.begin(), classes.end(), rng);

  const PerturbOptions popt{opt.perturb_sigma.value_or(0.1 * opt.noise_sigma), true, 0.1};
  std::normal_distribution<double> noise(0.0, opt.noise_sigma);
  std::uniform_int_distribution<std::size_t> pick(0, 2);

  Dataset data;
  data.num_classes = 2;
  for (std::size_t m = 0; m < num_images; ++m) {
    const int cls = classes[m];
    std::array<std::size_t, 4> cells{};
    do {
      for (auto& c : cells) c = color::kClassPalette[static_cast<std::size_t>(cls)][pick(rng)];
    } while (std::all_of(cells.begin(), cells.end(), [](std::size_t c) { return c == color::kBlack; }));

    ImageRecord rec;
    rec.id = detail::image_id(m);
    rec.predicted_label = cls;
    rec.patches.embeddings.resize(J, d);
    rec.patches.attentions = Vector::Constant(J, 1.0 / static_cast<double>(J));
    Vector proportions = Vector::Zero(static_cast<Eigen::Index>(P));
    for (Eigen::Index r = 0; r < side; ++r) {
      for (Eigen::Index c = 0; c < side; ++c) {
        const auto j = r * side + c;
        const auto cell = cells[static_cast<std::size_t>((r / half) * 2 + c / half)];
        Vector e = truth.bank.means[cell];
        for (Eigen::Index i = 0; i < d; ++i) e[i] += noise(rng);
        rec.patches.embeddings.row(j) = e.transpose();
        truth.z(static_cast<Eigen::Index>(m), j) = static_cast<std::int64_t>(cell);
        proportions[static_cast<Eigen::Index>(cell)] += 1.0 / static_cast<double>(J);
      }
    }
    truth.theta.row(static_cast<Eigen::Index>(m)) = proportions.transpose();
    if (opt.with_twins) rec.perturbed = perturb(rec.patches, popt, rng);
    data.records.push_back(std::move(rec));
  }
  data.splits = detail::eight_two_split(num_images, rng);
  return {std::move(data), std::move(truth)};
}

/// Index of the palette color whose encoding is nearest to `mean`.
inline std::size_t nearest_palette_color(const Vector& mean, const GroundTruth& truth) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index p = 0; p < truth.palette_rgb.rows(); ++p) {
    const double dist = (truth.encoder * truth.palette_rgb.row(p).transpose() - mean).squaredNorm();
    if (dist < best_d) {
      best_d = dist;
      best = static_cast<std::size_t>(p);
    }
  }
  return best;
}

}  // namespace pace
