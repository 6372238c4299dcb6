#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pace/errors.hpp"
#include "pace/numkit.hpp"

namespace pace {

/// K Gaussian concepts over patch-embedding space plus the Dirichlet prior
/// on per-image concept proportions.
struct ConceptBank {
  std::vector<Vector> means;
  std::vector<SpdMatrix> covs;
  Vector alpha;

  std::size_t num_concepts() const { return means.size(); }
  Eigen::Index dim() const { return means.empty() ? 0 : means.front().size(); }

  void validate() const {
    const std::size_t k = means.size();
    if (k == 0) throw ContractError("ConceptBank: K must be at least 1");
    if (covs.size() != k || static_cast<std::size_t>(alpha.size()) != k) {
      throw ShapeError("ConceptBank: means, covs and alpha disagree on K");
    }
    const auto d = dim();
    for (std::size_t i = 0; i < k; ++i) {
      if (means[i].size() != d || covs[i].dim() != d) {
        throw ShapeError("ConceptBank: concept " + std::to_string(i) + " has wrong dimension");
      }
      if (!means[i].allFinite()) throw DomainError("ConceptBank: non-finite mean");
    }
    if (!(alpha.array() > 0.0).all() || !alpha.allFinite()) {
      throw DomainError("ConceptBank: alpha must be positive");
    }
  }
};

/// ConceptBank with every covariance factored once. Inference reads only this.
class FactoredBank {
 public:
  explicit FactoredBank(ConceptBank bank) : bank_(std::move(bank)) {
    bank_.validate();
    factors_.reserve(bank_.num_concepts());
    for (std::size_t k = 0; k < bank_.num_concepts(); ++k) {
      factors_.push_back(factor_regularized(bank_.covs[k], k));
    }
  }

  const ConceptBank& bank() const { return bank_; }
  std::size_t num_concepts() const { return bank_.num_concepts(); }
  Eigen::Index dim() const { return bank_.dim(); }
  const Vector& alpha() const { return bank_.alpha; }
  const Vector& mean(std::size_t k) const { return bank_.means[k]; }
  const CholeskyFactor& factor(std::size_t k) const { return factors_[k]; }

  double log_density(std::size_t k, const Vector& e) const {
    return log_gaussian(e, bank_.means[k], factors_[k]);
  }

 private:
  ConceptBank bank_;
  std::vector<CholeskyFactor> factors_;
};

/// Observed content of one image: J patch embeddings and their attentions.
struct Patches {
  RowMatrix embeddings;  // J x d
  Vector attentions;     // J

  Eigen::Index num_patches() const { return embeddings.rows(); }
  Eigen::Index dim() const { return embeddings.cols(); }

  void validate() const {
    if (embeddings.rows() < 1) throw ContractError("image record has no patches (J = 0)");
    if (attentions.size() != embeddings.rows()) {
      throw ShapeError("attention length " + std::to_string(attentions.size()) +
                       " does not match J = " + std::to_string(embeddings.rows()));
    }
    if (!embeddings.allFinite()) throw DomainError("non-finite patch embedding");
    if (!attentions.allFinite() || (attentions.array() < 0.0).any()) {
      throw DomainError("attentions must be finite and nonnegative");
    }
  }
};

struct ImageRecord {
  std::string id;
  Patches patches;
  int predicted_label = 0;
  // Perturbed twin; carries the same predicted label.
  std::optional<Patches> perturbed;

  void validate() const {
    patches.validate();
    if (predicted_label < 0) throw ContractError("predicted label must be nonnegative");
    if (perturbed) {
      perturbed->validate();
      if (perturbed->num_patches() != patches.num_patches() || perturbed->dim() != patches.dim()) {
        throw ShapeError("perturbed twin of '" + id + "' has a different shape");
      }
    }
  }
};

enum class Split { kTrain, kTest };

inline std::string_view to_string(Split s) { return s == Split::kTrain ? "train" : "test"; }

struct Dataset {
  std::vector<ImageRecord> records;
  std::vector<Split> splits;  // parallel to records
  std::size_t num_classes = 0;

  std::size_t size() const { return records.size(); }
  Eigen::Index dim() const { return records.empty() ? 0 : records.front().patches.dim(); }
  Eigen::Index patches_per_image() const {
    return records.empty() ? 0 : records.front().patches.num_patches();
  }
  bool has_perturbed() const {
    if (records.empty()) return false;
    for (const auto& r : records) {
      if (!r.perturbed) return false;
    }
    return true;
  }

  std::vector<std::size_t> indices(Split which) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < splits.size(); ++i) {
      if (splits[i] == which) out.push_back(i);
    }
    return out;
  }

  std::vector<ImageRecord> subset(Split which) const {
    std::vector<ImageRecord> out;
    for (auto i : indices(which)) out.push_back(records[i]);
    return out;
  }

  void validate() const {
    if (records.empty()) throw ContractError("dataset is empty");
    if (splits.size() != records.size()) throw ShapeError("split flags do not match record count");
    const auto d = dim();
    for (const auto& r : records) {
      r.validate();
      if (r.patches.dim() != d) throw ShapeError("records disagree on embedding dimension");
      if (static_cast<std::size_t>(r.predicted_label) >= num_classes) {
        throw ContractError("label " + std::to_string(r.predicted_label) + " of '" + r.id +
                            "' is outside [0, " + std::to_string(num_classes) + ")");
      }
    }
  }
};

/// Per-image variational parameters: Dirichlet gamma and J x K responsibilities.
struct VariationalState {
  Vector gamma;
  RowMatrix phi;

  // Row-by-row accumulation so every concept sees the same summation order.
  Vector phi_bar() const {
    Vector bar = Vector::Zero(phi.cols());
    for (Eigen::Index j = 0; j < phi.rows(); ++j) bar += phi.row(j).transpose();
    return bar / static_cast<double>(phi.rows());
  }

  void validate(double tol = 1e-9) const {
    if (phi.cols() != gamma.size()) throw ShapeError("VariationalState: phi/gamma disagree on K");
    if (!(gamma.array() > 0.0).all()) throw DomainError("VariationalState: gamma must be positive");
    if ((phi.array() < 0.0).any()) throw DomainError("VariationalState: negative responsibility");
    for (Eigen::Index j = 0; j < phi.rows(); ++j) {
      if (std::abs(phi.row(j).sum() - 1.0) > tol) {
        throw DomainError("VariationalState: phi row " + std::to_string(j) + " is not on the simplex");
      }
    }
  }
};

/// GLM class weights (row n = eta_n) and the stability weights beta.
struct HeadParams {
  Matrix eta;   // N x K
  Vector beta;  // K

  static HeadParams zeros(std::size_t num_classes, std::size_t num_concepts) {
    return {Matrix::Zero(static_cast<Eigen::Index>(num_classes), static_cast<Eigen::Index>(num_concepts)),
            Vector::Zero(static_cast<Eigen::Index>(num_concepts))};
  }

  std::size_t num_classes() const { return static_cast<std::size_t>(eta.rows()); }
  std::size_t num_concepts() const { return static_cast<std::size_t>(beta.size()); }

  void validate(bool constrained = false) const {
    if (eta.cols() != beta.size()) throw ShapeError("HeadParams: eta and beta disagree on K");
    if (!eta.allFinite() || !beta.allFinite()) throw DomainError("HeadParams: non-finite entry");
    if (constrained) {
      if ((eta.array().abs() > 1.0).any()) throw DomainError("HeadParams: eta outside [-1, 1]");
      if ((beta.array() < 0.0).any() || (beta.array() > 1.0).any()) {
        throw DomainError("HeadParams: beta outside [0, 1]");
      }
    }
  }
};

enum class AttentionRescale { kSumToJ, kRaw, kUniform };

inline std::string_view to_string(AttentionRescale mode) {
  switch (mode) {
    case AttentionRescale::kSumToJ: return "sum-to-j";
    case AttentionRescale::kRaw: return "raw";
    case AttentionRescale::kUniform: return "uniform";
  }
  return "sum-to-j";
}

inline AttentionRescale parse_attention_rescale(std::string_view s) {
  if (s == "sum-to-j") return AttentionRescale::kSumToJ;
  if (s == "raw") return AttentionRescale::kRaw;
  if (s == "uniform") return AttentionRescale::kUniform;
  throw ContractError("unknown attention mode '" + std::string(s) + "'");
}

enum class CovarianceKind { kFull, kDiagonal };

struct TrainConfig {
  std::size_t num_concepts = 8;
  std::size_t epochs = 30;
  AttentionRescale attention = AttentionRescale::kSumToJ;
  double head_learning_rate = 0.05;
  std::size_t negatives_per_image = 32;
  std::size_t inference_max_iters = 100;
  double inference_rel_tol = 1e-5;
  bool constraint_mode = false;
  std::uint64_t rng_seed = 0;

  // Extra knobs.
  std::size_t sweeps_per_epoch = 1;
  bool train_heads = true;
  bool heads_in_inference = true;
  bool twins_in_mstep = false;
  CovarianceKind covariance = CovarianceKind::kFull;
  std::size_t init_subsample = 10000;
  std::size_t lloyd_iters = 10;
  std::size_t num_threads = 1;

  void validate() const {
    if (num_concepts < 1) throw ContractError("K must be at least 1");
    if (epochs < 1) throw ContractError("epochs must be at least 1");
    if (!(head_learning_rate > 0.0)) throw ContractError("head learning rate must be positive");
    if (!(inference_rel_tol > 0.0)) throw ContractError("inference tolerance must be positive");
    if (inference_max_iters < 1) throw ContractError("inference_max_iters must be at least 1");
    if (sweeps_per_epoch < 1) throw ContractError("sweeps_per_epoch must be at least 1");
    if (num_threads < 1) throw ContractError("num_threads must be at least 1");
  }
};

/// Image-level explanation: the Dirichlet mean gamma / sum(gamma).
inline Vector theta_from_gamma(const Vector& gamma) {
  if (gamma.size() == 0) throw DomainError("theta_from_gamma: empty gamma");
  if (!(gamma.array() > 0.0).all() || !gamma.allFinite()) {
    throw DomainError("theta_from_gamma: gamma entries must be positive");
  }
  return gamma / ordered_sum(gamma);
}

/// Virtual patch counts substituted for the raw attentions in every update.
inline Vector effective_counts(const Patches& patches, AttentionRescale mode) {
  const auto j = patches.num_patches();
  switch (mode) {
    case AttentionRescale::kRaw:
      return patches.attentions;
    case AttentionRescale::kUniform:
      return Vector::Ones(j);
    case AttentionRescale::kSumToJ: {
      const double total = patches.attentions.sum();
      if (!(total > 0.0)) throw DegenerateError("attention weights sum to zero");
      return patches.attentions * (static_cast<double>(j) / total);
    }
  }
  return patches.attentions;
}

}  // namespace pace
