#pragma once

// Per-image variational E-step.
//
// Each patch is weighted by its virtual count c_j (see effective_counts). The
// evidence term used throughout is
//
//   L_e = log B(alpha)^-1 + sum_k (alpha_k - 1) E[log theta_k]
//       + sum_j c_j sum_k phi_jk (E[log theta_k] + log N(e_j | mu_k, Sigma_k))
//       - log B(gamma)^-1 - sum_k (gamma_k - 1) E[log theta_k]
//       - sum_j sum_k phi_jk log phi_jk,
//
// with E[log theta_k] = Psi(gamma_k) - Psi(sum gamma). update_phi and
// update_gamma are its exact coordinate maximizers, so with unit counts they
// reduce to the textbook Dirichlet-categorical-Gaussian updates.

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pace/errors.hpp"
#include "pace/model.hpp"
#include "pace/numkit.hpp"

namespace pace {

/// J x K table of log N(e_j | mu_k, Sigma_k).
inline RowMatrix log_densities(const Patches& patches, const FactoredBank& bank) {
  if (patches.dim() != bank.dim()) {
    throw ShapeError("embedding dimension " + std::to_string(patches.dim()) +
                     " does not match concept dimension " + std::to_string(bank.dim()));
  }
  const auto j_count = patches.num_patches();
  const auto k_count = static_cast<Eigen::Index>(bank.num_concepts());
  RowMatrix out(j_count, k_count);
  Vector e(patches.dim());
  for (Eigen::Index j = 0; j < j_count; ++j) {
    e = patches.embeddings.row(j).transpose();
    for (Eigen::Index k = 0; k < k_count; ++k) {
      out(j, k) = bank.log_density(static_cast<std::size_t>(k), e);
    }
  }
  return out;
}

/// E_q[log theta_k] = Psi(gamma_k) - Psi(sum gamma).
inline Vector expected_log_theta(const Vector& gamma) {
  const double psi_total = digamma(ordered_sum(gamma));
  Vector out(gamma.size());
  for (Eigen::Index k = 0; k < gamma.size(); ++k) out[k] = digamma(gamma[k]) - psi_total;
  return out;
}

/// Uniform phi and gamma = alpha + (total count)/K.
inline VariationalState initial_state(const Vector& alpha, const Vector& counts) {
  const auto k = alpha.size();
  VariationalState s;
  s.phi = RowMatrix::Constant(counts.size(), k, 1.0 / static_cast<double>(k));
  s.gamma = alpha.array() + counts.sum() / static_cast<double>(k);
  return s;
}

inline double elbo_e(const VariationalState& state, const Vector& alpha, const RowMatrix& log_dens,
                     const Vector& counts) {
  const auto k_count = alpha.size();
  if (state.gamma.size() != k_count || state.phi.cols() != k_count || log_dens.cols() != k_count) {
    throw ShapeError("elbo_e: concept counts disagree");
  }
  if (state.phi.rows() != log_dens.rows() || counts.size() != log_dens.rows()) {
    throw ShapeError("elbo_e: patch counts disagree");
  }
  const Vector elog = expected_log_theta(state.gamma);

  std::vector<double> terms;
  terms.reserve(static_cast<std::size_t>(k_count));

  // Dirichlet prior on theta.
  double prior = log_gamma(ordered_sum(alpha));
  for (Eigen::Index k = 0; k < k_count; ++k) {
    terms.push_back((alpha[k] - 1.0) * elog[k] - log_gamma(alpha[k]));
  }
  prior += ordered_sum(terms);

  // Negative entropy of q(theta | gamma).
  terms.clear();
  double q_theta = -log_gamma(ordered_sum(state.gamma));
  for (Eigen::Index k = 0; k < k_count; ++k) {
    terms.push_back(log_gamma(state.gamma[k]) - (state.gamma[k] - 1.0) * elog[k]);
  }
  q_theta += ordered_sum(terms);

  double patches = 0.0;
  for (Eigen::Index j = 0; j < state.phi.rows(); ++j) {
    terms.clear();
    for (Eigen::Index k = 0; k < k_count; ++k) {
      const double p = state.phi(j, k);
      if (p <= 0.0) continue;
      terms.push_back(counts[j] * p * (elog[k] + log_dens(j, k)) - p * std::log(p));
    }
    patches += ordered_sum(terms);
  }
  return prior + q_theta + patches;
}

inline double elbo_e(const Patches& patches, const VariationalState& state, const FactoredBank& bank,
                     const Vector& counts) {
  return elbo_e(state, bank.alpha(), log_densities(patches, bank), counts);
}

/// Logits eta_n^T phi_bar for every class.
inline Vector class_logits(const Vector& phi_bar, const HeadParams& head) {
  if (head.eta.cols() != phi_bar.size()) throw ShapeError("class_logits: K mismatch");
  Vector out(head.eta.rows());
  for (Eigen::Index n = 0; n < head.eta.rows(); ++n) {
    out[n] = ordered_dot(head.eta.row(n).transpose(), phi_bar);
  }
  return out;
}

inline Vector softmax(const Vector& logits) {
  const double lse = log_sum_exp(logits);
  return (logits.array() - lse).exp().matrix();
}

/// Faithfulness term at the mean-field point phi_bar.
inline double elbo_f(const Vector& phi_bar, int label, const HeadParams& head) {
  if (label < 0 || static_cast<std::size_t>(label) >= head.num_classes()) {
    throw ShapeError("elbo_f: label " + std::to_string(label) + " outside [0, " +
                     std::to_string(head.num_classes()) + ")");
  }
  const Vector logits = class_logits(phi_bar, head);
  return logits[label] - log_sum_exp(logits);
}

inline double elbo_f(const VariationalState& state, int label, const HeadParams& head) {
  return elbo_f(state.phi_bar(), label, head);
}

inline double stability_logit(const Vector& beta, const Vector& a, const Vector& b) {
  return ordered_dot(beta, a.cwiseProduct(b));
}

/// Contrastive stability term: the perturbed twin against the negatives.
inline double elbo_s(const Vector& phi_bar, const Vector& phi_bar_perturbed,
                     std::span<const Vector> negative_phi_bars, const Vector& beta) {
  if (negative_phi_bars.empty()) throw DomainError("elbo_s: negative set is empty");
  if (phi_bar.size() != beta.size() || phi_bar_perturbed.size() != beta.size()) {
    throw ShapeError("elbo_s: K mismatch");
  }
  std::vector<double> logits;
  logits.reserve(negative_phi_bars.size());
  for (const auto& f : negative_phi_bars) {
    if (f.size() != beta.size()) throw ShapeError("elbo_s: K mismatch in negative");
    logits.push_back(stability_logit(beta, phi_bar, f));
  }
  return stability_logit(beta, phi_bar, phi_bar_perturbed) - log_sum_exp_inplace(logits);
}

inline double elbo_s(const VariationalState& anchor, const VariationalState& perturbed,
                     std::span<const VariationalState> negatives, const HeadParams& head) {
  std::vector<Vector> bars;
  bars.reserve(negatives.size());
  for (const auto& s : negatives) bars.push_back(s.phi_bar());
  return elbo_s(anchor.phi_bar(), perturbed.phi_bar(), bars, head.beta);
}

/// What update_phi needs to add the linearized label and stability terms.
struct HeadInputs {
  const HeadParams* head = nullptr;
  int label = 0;
  // Both absent for images without a perturbed twin: the stability term is dropped.
  std::optional<Vector> phi_bar_perturbed;
  std::vector<Vector> negative_phi_bars;

  bool has_stability() const { return phi_bar_perturbed.has_value() && !negative_phi_bars.empty(); }
};

/// Gradient of L_f + L_s with respect to phi_bar, evaluated at `anchor`.
inline Vector head_phi_gradient(const Vector& anchor, const HeadInputs& in) {
  const HeadParams& head = *in.head;
  if (in.label < 0 || static_cast<std::size_t>(in.label) >= head.num_classes()) {
    throw ShapeError("update_phi: label outside the head's class range");
  }
  const Vector p = softmax(class_logits(anchor, head));
  Vector grad = Vector::Zero(anchor.size());
  for (Eigen::Index n = 0; n < head.eta.rows(); ++n) {
    const double weight = (n == in.label ? 1.0 : 0.0) - p[n];
    grad += weight * head.eta.row(n).transpose();
  }
  if (in.has_stability()) {
    Vector logits(static_cast<Eigen::Index>(in.negative_phi_bars.size()));
    for (std::size_t f = 0; f < in.negative_phi_bars.size(); ++f) {
      logits[static_cast<Eigen::Index>(f)] = stability_logit(head.beta, anchor, in.negative_phi_bars[f]);
    }
    const Vector w = softmax(logits);
    Vector expected = Vector::Zero(anchor.size());
    for (std::size_t f = 0; f < in.negative_phi_bars.size(); ++f) {
      expected += w[static_cast<Eigen::Index>(f)] * in.negative_phi_bars[f];
    }
    grad += head.beta.cwiseProduct(*in.phi_bar_perturbed - expected);
  }
  return grad;
}

/// Closed-form responsibilities given the current gamma. With `heads`, the
/// label and stability terms are linearized around the state's current
/// phi_bar and enter every row scaled by 1/J.
inline RowMatrix update_phi(const VariationalState& state, const RowMatrix& log_dens,
                            const Vector& counts, const HeadInputs* heads = nullptr) {
  const auto j_count = log_dens.rows();
  const auto k_count = log_dens.cols();
  if (state.gamma.size() != k_count) throw ShapeError("update_phi: K mismatch");
  if (counts.size() != j_count) throw ShapeError("update_phi: counts length mismatch");

  const Vector elog = expected_log_theta(state.gamma);
  Vector head_term = Vector::Zero(k_count);
  if (heads != nullptr && heads->head != nullptr) {
    head_term = head_phi_gradient(state.phi_bar(), *heads) / static_cast<double>(j_count);
  }

  RowMatrix phi(j_count, k_count);
  std::vector<double> scores(static_cast<std::size_t>(k_count));
  std::vector<double> scratch(static_cast<std::size_t>(k_count));
  for (Eigen::Index j = 0; j < j_count; ++j) {
    for (Eigen::Index k = 0; k < k_count; ++k) {
      scores[static_cast<std::size_t>(k)] = counts[j] * (elog[k] + log_dens(j, k)) + head_term[k];
    }
    scratch = scores;
    const double norm = log_sum_exp_inplace(scratch);
    for (Eigen::Index k = 0; k < k_count; ++k) {
      phi(j, k) = std::exp(scores[static_cast<std::size_t>(k)] - norm);
    }
  }
  return phi;
}

inline RowMatrix update_phi(const Patches& patches, const VariationalState& state,
                            const FactoredBank& bank, const Vector& counts,
                            const HeadInputs* heads = nullptr) {
  return update_phi(state, log_densities(patches, bank), counts, heads);
}

/// gamma_k = alpha_k + sum_j phi_jk c_j.
inline Vector update_gamma(const Vector& alpha, const RowMatrix& phi, const Vector& counts) {
  if (phi.cols() != alpha.size()) throw ShapeError("update_gamma: K mismatch");
  if (phi.rows() != counts.size()) throw ShapeError("update_gamma: counts length mismatch");
  return alpha + phi.transpose() * counts;
}

struct InferenceOptions {
  std::size_t max_iters = 100;
  double rel_tol = 1e-5;
  bool include_heads = true;
  AttentionRescale attention = AttentionRescale::kSumToJ;

  static InferenceOptions from(const TrainConfig& c) {
    return {c.inference_max_iters, c.inference_rel_tol, c.heads_in_inference, c.attention};
  }
};

/// Fixed twin/negatives for the stability term during inference.
struct StabilityContext {
  Vector phi_bar_perturbed;
  std::vector<Vector> negative_phi_bars;
};

struct InferenceResult {
  Vector theta;
  VariationalState state;
  std::vector<double> elbo_trace;  // objective after each phi/gamma alternation
  bool converged = false;
};

/// Alternate update_phi / update_gamma from the uniform start until the
/// relative change of the objective drops below rel_tol. The objective is L_e,
/// plus L_f (and L_s when a stability context is given) when heads are on.
inline InferenceResult infer(const Patches& patches, int label, const FactoredBank& bank,
                             const HeadParams& head, const InferenceOptions& options,
                             const StabilityContext* stability = nullptr) {
  patches.validate();
  const Vector counts = effective_counts(patches, options.attention);
  const RowMatrix log_dens = log_densities(patches, bank);

  HeadInputs inputs;
  const bool heads_on = options.include_heads && head.num_classes() > 0;
  if (heads_on) {
    if (head.num_concepts() != bank.num_concepts()) throw ShapeError("infer: head K mismatch");
    inputs.head = &head;
    inputs.label = label;
    if (stability != nullptr) {
      inputs.phi_bar_perturbed = stability->phi_bar_perturbed;
      inputs.negative_phi_bars = stability->negative_phi_bars;
    }
  }

  InferenceResult result;
  result.state = initial_state(bank.alpha(), counts);
  double previous = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t it = 0; it < options.max_iters; ++it) {
    result.state.phi = update_phi(result.state, log_dens, counts, heads_on ? &inputs : nullptr);
    result.state.gamma = update_gamma(bank.alpha(), result.state.phi, counts);

    double objective = elbo_e(result.state, bank.alpha(), log_dens, counts);
    if (heads_on) {
      const Vector bar = result.state.phi_bar();
      objective += elbo_f(bar, label, head);
      if (inputs.has_stability()) {
        objective += elbo_s(bar, *inputs.phi_bar_perturbed, inputs.negative_phi_bars, head.beta);
      }
    }
    if (!std::isfinite(objective)) throw NumericalError("infer: non-finite ELBO", it);
    result.elbo_trace.push_back(objective);

    if (it > 0 && std::abs(objective - previous) <= options.rel_tol * std::abs(previous)) {
      result.converged = true;
      break;
    }
    previous = objective;
  }
  result.theta = theta_from_gamma(result.state.gamma);
  return result;
}

inline InferenceResult infer(const ImageRecord& record, const FactoredBank& bank,
                             const HeadParams& head, const InferenceOptions& options) {
  return infer(record.patches, record.predicted_label, bank, head, options);
}

}  // namespace pace
