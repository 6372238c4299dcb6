#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <iostream>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pace/errors.hpp"
#include "pace/inference.hpp"
#include "pace/model.hpp"
#include "pace/numkit.hpp"
#include "pace/parallel.hpp"

namespace pace {

// ---------------------------------------------------------------------------
// Concept M-step
// ---------------------------------------------------------------------------

/// One image's contribution to the concept M-step.
struct MStepItem {
  const RowMatrix* embeddings;  // J x d
  const RowMatrix* phi;         // J x K
  const Vector* counts;         // J
};

namespace detail {

inline constexpr double kDeadConceptMass = 1e-10;

inline double concept_mass(std::span<const MStepItem> items, Eigen::Index k) {
  double total = 0.0;
  for (const auto& it : items) total += it.phi->col(k).dot(*it.counts);
  return total;
}

}  // namespace detail

/// Responsibility-weighted mean of concept k; nullopt when the concept holds
/// no responsibility (dead concept).
inline std::optional<Vector> update_mu(std::span<const MStepItem> items, std::size_t k) {
  if (items.empty()) throw ContractError("update_mu: no images");
  const auto kk = static_cast<Eigen::Index>(k);
  const double mass = detail::concept_mass(items, kk);
  if (!(mass > detail::kDeadConceptMass)) return std::nullopt;
  Vector acc = Vector::Zero(items.front().embeddings->cols());
  for (const auto& it : items) {
    const Vector w = it.phi->col(kk).cwiseProduct(*it.counts);
    acc.noalias() += it.embeddings->transpose() * w;
  }
  return acc / mass;
}

/// Weighted scatter of concept k about `mean`, jitter-regularized until it
/// factors. Diagonal mode keeps only the per-dimension variances.
inline std::optional<SpdMatrix> update_sigma(std::span<const MStepItem> items, const Vector& mean,
                                             std::size_t k,
                                             CovarianceKind kind = CovarianceKind::kFull) {
  if (items.empty()) throw ContractError("update_sigma: no images");
  const auto kk = static_cast<Eigen::Index>(k);
  const double mass = detail::concept_mass(items, kk);
  if (!(mass > detail::kDeadConceptMass)) return std::nullopt;
  const auto d = mean.size();
  Matrix acc = Matrix::Zero(d, d);
  for (const auto& it : items) {
    const Vector w = it.phi->col(kk).cwiseProduct(*it.counts);
    const Matrix centered = it.embeddings->rowwise() - mean.transpose();
    acc.noalias() += centered.transpose() * w.asDiagonal() * centered;
  }
  acc /= mass;
  if (kind == CovarianceKind::kDiagonal) {
    acc = Matrix(acc.diagonal().asDiagonal());
  }
  acc = 0.5 * (acc + acc.transpose());
  SpdMatrix raw(acc);
  const CholeskyFactor f = factor_regularized(raw, k);
  if (f.jitter > 0.0) acc.diagonal().array() += f.jitter;
  return SpdMatrix(std::move(acc));
}

// ---------------------------------------------------------------------------
// Heads
// ---------------------------------------------------------------------------

/// One image's view for the head objective: its phi_bar, label, optional twin
/// phi_bar and the phi_bars of its negatives.
struct HeadBatchItem {
  Vector phi_bar;
  int label = 0;
  std::optional<Vector> phi_bar_perturbed;
  std::vector<Vector> negative_phi_bars;

  bool has_stability() const { return phi_bar_perturbed.has_value() && !negative_phi_bars.empty(); }
};

struct HeadGradients {
  Matrix eta;   // N x K
  Vector beta;  // K
};

/// Sum over the batch of L_f + L_s (L_s only for items with a twin).
inline double head_objective(std::span<const HeadBatchItem> batch, const HeadParams& head) {
  double total = 0.0;
  for (const auto& item : batch) {
    total += elbo_f(item.phi_bar, item.label, head);
    if (item.has_stability()) {
      total += elbo_s(item.phi_bar, *item.phi_bar_perturbed, item.negative_phi_bars, head.beta);
    }
  }
  return total;
}

/// Analytic gradients of head_objective with respect to eta and beta.
inline HeadGradients head_gradients(std::span<const HeadBatchItem> batch, const HeadParams& head) {
  HeadGradients g{Matrix::Zero(head.eta.rows(), head.eta.cols()), Vector::Zero(head.beta.size())};
  for (const auto& item : batch) {
    if (item.label < 0 || static_cast<std::size_t>(item.label) >= head.num_classes()) {
      throw ShapeError("head_gradients: label outside the head's class range");
    }
    const Vector p = softmax(class_logits(item.phi_bar, head));
    for (Eigen::Index n = 0; n < head.eta.rows(); ++n) {
      const double weight = (n == item.label ? 1.0 : 0.0) - p[n];
      g.eta.row(n) += weight * item.phi_bar.transpose();
    }
    if (item.has_stability()) {
      Vector logits(static_cast<Eigen::Index>(item.negative_phi_bars.size()));
      for (std::size_t f = 0; f < item.negative_phi_bars.size(); ++f) {
        logits[static_cast<Eigen::Index>(f)] =
            stability_logit(head.beta, item.phi_bar, item.negative_phi_bars[f]);
      }
      const Vector w = softmax(logits);
      Vector expected = Vector::Zero(head.beta.size());
      for (std::size_t f = 0; f < item.negative_phi_bars.size(); ++f) {
        expected += w[static_cast<Eigen::Index>(f)] * item.negative_phi_bars[f];
      }
      g.beta += item.phi_bar.cwiseProduct(*item.phi_bar_perturbed - expected);
    }
  }
  return g;
}

struct AdamState {
  Matrix m_eta, v_eta;
  Vector m_beta, v_beta;
  std::size_t steps = 0;

  static AdamState for_head(const HeadParams& head) {
    return {Matrix::Zero(head.eta.rows(), head.eta.cols()),
            Matrix::Zero(head.eta.rows(), head.eta.cols()),
            Vector::Zero(head.beta.size()), Vector::Zero(head.beta.size()), 0};
  }
};

struct AdamOptions {
  double learning_rate = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  bool constrain = false;  // project eta to [-1, 1] and beta to [0, 1]
};

/// One Adam ascent step on (eta, beta).
inline HeadParams step_heads(const HeadParams& head, const HeadGradients& grad, AdamState& state,
                             const AdamOptions& opt) {
  if (!grad.eta.allFinite() || !grad.beta.allFinite()) {
    throw NumericalError("step_heads: non-finite gradient");
  }
  if (grad.eta.rows() != head.eta.rows() || grad.eta.cols() != head.eta.cols() ||
      grad.beta.size() != head.beta.size()) {
    throw ShapeError("step_heads: gradient shape mismatch");
  }
  if (state.m_eta.size() != head.eta.size()) state = AdamState::for_head(head);

  state.steps += 1;
  const double t = static_cast<double>(state.steps);
  const double c1 = 1.0 - std::pow(opt.beta1, t);
  const double c2 = 1.0 - std::pow(opt.beta2, t);

  auto apply = [&](auto& param, const auto& g, auto& m, auto& v) {
    m = opt.beta1 * m + (1.0 - opt.beta1) * g;
    v = opt.beta2 * v + (1.0 - opt.beta2) * g.cwiseProduct(g);
    param.array() += opt.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + opt.epsilon);
  };

  HeadParams next = head;
  apply(next.eta, grad.eta, state.m_eta, state.v_eta);
  apply(next.beta, grad.beta, state.m_beta, state.v_beta);
  if (opt.constrain) {
    next.eta = next.eta.cwiseMax(-1.0).cwiseMin(1.0);
    next.beta = next.beta.cwiseMax(0.0).cwiseMin(1.0);
  }
  if (!next.eta.allFinite() || !next.beta.allFinite()) {
    throw NumericalError("step_heads: non-finite update", state.steps);
  }
  return next;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// k-means++ seeding followed by Lloyd iterations. Rows of `points` are
/// observations. Empty clusters keep their previous center.
inline std::vector<Vector> kmeans_pp(const RowMatrix& points, std::size_t k, std::size_t lloyd_iters,
                                     std::mt19937_64& rng) {
  const auto n = static_cast<std::size_t>(points.rows());
  if (n == 0 || k == 0) throw ContractError("kmeans_pp: need at least one point and one center");

  std::vector<Vector> centers;
  centers.reserve(k);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  centers.push_back(points.row(static_cast<Eigen::Index>(pick(rng))).transpose());

  std::vector<double> mindist(n, std::numeric_limits<double>::infinity());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  while (centers.size() < k) {
    const Vector& last = centers.back();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d2 = (points.row(static_cast<Eigen::Index>(i)).transpose() - last).squaredNorm();
      mindist[i] = std::min(mindist[i], d2);
      total += mindist[i];
    }
    std::size_t chosen = 0;
    if (total > 0.0) {
      const double target = unit(rng) * total;
      double running = 0.0;
      chosen = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        running += mindist[i];
        if (running >= target && mindist[i] > 0.0) {
          chosen = i;
          break;
        }
      }
    } else {
      chosen = pick(rng);
    }
    centers.push_back(points.row(static_cast<Eigen::Index>(chosen)).transpose());
  }

  std::vector<std::size_t> assign(n, 0);
  for (std::size_t iter = 0; iter < lloyd_iters; ++iter) {
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d2 = (points.row(static_cast<Eigen::Index>(i)).transpose() - centers[c]).squaredNorm();
        if (d2 < best) {
          best = d2;
          assign[i] = c;
        }
      }
    }
    std::vector<Vector> sums(k, Vector::Zero(points.cols()));
    std::vector<std::size_t> sizes(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums[assign[i]] += points.row(static_cast<Eigen::Index>(i)).transpose();
      sizes[assign[i]] += 1;
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (sizes[c] > 0) centers[c] = sums[c] / static_cast<double>(sizes[c]);
    }
  }
  return centers;
}

/// Unweighted covariance of every patch embedding in `records`.
inline Matrix pooled_covariance(std::span<const ImageRecord> records) {
  const auto d = records.front().patches.dim();
  Vector mean = Vector::Zero(d);
  double n = 0.0;
  for (const auto& r : records) {
    mean += r.patches.embeddings.colwise().sum().transpose();
    n += static_cast<double>(r.patches.num_patches());
  }
  mean /= n;
  Matrix cov = Matrix::Zero(d, d);
  for (const auto& r : records) {
    const Matrix centered = r.patches.embeddings.rowwise() - mean.transpose();
    cov.noalias() += centered.transpose() * centered;
  }
  cov /= n;
  return 0.5 * (cov + cov.transpose());
}

/// Means by k-means++ on a patch subsample, every covariance set to the
/// pooled covariance, alpha = 1/K.
inline ConceptBank initialize_bank(std::span<const ImageRecord> records, const TrainConfig& config,
                                   std::mt19937_64& rng) {
  std::vector<std::pair<std::size_t, Eigen::Index>> pool;
  for (std::size_t m = 0; m < records.size(); ++m) {
    for (Eigen::Index j = 0; j < records[m].patches.num_patches(); ++j) pool.emplace_back(m, j);
  }
  std::vector<std::pair<std::size_t, Eigen::Index>> chosen;
  if (pool.size() > config.init_subsample) {
    std::sample(pool.begin(), pool.end(), std::back_inserter(chosen), config.init_subsample, rng);
  } else {
    chosen = pool;
  }
  RowMatrix points(static_cast<Eigen::Index>(chosen.size()), records.front().patches.dim());
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    points.row(static_cast<Eigen::Index>(i)) =
        records[chosen[i].first].patches.embeddings.row(chosen[i].second);
  }

  ConceptBank bank;
  bank.means = kmeans_pp(points, config.num_concepts, config.lloyd_iters, rng);
  Matrix cov = pooled_covariance(records);
  if (config.covariance == CovarianceKind::kDiagonal) cov = Matrix(cov.diagonal().asDiagonal());
  const SpdMatrix pooled(cov);
  bank.covs.assign(config.num_concepts, pooled);
  bank.alpha = Vector::Constant(static_cast<Eigen::Index>(config.num_concepts),
                                1.0 / static_cast<double>(config.num_concepts));
  return bank;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double elbo_e = 0.0;
  double elbo_f = 0.0;
  double elbo_s = 0.0;
  double total() const { return elbo_e + elbo_f + elbo_s; }
};

struct FitOptions {
  std::optional<ConceptBank> initial_bank;
  std::optional<HeadParams> initial_head;
  std::function<void(const EpochStats&)> on_epoch;
  std::function<void(const std::string&)> warn = [](const std::string& msg) {
    std::cerr << "warning: " << msg << '\n';
  };
};

struct FitResult {
  ConceptBank bank;
  HeadParams head;
  std::vector<EpochStats> trace;
  std::vector<VariationalState> states;  // final per-image states of the originals
};

namespace detail {

// Up to `count` distinct indices from [0, total) \ {anchor}; all of them when
// there are not enough.
inline std::vector<std::size_t> sample_negatives(std::size_t anchor, std::size_t total,
                                                 std::size_t count, std::mt19937_64& rng) {
  std::vector<std::size_t> others;
  others.reserve(total > 0 ? total - 1 : 0);
  for (std::size_t i = 0; i < total; ++i) {
    if (i != anchor) others.push_back(i);
  }
  if (others.size() <= count) return others;
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, others.size() - 1);
    std::swap(others[i], others[pick(rng)]);
  }
  others.resize(count);
  return others;
}

}  // namespace detail

/// Alternating variational EM: per-image phi/gamma sweeps, closed-form concept
/// updates, then one Adam step on the heads, for config.epochs epochs.
inline FitResult fit(std::span<const ImageRecord> records, std::size_t num_classes,
                     const TrainConfig& config, const FitOptions& options = {}) {
  config.validate();
  if (records.empty()) throw ContractError("fit: dataset is empty");
  if (num_classes < 1) throw ContractError("fit: need at least one class");
  const auto d = records.front().patches.dim();
  for (const auto& r : records) {
    r.validate();
    if (r.patches.dim() != d) throw ShapeError("fit: records disagree on embedding dimension");
    if (static_cast<std::size_t>(r.predicted_label) >= num_classes) {
      throw ContractError("fit: label outside [0, N)");
    }
  }

  const std::size_t M = records.size();
  const std::size_t K = config.num_concepts;
  std::mt19937_64 rng(config.rng_seed);

  ConceptBank bank = options.initial_bank ? *options.initial_bank : initialize_bank(records, config, rng);
  bank.validate();
  if (bank.num_concepts() != K || bank.dim() != d) throw ShapeError("fit: initial bank shape mismatch");
  HeadParams head = options.initial_head ? *options.initial_head : HeadParams::zeros(num_classes, K);
  if (head.num_classes() != num_classes || head.num_concepts() != K) {
    throw ShapeError("fit: initial head shape mismatch");
  }
  AdamState adam = AdamState::for_head(head);
  const AdamOptions adam_opt{config.head_learning_rate, 0.9, 0.999, 1e-8, config.constraint_mode};

  std::vector<Vector> counts(M), twin_counts(M);
  std::vector<VariationalState> states(M), twin_states(M);
  for (std::size_t m = 0; m < M; ++m) {
    counts[m] = effective_counts(records[m].patches, config.attention);
    states[m] = initial_state(bank.alpha, counts[m]);
    if (records[m].perturbed) {
      twin_counts[m] = effective_counts(*records[m].perturbed, config.attention);
      twin_states[m] = initial_state(bank.alpha, twin_counts[m]);
    }
  }

  std::vector<RowMatrix> log_dens(M), twin_log_dens(M);
  auto refresh_densities = [&](const FactoredBank& fb) {
    parallel_for(M, config.num_threads, [&](std::size_t m) {
      log_dens[m] = log_densities(records[m].patches, fb);
      if (records[m].perturbed) twin_log_dens[m] = log_densities(*records[m].perturbed, fb);
    });
  };
  refresh_densities(FactoredBank(bank));

  FitResult result;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    // Snapshots for the stability term, taken before the pass.
    std::vector<Vector> bars(M), twin_bars(M);
    for (std::size_t m = 0; m < M; ++m) {
      bars[m] = states[m].phi_bar();
      if (records[m].perturbed) twin_bars[m] = twin_states[m].phi_bar();
    }
    std::vector<std::vector<std::size_t>> negatives(M);
    for (std::size_t m = 0; m < M; ++m) {
      negatives[m] = detail::sample_negatives(m, M, config.negatives_per_image, rng);
    }

    // E-step.
    parallel_for(M, config.num_threads, [&](std::size_t m) {
      const auto& rec = records[m];
      HeadInputs in;
      in.head = &head;
      in.label = rec.predicted_label;
      if (rec.perturbed && !negatives[m].empty()) {
        in.phi_bar_perturbed = twin_bars[m];
        for (auto f : negatives[m]) in.negative_phi_bars.push_back(bars[f]);
      }
      for (std::size_t s = 0; s < config.sweeps_per_epoch; ++s) {
        states[m].phi = update_phi(states[m], log_dens[m], counts[m], &in);
        states[m].gamma = update_gamma(bank.alpha, states[m].phi, counts[m]);
      }
      if (rec.perturbed) {
        HeadInputs twin_in;
        twin_in.head = &head;
        twin_in.label = rec.predicted_label;
        for (std::size_t s = 0; s < config.sweeps_per_epoch; ++s) {
          twin_states[m].phi = update_phi(twin_states[m], twin_log_dens[m], twin_counts[m], &twin_in);
          twin_states[m].gamma = update_gamma(bank.alpha, twin_states[m].phi, twin_counts[m]);
        }
      }
    });

    // M-step over concepts.
    std::vector<MStepItem> items;
    items.reserve(2 * M);
    for (std::size_t m = 0; m < M; ++m) {
      items.push_back({&records[m].patches.embeddings, &states[m].phi, &counts[m]});
      if (config.twins_in_mstep && records[m].perturbed) {
        items.push_back({&records[m].perturbed->embeddings, &twin_states[m].phi, &twin_counts[m]});
      }
    }
    ConceptBank next = bank;
    std::optional<Matrix> pooled;
    for (std::size_t k = 0; k < K; ++k) {
      auto mu = update_mu(items, k);
      std::optional<SpdMatrix> sigma;
      if (mu) sigma = update_sigma(items, *mu, k, config.covariance);
      if (!mu || !sigma) {
        // Re-seed at the patch the current concepts explain worst.
        double worst = std::numeric_limits<double>::infinity();
        std::size_t wm = 0;
        Eigen::Index wj = 0;
        for (std::size_t m = 0; m < M; ++m) {
          for (Eigen::Index j = 0; j < log_dens[m].rows(); ++j) {
            const double best = log_dens[m].row(j).maxCoeff();
            if (best < worst) {
              worst = best;
              wm = m;
              wj = j;
            }
          }
        }
        if (!pooled) {
          pooled = pooled_covariance(records);
          if (config.covariance == CovarianceKind::kDiagonal) *pooled = Matrix(pooled->diagonal().asDiagonal());
        }
        next.means[k] = records[wm].patches.embeddings.row(wj).transpose();
        next.covs[k] = SpdMatrix(*pooled);
        options.warn("concept " + std::to_string(k) + " received no responsibility in epoch " +
                     std::to_string(epoch) + "; re-seeded at patch " + std::to_string(wj) +
                     " of image '" + records[wm].id + "'");
        continue;
      }
      next.means[k] = std::move(*mu);
      next.covs[k] = std::move(*sigma);
    }
    bank = std::move(next);
    const FactoredBank fb(bank);
    refresh_densities(fb);

    // Head step at the post-E-step phi_bars.
    std::vector<HeadBatchItem> batch(M);
    for (std::size_t m = 0; m < M; ++m) {
      batch[m].phi_bar = states[m].phi_bar();
      batch[m].label = records[m].predicted_label;
    }
    for (std::size_t m = 0; m < M; ++m) {
      if (records[m].perturbed && !negatives[m].empty()) {
        batch[m].phi_bar_perturbed = twin_states[m].phi_bar();
        for (auto f : negatives[m]) batch[m].negative_phi_bars.push_back(batch[f].phi_bar);
      }
    }
    if (config.train_heads) {
      head = step_heads(head, head_gradients(batch, head), adam, adam_opt);
    }

    EpochStats stats;
    stats.epoch = epoch;
    std::vector<double> per_image(M);
    parallel_for(M, config.num_threads, [&](std::size_t m) {
      per_image[m] = elbo_e(states[m], bank.alpha, log_dens[m], counts[m]);
    });
    for (double v : per_image) stats.elbo_e += v;
    for (const auto& item : batch) {
      stats.elbo_f += elbo_f(item.phi_bar, item.label, head);
      if (item.has_stability()) {
        stats.elbo_s += elbo_s(item.phi_bar, *item.phi_bar_perturbed, item.negative_phi_bars, head.beta);
      }
    }
    if (!std::isfinite(stats.total())) throw NumericalError("fit: non-finite ELBO in epoch", epoch);
    result.trace.push_back(stats);
    if (options.on_epoch) options.on_epoch(stats);
  }

  result.bank = std::move(bank);
  result.head = std::move(head);
  result.states = std::move(states);
  return result;
}

}  // namespace pace
