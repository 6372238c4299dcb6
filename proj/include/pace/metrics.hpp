#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pace/errors.hpp"
#include "pace/inference.hpp"
#include "pace/model.hpp"
#include "pace/numkit.hpp"
#include "pace/parallel.hpp"

namespace pace {

// ---------------------------------------------------------------------------
// Faithfulness
// ---------------------------------------------------------------------------

struct LogisticRegressionOptions {
  double learning_rate = 0.1;
  double l2 = 1e-4;
  std::size_t epochs = 500;
};

/// Multinomial logistic regression with bias, trained by full-batch gradient
/// descent from zero weights.
class LogisticRegression {
 public:
  LogisticRegression() = default;

  void fit(const RowMatrix& features, const std::vector<int>& labels, std::size_t num_classes,
           const LogisticRegressionOptions& opt = {}) {
    if (features.rows() != static_cast<Eigen::Index>(labels.size())) {
      throw ShapeError("logistic regression: feature/label count mismatch");
    }
    if (std::set<int>(labels.begin(), labels.end()).size() < 2) {
      throw DegenerateError("logistic regression: training labels contain fewer than two classes");
    }
    const auto n = features.rows();
    const auto p = features.cols();
    const auto c = static_cast<Eigen::Index>(num_classes);
    weights_ = Matrix::Zero(p, c);
    bias_ = Vector::Zero(c);

    Matrix onehot = Matrix::Zero(n, c);
    for (Eigen::Index i = 0; i < n; ++i) onehot(i, labels[static_cast<std::size_t>(i)]) = 1.0;

    for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
      Matrix probs = probabilities(features);
      probs -= onehot;  // d(-loglik)/dlogits
      const Matrix grad_w = features.transpose() * probs / static_cast<double>(n) + opt.l2 * weights_;
      const Vector grad_b = probs.colwise().mean().transpose();
      weights_ -= opt.learning_rate * grad_w;
      bias_ -= opt.learning_rate * grad_b;
    }
  }

  Matrix probabilities(const RowMatrix& features) const {
    Matrix logits = features * weights_;
    logits.rowwise() += bias_.transpose();
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      const double top = logits.row(i).maxCoeff();
      logits.row(i) = (logits.row(i).array() - top).exp();
      logits.row(i) /= logits.row(i).sum();
    }
    return logits;
  }

  // Ties go to the lowest class index.
  std::vector<int> predict(const RowMatrix& features) const {
    const Matrix probs = probabilities(features);
    std::vector<int> out(static_cast<std::size_t>(probs.rows()));
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
      Eigen::Index best = 0;
      for (Eigen::Index c = 1; c < probs.cols(); ++c) {
        if (probs(i, c) > probs(i, best)) best = c;
      }
      out[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return out;
  }

  double accuracy(const RowMatrix& features, const std::vector<int>& labels) const {
    if (labels.empty()) throw ContractError("accuracy: empty evaluation set");
    const auto pred = predict(features);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hits += pred[i] == labels[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(labels.size());
  }

 private:
  Matrix weights_;
  Vector bias_;
};

/// Test accuracy of a logistic regression from theta to the predicted labels.
inline double faithfulness(const RowMatrix& train_theta, const std::vector<int>& train_labels,
                           const RowMatrix& test_theta, const std::vector<int>& test_labels,
                           const LogisticRegressionOptions& opt = {}) {
  int top = 0;
  for (int y : train_labels) top = std::max(top, y);
  for (int y : test_labels) top = std::max(top, y);
  LogisticRegression lr;
  lr.fit(train_theta, train_labels, static_cast<std::size_t>(top) + 1, opt);
  return lr.accuracy(test_theta, test_labels);
}

// ---------------------------------------------------------------------------
// Stability, sparsity, patch aggregation
// ---------------------------------------------------------------------------

/// ||theta - theta'|| / ||theta||.
inline double stability(const Vector& theta, const Vector& theta_perturbed) {
  if (theta.size() != theta_perturbed.size()) throw ShapeError("stability: length mismatch");
  const double norm = theta.norm();
  if (!(norm > 0.0)) throw DomainError("stability: anchor explanation has zero norm");
  return (theta - theta_perturbed).norm() / norm;
}

/// Fraction of the K entries below 0.1/K after normalizing onto the simplex.
inline double sparsity(const Vector& theta) {
  const auto k = theta.size();
  if (k == 0) throw DomainError("sparsity: K must be positive");
  Vector t = theta.cwiseAbs();
  const double total = t.sum();
  if (!(total > 0.0)) throw DomainError("sparsity: explanation is identically zero");
  if (std::abs(total - 1.0) > 1e-12) t /= total;
  const double eps = 0.1 / static_cast<double>(k);
  Eigen::Index below = 0;
  for (Eigen::Index i = 0; i < k; ++i) below += t[i] < eps ? 1 : 0;
  return static_cast<double>(below) / static_cast<double>(k);
}

/// Average 2x2 blocks of an S x S patch grid (row-major patch order) into an
/// (S/2) x (S/2) grid.
inline RowMatrix aggregate_patches(const RowMatrix& phi) {
  const auto j = phi.rows();
  const auto s = static_cast<Eigen::Index>(std::llround(std::sqrt(static_cast<double>(j))));
  if (j == 0 || s * s != j || s % 2 != 0) {
    throw ShapeError("aggregate_patches: J = " + std::to_string(j) + " is not an even perfect square");
  }
  const auto half = s / 2;
  RowMatrix out(half * half, phi.cols());
  for (Eigen::Index u = 0; u < half; ++u) {
    for (Eigen::Index v = 0; v < half; ++v) {
      out.row(u * half + v) = 0.25 * (phi.row(2 * u * s + 2 * v) + phi.row(2 * u * s + 2 * v + 1) +
                                      phi.row((2 * u + 1) * s + 2 * v) +
                                      phi.row((2 * u + 1) * s + 2 * v + 1));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct MetricsReport {
  double faithfulness = 0.0;
  std::optional<double> stability;  // absent when test images lack twins
  double sparsity = 0.0;
  std::size_t parsimony = 0;
  std::vector<std::string> multilevel{"dataset", "image", "patch"};
};

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["faithfulness"] = r.faithfulness;
  j["stability"] = r.stability ? nlohmann::json(*r.stability) : nlohmann::json(nullptr);
  j["sparsity"] = r.sparsity;
  j["parsimony"] = r.parsimony;
  j["multilevel"] = r.multilevel;
  return j;
}

/// Infer theta for a batch of patch sets in parallel.
inline RowMatrix infer_thetas(const std::vector<const Patches*>& patches, const std::vector<int>& labels,
                              const FactoredBank& bank, const HeadParams& head,
                              const InferenceOptions& opt, std::size_t num_threads) {
  RowMatrix thetas(static_cast<Eigen::Index>(patches.size()), static_cast<Eigen::Index>(bank.num_concepts()));
  parallel_for(patches.size(), num_threads, [&](std::size_t i) {
    thetas.row(static_cast<Eigen::Index>(i)) =
        infer(*patches[i], labels[i], bank, head, opt).theta.transpose();
  });
  return thetas;
}

/// Metrics over a dataset: faithfulness from train/test thetas, stability and
/// sparsity averaged over test images, parsimony = K.
inline MetricsReport evaluate(const Dataset& data, const ConceptBank& bank, const HeadParams& head,
                              const TrainConfig& config,
                              const std::function<void(const std::string&)>& warn =
                                  [](const std::string& m) { std::cerr << "warning: " << m << '\n'; }) {
  data.validate();
  const FactoredBank fb(bank);
  if (data.dim() != fb.dim()) {
    throw ShapeError("evaluate: data dimension " + std::to_string(data.dim()) +
                     " does not match model dimension " + std::to_string(fb.dim()));
  }
  const auto opt = InferenceOptions::from(config);

  auto gather = [&](Split which, bool twins) {
    std::vector<const Patches*> ps;
    std::vector<int> ys;
    for (auto i : data.indices(which)) {
      const auto& r = data.records[i];
      if (twins && !r.perturbed) continue;
      ps.push_back(twins ? &*r.perturbed : &r.patches);
      ys.push_back(r.predicted_label);
    }
    return std::make_pair(ps, ys);
  };

  const auto [train_p, train_y] = gather(Split::kTrain, false);
  const auto [test_p, test_y] = gather(Split::kTest, false);
  if (test_p.empty()) throw ContractError("evaluate: dataset has no test images");
  const RowMatrix train_theta = infer_thetas(train_p, train_y, fb, head, opt, config.num_threads);
  const RowMatrix test_theta = infer_thetas(test_p, test_y, fb, head, opt, config.num_threads);

  MetricsReport report;
  report.parsimony = fb.num_concepts();
  report.faithfulness = faithfulness(train_theta, train_y, test_theta, test_y);

  double sparse = 0.0;
  for (Eigen::Index i = 0; i < test_theta.rows(); ++i) sparse += sparsity(test_theta.row(i).transpose());
  report.sparsity = sparse / static_cast<double>(test_theta.rows());

  const auto test_idx = data.indices(Split::kTest);
  bool all_twins = true;
  for (auto i : test_idx) all_twins = all_twins && data.records[i].perturbed.has_value();
  if (all_twins) {
    const auto [twin_p, twin_y] = gather(Split::kTest, true);
    const RowMatrix twin_theta = infer_thetas(twin_p, twin_y, fb, head, opt, config.num_threads);
    double total = 0.0;
    for (Eigen::Index i = 0; i < test_theta.rows(); ++i) {
      total += stability(test_theta.row(i).transpose(), twin_theta.row(i).transpose());
    }
    report.stability = total / static_cast<double>(test_theta.rows());
  } else {
    warn("test images without perturbed twins; stability not reported");
  }
  return report;
}

}  // namespace pace
