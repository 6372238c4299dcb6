// pace: command-line front end.
//
//   pace synth --kind {generative|color} --out DIR [--m M --j J --d D --seed S]
//   pace fit --data DIR --k K --epochs T --out MODEL [--seed S --attention MODE]
//   pace infer --data DIR --model MODEL --out REPORT.json
//   pace eval --data DIR --model MODEL --out METRICS.json
//   pace export-concepts --model MODEL --data DIR --top P --out JSON
//
// Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <queue>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "pace/pace.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SynthArgs {
  std::string kind;
  fs::path out;
  std::optional<std::size_t> m, j, d;
  std::size_t k = 4;
  std::size_t n = 2;
  std::uint64_t seed = 0;
  double alpha = 0.5;
  double separation = 6.0;
  double sigma = 1.0;
};

struct FitArgs {
  fs::path data, out;
  std::size_t k = 0;
  std::size_t epochs = 0;
  std::uint64_t seed = 0;
  std::string attention = "sum-to-j";
  double lr = 0.05;
  std::size_t negatives = 32;
  std::size_t sweeps = 1;
  std::size_t threads = 1;
  bool constrain = false;
  bool diagonal = false;
  bool freeze_heads = false;
};

struct ApplyArgs {
  fs::path data, model, out;
  std::size_t threads = 1;
  std::size_t top = 3;
  std::string metric = "density";
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw pace::FormatError(path.string(), "cannot open for writing");
  out << text;
  if (!out) throw pace::FormatError(path.string(), "write failed");
}

int run_synth(const SynthArgs& a) {
  std::mt19937_64 rng(a.seed);
  std::pair<pace::Dataset, pace::GroundTruth> made;
  if (a.kind == "color") {
    pace::ColorOptions opt;
    if (a.j) opt.num_patches = *a.j;
    if (a.d) opt.dim = *a.d;
    const std::size_t m = a.m.value_or(2000);
    if (m % 2 != 0) throw UsageError("--m must be even for the color dataset");
    made = pace::make_color_dataset(m, rng, opt);
  } else {
    const std::size_t d = a.d.value_or(8);
    const std::size_t j = a.j.value_or(32);
    const std::size_t m = a.m.value_or(400);
    const auto bank = pace::make_separated_bank(a.k, d, a.separation, a.sigma, a.alpha, rng);
    auto head = pace::HeadParams::zeros(a.n, a.k);
    std::normal_distribution<double> normal(0.0, 3.0);
    for (Eigen::Index r = 0; r < head.eta.rows(); ++r)
      for (Eigen::Index c = 0; c < head.eta.cols(); ++c) head.eta(r, c) = normal(rng);
    made = pace::sample_generative(bank, head, m, j, rng);
  }
  pace::io::save_dataset(made.first, a.out);
  pace::io::save_ground_truth(made.second, a.out / "ground_truth");
  std::cout << "wrote " << made.first.size() << " images to " << a.out.string() << '\n';
  return 0;
}

int run_fit(const FitArgs& a) {
  pace::TrainConfig config;
  config.num_concepts = a.k;
  config.epochs = a.epochs;
  config.rng_seed = a.seed;
  config.head_learning_rate = a.lr;
  config.negatives_per_image = a.negatives;
  config.sweeps_per_epoch = a.sweeps;
  config.num_threads = a.threads;
  config.constraint_mode = a.constrain;
  config.train_heads = !a.freeze_heads;
  config.covariance = a.diagonal ? pace::CovarianceKind::kDiagonal : pace::CovarianceKind::kFull;
  try {
    config.attention = pace::parse_attention_rescale(a.attention);
    config.validate();
  } catch (const pace::ContractError& e) {
    throw UsageError(e.what());
  }

  const pace::Dataset data = pace::io::load_dataset(a.data);
  const auto train = data.subset(pace::Split::kTrain);
  if (train.empty()) throw pace::ContractError("dataset has no training images");

  pace::FitOptions options;
  options.on_epoch = [](const pace::EpochStats& s) {
    std::cout << "epoch=" << s.epoch << " elbo=" << std::setprecision(12) << s.total() << '\n' << std::flush;
  };
  const auto result = pace::fit(train, data.num_classes, config, options);
  if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
  pace::io::save_model(result.bank, result.head, config, a.out);
  return 0;
}

int run_infer(const ApplyArgs& a) {
  const pace::Dataset data = pace::io::load_dataset(a.data);
  const auto model = pace::io::load_model(a.model);
  const pace::FactoredBank bank(model.bank);
  const auto opt = pace::InferenceOptions::from(model.config);

  const auto M = data.size();
  const auto J = static_cast<std::size_t>(data.patches_per_image());
  const auto K = bank.num_concepts();
  std::vector<pace::InferenceResult> results(M);
  pace::parallel_for(M, a.threads, [&](std::size_t m) {
    results[m] = pace::infer(data.records[m], bank, model.head, opt);
  });

  std::vector<double> theta, phi;
  theta.reserve(M * K);
  phi.reserve(M * J * K);
  json iterations = json::array(), converged = json::array();
  for (const auto& r : results) {
    theta.insert(theta.end(), r.theta.data(), r.theta.data() + r.theta.size());
    phi.insert(phi.end(), r.state.phi.data(), r.state.phi.data() + r.state.phi.size());
    iterations.push_back(r.elbo_trace.size());
    converged.push_back(r.converged);
  }
  const fs::path report = a.out;
  const std::string stem = report.stem().string();
  const fs::path dir = report.has_parent_path() ? report.parent_path() : fs::path(".");
  fs::create_directories(dir);
  const std::string theta_name = stem + ".theta.bin";
  const std::string phi_name = stem + ".phi.bin";
  const std::array<std::uint64_t, 2> tdims{M, K};
  const std::array<std::uint64_t, 3> pdims{M, J, K};
  pace::io::write_array_file<double>(dir / theta_name, tdims, theta);
  pace::io::write_array_file<double>(dir / phi_name, pdims, phi);

  json ids = json::array();
  for (const auto& r : data.records) ids.push_back(r.id);
  json index{{"version", pace::io::kFormatVersion},
             {"M", M},
             {"J", J},
             {"K", K},
             {"ids", ids},
             {"iterations", iterations},
             {"converged", converged},
             {"files", {{"theta", theta_name}, {"phi", phi_name}}}};
  write_text(report, index.dump(2) + "\n");
  return 0;
}

int run_eval(const ApplyArgs& a) {
  const pace::Dataset data = pace::io::load_dataset(a.data);
  const auto model = pace::io::load_model(a.model);
  auto config = model.config;
  config.num_threads = a.threads;
  const auto report = pace::evaluate(data, model.bank, model.head, config);
  write_text(a.out, pace::to_json(report).dump(2) + "\n");
  return 0;
}

struct Hit {
  double score;
  std::size_t image;
  Eigen::Index patch;
};

// Max-score first; ties by earlier image then earlier patch.
bool better(const Hit& x, const Hit& y) {
  if (x.score != y.score) return x.score > y.score;
  if (x.image != y.image) return x.image < y.image;
  return x.patch < y.patch;
}

int run_export(const ApplyArgs& a) {
  if (a.metric != "density" && a.metric != "euclidean") throw UsageError("--metric must be density or euclidean");
  if (a.top == 0) throw UsageError("--top must be positive");
  const pace::Dataset data = pace::io::load_dataset(a.data);
  const auto model = pace::io::load_model(a.model);
  const pace::FactoredBank bank(model.bank);
  if (data.dim() != bank.dim()) {
    throw pace::ShapeError("data dimension " + std::to_string(data.dim()) + " does not match model dimension " +
                           std::to_string(bank.dim()));
  }
  const auto K = bank.num_concepts();
  auto worse = [](const Hit& x, const Hit& y) { return better(x, y); };
  std::vector<std::priority_queue<Hit, std::vector<Hit>, decltype(worse)>> heaps(K, decltype(heaps)::value_type(worse));

  pace::Vector e(bank.dim());
  for (std::size_t m = 0; m < data.size(); ++m) {
    const auto& emb = data.records[m].patches.embeddings;
    for (Eigen::Index j = 0; j < emb.rows(); ++j) {
      e = emb.row(j).transpose();
      for (std::size_t k = 0; k < K; ++k) {
        const double s = a.metric == "density" ? bank.log_density(k, e) : -(e - bank.mean(k)).norm();
        heaps[k].push({s, m, j});
        if (heaps[k].size() > a.top) heaps[k].pop();
      }
    }
  }

  json concepts = json::array();
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<Hit> hits;
    while (!heaps[k].empty()) {
      hits.push_back(heaps[k].top());
      heaps[k].pop();
    }
    std::sort(hits.begin(), hits.end(), better);
    json patches = json::array();
    for (const auto& h : hits) {
      patches.push_back({{"image", data.records[h.image].id},
                         {"image_index", h.image},
                         {"patch", h.patch},
                         {"score", h.score}});
    }
    concepts.push_back({{"concept", k}, {"patches", patches}});
  }
  json out{{"metric", a.metric}, {"top", a.top}, {"concepts", concepts}};
  write_text(a.out, out.dump(2) + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Probabilistic concept explanations for patch embeddings"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic dataset with ground truth");
  s->add_option("--kind", synth.kind, "generative or color")->required()->check(CLI::IsMember({"generative", "color"}));
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--m", synth.m, "Number of images");
  s->add_option("--j", synth.j, "Patches per image");
  s->add_option("--d", synth.d, "Embedding dimension");
  s->add_option("--k", synth.k, "Concepts (generative)")->check(CLI::PositiveNumber);
  s->add_option("--n", synth.n, "Classes (generative)")->check(CLI::PositiveNumber);
  s->add_option("--alpha", synth.alpha, "Dirichlet concentration (generative)")->check(CLI::PositiveNumber);
  s->add_option("--separation", synth.separation, "Minimum mean separation in sigmas (generative)");
  s->add_option("--sigma", synth.sigma, "Concept scale (generative)")->check(CLI::PositiveNumber);
  s->add_option("--seed", synth.seed, "RNG seed");

  FitArgs fit;
  auto* f = app.add_subcommand("fit", "Learn concepts and heads on the training split");
  f->add_option("--data", fit.data, "Dataset directory")->required();
  f->add_option("--k", fit.k, "Number of concepts")->required();
  f->add_option("--epochs", fit.epochs, "Epochs")->required();
  f->add_option("--out", fit.out, "Model file")->required();
  f->add_option("--seed", fit.seed, "RNG seed");
  f->add_option("--attention", fit.attention, "sum-to-j, raw or uniform");
  f->add_option("--lr", fit.lr, "Head learning rate");
  f->add_option("--negatives", fit.negatives, "Negatives per image");
  f->add_option("--sweeps", fit.sweeps, "phi/gamma sweeps per epoch");
  f->add_option("--threads", fit.threads, "Worker threads");
  f->add_flag("--constrain", fit.constrain, "Clip eta to [-1,1] and beta to [0,1]");
  f->add_flag("--diagonal", fit.diagonal, "Diagonal covariances");
  f->add_flag("--freeze-heads", fit.freeze_heads, "Keep eta and beta at zero");

  ApplyArgs inf, ev, ex;
  auto* i = app.add_subcommand("infer", "Per-image theta and per-patch phi");
  i->add_option("--data", inf.data)->required();
  i->add_option("--model", inf.model)->required();
  i->add_option("--out", inf.out)->required();
  i->add_option("--threads", inf.threads);

  auto* e = app.add_subcommand("eval", "Faithfulness, stability, sparsity, parsimony");
  e->add_option("--data", ev.data)->required();
  e->add_option("--model", ev.model)->required();
  e->add_option("--out", ev.out)->required();
  e->add_option("--threads", ev.threads);

  auto* x = app.add_subcommand("export-concepts", "Top patches per concept");
  x->add_option("--model", ex.model)->required();
  x->add_option("--data", ex.data)->required();
  x->add_option("--top", ex.top, "Patches per concept");
  x->add_option("--out", ex.out)->required();
  x->add_option("--metric", ex.metric, "density or euclidean");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kExitUsage;
  }

  try {
    if (s->parsed()) return run_synth(synth);
    if (f->parsed()) return run_fit(fit);
    if (i->parsed()) return run_infer(inf);
    if (e->parsed()) return run_eval(ev);
    if (x->parsed()) return run_export(ex);
  } catch (const UsageError& err) {
    std::cerr << "usage error: " << err.what() << '\n';
    return kExitUsage;
  } catch (const pace::SingularityError& err) {
    std::cerr << "numerical failure: " << err.what() << '\n';
    return kExitNumerical;
  } catch (const pace::NumericalError& err) {
    std::cerr << "numerical failure: " << err.what() << '\n';
    return kExitNumerical;
  } catch (const pace::Error& err) {
    std::cerr << "data error: " << err.what() << '\n';
    return kExitData;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}
