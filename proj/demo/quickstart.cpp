// Fit a small concept model on synthetic data and print the recovered means
// next to the true ones.

#include <iostream>
#include <random>

#include "pace/pace.hpp"

int main() {
  std::mt19937_64 rng(7);
  const auto bank = pace::make_separated_bank(3, 4, 6.0, 1.0, 0.5, rng);
  const auto head = pace::HeadParams::zeros(2, 3);
  auto [data, truth] = pace::sample_generative(bank, head, 120, 16, rng);

  pace::TrainConfig config;
  config.num_concepts = 3;
  config.epochs = 10;
  config.rng_seed = 7;
  config.train_heads = false;

  const auto train = data.subset(pace::Split::kTrain);
  pace::FitOptions options;
  options.on_epoch = [](const pace::EpochStats& s) { std::cout << "epoch " << s.epoch << "  elbo " << s.total() << '\n'; };
  const auto result = pace::fit(train, data.num_classes, config, options);

  const Eigen::IOFormat row(4, 0, ", ", "\n", "[", "]");
  for (std::size_t k = 0; k < 3; ++k) {
    std::cout << "true    " << truth.bank.means[k].transpose().format(row) << '\n';
  }
  for (std::size_t k = 0; k < 3; ++k) {
    std::cout << "learned " << result.bank.means[k].transpose().format(row) << '\n';
  }
}
