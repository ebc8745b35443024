#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "nullswap/losses.hpp"

using namespace nullswap;

namespace {

torch::Tensor random_image(std::vector<int64_t> shape, std::uint64_t seed) {
  auto g = at::make_generator<at::CPUGeneratorImpl>(seed);
  return torch::rand(shape, g) * 2.0 - 1.0;
}

PerceptualNet frozen_net(std::uint64_t seed) {
  torch::manual_seed(seed);
  PerceptualNet net;
  freeze(net);
  return net;
}

// Untrained toy embedder, frozen; enough for range and gradient checks.
std::shared_ptr<ToyEmbedder> frozen_embedder(ToyArch arch, std::uint64_t seed) {
  torch::manual_seed(seed);
  auto e = std::make_shared<ToyEmbedder>(to_string(arch), arch, 16, 4);
  e->freeze();
  return e;
}

}  // namespace

TEST(ReconstructionLoss, Basics) {
  auto a = random_image({2, 3, 8, 8}, 1);
  EXPECT_EQ(reconstruction_loss(a, a).item<double>(), 0.0);
  auto b = (a + 0.2).clone();
  EXPECT_NEAR(reconstruction_loss(a, b).item<double>(), 0.04, 1e-6);
  auto c = random_image({2, 3, 8, 8}, 2);
  EXPECT_DOUBLE_EQ(reconstruction_loss(a, c).item<double>(), reconstruction_loss(c, a).item<double>());
}

TEST(PerceptualLoss, ZeroOnIdenticalAndNonNegative) {
  auto net = frozen_net(3);
  auto a = random_image({2, 3, 32, 32}, 3);
  EXPECT_NEAR(perceptual_loss(a, a, net).item<double>(), 0.0, 1e-9);
  for (std::uint64_t s = 0; s < 5; ++s) {
    EXPECT_GE(perceptual_loss(a, random_image({2, 3, 32, 32}, 10 + s), net).item<double>(), 0.0);
  }
}

TEST(PerceptualLoss, MidpointIsCloser) {
  // Logged sweep; the bulk must be monotone, a rare exception is tolerated.
  auto net = frozen_net(4);
  int monotone = 0;
  const int trials = 20;
  for (int t = 0; t < trials; ++t) {
    auto a = random_image({1, 3, 32, 32}, 100 + t);
    auto b = (a + 0.2 * torch::randn({1, 3, 32, 32}, at::make_generator<at::CPUGeneratorImpl>(200 + t))).clamp(-1, 1);
    auto mid = 0.5 * (a + b);
    monotone += perceptual_loss(a, mid, net).item<double>() <= perceptual_loss(a, b, net).item<double>();
  }
  std::cout << "perceptual midpoint monotone in " << monotone << "/" << trials << " trials\n";
  EXPECT_GE(monotone, trials - 2);
}

TEST(PerceptualLoss, FrozenNetGetsNoGradient) {
  auto net = frozen_net(5);
  auto a = random_image({1, 3, 32, 32}, 5);
  auto b = random_image({1, 3, 32, 32}, 6).requires_grad_(true);
  perceptual_loss(a, b, net).backward();
  for (const auto& p : net->parameters()) EXPECT_FALSE(p.grad().defined());
  EXPECT_GT(b.grad().abs().sum().item<double>(), 0.0);
}

TEST(DiscriminatorLoss, LogitValues) {
  auto zero = torch::zeros({4});
  EXPECT_NEAR(discriminator_loss(zero, zero).item<double>(), 2.0 * std::log(2.0), 1e-6);
  EXPECT_NEAR(discriminator_loss(torch::full({4}, 1e4), torch::full({4}, -1e4)).item<double>(), 0.0, 1e-9);
  const auto saturated = discriminator_loss(torch::tensor({50.f, -50.f}), torch::tensor({-50.f, 50.f}));
  EXPECT_TRUE(std::isfinite(saturated.item<double>()));
  EXPECT_NEAR(saturated.item<double>(), 50.0, 1e-3);
}

TEST(AdversarialLoss, LogitValuesAndGradient) {
  EXPECT_NEAR(adversarial_loss(torch::zeros({3})).item<double>(), std::log(2.0), 1e-6);
  EXPECT_NEAR(adversarial_loss(torch::full({3}, 1e4)).item<double>(), 0.0, 1e-9);

  torch::manual_seed(7);
  Discriminator d(GeneratorConfig::toy());
  auto x = random_image({2, 3, 64, 64}, 7).requires_grad_(true);
  adversarial_loss(d, x).backward();
  EXPECT_GT(x.grad().abs().sum().item<double>(), 0.0);
}

TEST(IdentityLosses, OneOnIdenticalAndWithinRange) {
  std::vector<std::shared_ptr<FaceEmbedder>> es{frozen_embedder(ToyArch::A, 1), frozen_embedder(ToyArch::B, 2)};
  auto a = random_image({3, 3, 32, 32}, 8);
  for (const auto& l : identity_losses(es, a, a)) EXPECT_NEAR(l.item<double>(), 1.0, 1e-5);
  for (std::uint64_t s = 0; s < 4; ++s) {
    for (const auto& l : identity_losses(es, a, random_image({3, 3, 32, 32}, 20 + s))) {
      EXPECT_GE(l.item<double>(), -1.0 - 1e-6);
      EXPECT_LE(l.item<double>(), 1.0 + 1e-6);
    }
  }
}

TEST(IdentityLosses, PrecomputedCleanEmbeddingsMatch) {
  std::vector<std::shared_ptr<FaceEmbedder>> es{frozen_embedder(ToyArch::C, 3)};
  auto a = random_image({2, 3, 32, 32}, 9);
  auto b = random_image({2, 3, 32, 32}, 10);
  auto direct = identity_losses(es, a, b)[0].item<double>();
  auto cached = identity_losses(es, a, b, {es[0]->embed(a)})[0].item<double>();
  EXPECT_NEAR(direct, cached, 1e-6);
}

TEST(TotalLoss, DefaultCoefficients) {
  LossCoefficients c;
  EXPECT_NEAR(total_loss(1.0, 0.01, 0.05, 0.7, c), 0.228, 1e-12);
  EXPECT_EQ(total_loss(0.0, 0.0, 0.0, 0.0, c), 0.0);
  EXPECT_NEAR(total_loss(2.0, 0.02, 0.1, 1.4, c), 2.0 * total_loss(1.0, 0.01, 0.05, 0.7, c), 1e-12);
  LossComponents parts{torch::tensor(1.0), torch::tensor(0.01), torch::tensor(0.05), torch::tensor(0.7)};
  EXPECT_NEAR(total_loss(parts, c).item<double>(), 0.228, 1e-7);
}

TEST(LossCoefficients, RejectNegative) {
  LossCoefficients c;
  EXPECT_NO_THROW(c.validate());
  c.lambda_mse = -1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}
