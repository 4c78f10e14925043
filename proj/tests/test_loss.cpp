#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "rmsynth/loss.hpp"

using namespace rmsynth;
using namespace rmsynth::nn;
using testutil::random_tensor;

namespace {

DiscriminatorConfig disc_for(LossVariant v) {
  DiscriminatorConfig c;
  c.base_channels = 2;
  c.in_channels = gan_sees_magnitude(v) ? 3 : 2;
  return c;
}

struct Fixture {
  Tensor<double> x, y_true, phi_true, phi_pred, y_pred;
  LossBundle<double> bundle() const { return {x, y_true, phi_true, phi_pred, y_pred}; }
};

Fixture make_fixture(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Fixture f;
  f.x = random_tensor({1, 8, 8, 8}, rng, -1000, 100);
  f.y_true = random_tensor({1, 8, 8, 8}, rng, -1000, 100);
  f.phi_true = random_tensor({3, 8, 8, 8}, rng, -5, 5);
  f.phi_pred = random_tensor({3, 8, 8, 8}, rng, -5, 5);
  f.y_pred = random_tensor({1, 8, 8, 8}, rng, -1000, 100);
  for (auto* t : {&f.x, &f.y_true, &f.phi_true}) t->set_requires_grad(false);
  return f;
}

double mean_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a.data()[i] - b.data()[i]);
  return s / a.size();
}

double softplus(double z) { return std::log1p(std::exp(z)); }

}  // namespace

TEST(Variant, NamesRoundTrip) {
  for (auto v : kAllVariants) EXPECT_EQ(parse_variant(variant_name(v)), v);
  EXPECT_THROW(parse_variant("L2_PHI"), std::invalid_argument);
}

TEST(Variant, TermSelection) {
  EXPECT_TRUE(uses_l1_image(LossVariant::L1_Y) && !uses_gan(LossVariant::L1_Y));
  EXPECT_TRUE(uses_l1_phi(LossVariant::L1_PHI) && !uses_gan(LossVariant::L1_PHI));
  EXPECT_TRUE(!uses_l1(LossVariant::GAN_Y_MAG) && gan_sees_magnitude(LossVariant::GAN_Y_MAG));
  EXPECT_TRUE(uses_l1_phi(LossVariant::L1_PHI_PLUS_GAN_Y) && !gan_sees_magnitude(LossVariant::L1_PHI_PLUS_GAN_Y));
  EXPECT_TRUE(uses_l1_image(LossVariant::L1_Y_PLUS_GAN_Y) && uses_gan(LossVariant::L1_Y_PLUS_GAN_Y));
}

TEST(Variant, ZeroWeightConflicts) {
  EXPECT_THROW(validate_variant(LossVariant::L1_PHI, {0, 1}), std::invalid_argument);
  EXPECT_THROW(validate_variant(LossVariant::GAN_Y_MAG, {100, 0}), std::invalid_argument);
  EXPECT_THROW(validate_variant(LossVariant::L1_Y, {-1, 1}), std::invalid_argument);
  EXPECT_NO_THROW(validate_variant(LossVariant::L1_PHI, {100, 0}));
  EXPECT_NO_THROW(validate_variant(LossVariant::GAN_Y_MAG, {0, 1}));
}

TEST(GanLosses, ClosedFormAtZeroLogits) {
  const auto z = Tensor<double>::zeros({1, 2, 2, 2});
  const auto g = gan_losses(z, z);
  EXPECT_NEAR(g.d_loss.item(), 2 * std::log(2.0), 1e-12);
  EXPECT_NEAR(g.g_loss.item(), std::log(2.0), 1e-12);
}

TEST(GanLosses, MatchesSoftplusForm) {
  std::mt19937_64 rng(1);
  const auto r = random_tensor({1, 3, 2, 2}, rng, -3, 3), f = random_tensor({1, 3, 2, 2}, rng, -3, 3);
  double d = 0, g = 0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    d += softplus(-r.data()[i]) + softplus(f.data()[i]);
    g += softplus(-f.data()[i]);
  }
  const auto l = gan_losses(r, f);
  EXPECT_NEAR(l.d_loss.item(), d / r.size(), 1e-12);
  EXPECT_NEAR(l.g_loss.item(), g / r.size(), 1e-12);
  EXPECT_THROW(gan_losses(r, random_tensor({1, 2, 2, 2}, rng)), std::invalid_argument);
}

TEST(CompoundLoss, L1OnlyVariants) {
  const auto f = make_fixture(2);
  const LossWeights w{100, 1};
  const auto phi = compound_loss<double>(LossVariant::L1_PHI, w, f.bundle(), nullptr);
  EXPECT_NEAR(phi.report.l1_term, mean_abs_diff(f.phi_pred, f.phi_true), 1e-12);
  EXPECT_NEAR(phi.report.total, 100 * phi.report.l1_term, 1e-9);
  EXPECT_EQ(phi.report.gan_g_term, 0.0);
  EXPECT_FALSE(phi.d_objective.has_value());
  const auto y = compound_loss<double>(LossVariant::L1_Y, w, f.bundle(), nullptr);
  EXPECT_NEAR(y.report.l1_term, mean_abs_diff(f.y_pred, f.y_true), 1e-12);
  EXPECT_NEAR(y.report.total, 100 * y.report.l1_term, 1e-9);
}

TEST(CompoundLoss, WeightedSumForEveryGanVariant) {
  const auto f = make_fixture(3);
  const LossWeights w{7, 3};
  for (auto v : kAllVariants) {
    if (!uses_gan(v)) continue;
    const Discriminator<double> d(disc_for(v), 4);
    const auto r = compound_loss<double>(v, w, f.bundle(), &d);
    ASSERT_TRUE(r.d_objective.has_value()) << variant_name(v);
    EXPECT_NEAR(r.report.total, 7 * r.report.l1_term + 3 * r.report.gan_g_term, 1e-9) << variant_name(v);
    if (!uses_l1(v)) {
      EXPECT_EQ(r.report.l1_term, 0.0);
    }
    // Independent evaluation of the generator's adversarial term.
    const Tensor<double> mag = gan_sees_magnitude(v) ? magnitude(f.phi_pred) : Tensor<double>{};
    const auto logits = d.forward(f.x, f.y_pred, mag);
    double g = 0;
    for (double z : logits.data()) g += softplus(-z);
    EXPECT_NEAR(r.report.gan_g_term, g / logits.size(), 1e-12) << variant_name(v);
  }
}

TEST(CompoundLoss, RequiresMatchingDiscriminator) {
  const auto f = make_fixture(4);
  const Discriminator<double> d2(disc_for(LossVariant::L1_PHI_PLUS_GAN_Y), 1);
  EXPECT_THROW(compound_loss<double>(LossVariant::GAN_Y_MAG, {0, 1}, f.bundle(), &d2), std::invalid_argument);
  EXPECT_THROW(compound_loss<double>(LossVariant::GAN_Y_MAG, {0, 1}, f.bundle(), nullptr), std::invalid_argument);
  auto b = f.bundle();
  b.phi_true = Tensor<double>::zeros({3, 8, 8, 4});
  EXPECT_THROW(compound_loss<double>(LossVariant::L1_PHI, {1, 0}, b, nullptr), std::invalid_argument);
}

TEST(CompoundLoss, DiscriminatorObjectiveSeesOnlyDetachedFakes) {
  const auto v = LossVariant::L1_PHI_PLUS_GAN_Y_MAG;
  auto f = make_fixture(5);
  const Discriminator<double> d(disc_for(v), 2);
  auto dp = d.parameters();
  const auto obj = discriminator_objective(v, f.bundle(), d);
  obj.backward();
  EXPECT_FALSE(f.phi_pred.has_grad());
  EXPECT_FALSE(f.y_pred.has_grad());
  for (auto& p : dp) EXPECT_TRUE(p.tensor.has_grad()) << p.name;
}

TEST(CompoundLoss, FrozenDiscriminatorReceivesNoGradient) {
  const auto v = LossVariant::L1_PHI_PLUS_GAN_Y;
  auto f = make_fixture(6);
  const Discriminator<double> d(disc_for(v), 3);
  auto dp = d.parameters();
  set_trainable(dp, false);
  const auto r = compound_loss<double>(v, {100, 1}, f.bundle(), &d, false);
  EXPECT_FALSE(r.d_objective.has_value());
  r.generator_objective.backward();
  for (auto& p : dp) EXPECT_FALSE(p.tensor.has_grad()) << p.name;
  EXPECT_TRUE(f.phi_pred.has_grad());
  EXPECT_TRUE(f.y_pred.has_grad());
}

TEST(CompoundLoss, GeneratorGradientMatchesFiniteDifferences) {
  auto f = make_fixture(7);
  for (auto v : kAllVariants) {
    const Discriminator<double> d(disc_for(v), 8);
    auto dp = d.parameters();
    set_trainable(dp, false);
    const auto r = testutil::grad_check(
        [&] {
          return compound_loss<double>(v, {2, 1}, {f.x, f.y_true, f.phi_true, f.phi_pred, f.y_pred}, &d, false)
              .generator_objective;
        },
        {f.phi_pred, f.y_pred}, 30, 1e-5, 1e-5);
    EXPECT_LT(r.max_rel_err, 1e-4) << variant_name(v);
  }
}

TEST(WeightedObjective, ZeroWeightKillsGradient) {
  std::mt19937_64 rng(9);
  auto a = random_tensor({1}, rng), b = random_tensor({1}, rng);
  weighted_objective(a, b, 2.0, 0.0).backward();
  EXPECT_EQ(a.grad()[0], 2.0);
  EXPECT_EQ(b.grad()[0], 0.0);
}
