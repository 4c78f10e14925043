#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "rmsynth/nn/checkpoint.hpp"
#include "rmsynth/nn/networks.hpp"

using namespace rmsynth;
using namespace rmsynth::nn;
using testutil::grad_check;
using testutil::project;
using testutil::random_tensor;

namespace {

GeneratorConfig small_gen() {
  GeneratorConfig c;
  c.depth = 2;
  c.base_channels = 2;
  return c;
}

DiscriminatorConfig small_disc(int in_channels) {
  DiscriminatorConfig c;
  c.base_channels = 2;
  c.in_channels = in_channels;
  return c;
}

// Gives the head, gain and conditioning non-trivial values so every path
// carries signal.
template <class T>
void perturb(Generator<T>& g, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  g.head().w = nn::detail::random_tensor<T>(g.head().w.shape(), 0.2, rng);
  g.head().b = nn::detail::random_tensor<T>({3}, 0.1, rng);
  g.gain() = Tensor<T>::full({1}, T(0.7), true);
  g.conditioning() = Conditioning<T>::random(g.config().channels(g.config().depth), rng);
}

Tensor<double> ct_like(Shape s, std::mt19937_64& rng) { return random_tensor(std::move(s), rng, -1000, 100); }

}  // namespace

TEST(Generator, ZeroGainGivesZeroField) {
  Generator<float> g(small_gen(), 3);
  g.gain().mutable_data()[0] = 0.f;
  std::mt19937_64 rng(1);
  std::vector<float> x(16 * 16 * 16);
  std::uniform_real_distribution<float> d(-1000, 100);
  for (auto& v : x) v = d(rng);
  for (float a : {0.f, 0.5f, 1.f}) {
    const auto phi = g.forward(Tensor<float>({1, 16, 16, 16}, x), a);
    EXPECT_EQ(phi.shape(), (Shape{3, 16, 16, 16}));
    for (float v : phi.data()) ASSERT_EQ(v, 0.f);
  }
}

TEST(Generator, SeededConstructionIsReproducible) {
  const Generator<float> a(small_gen(), 9), b(small_gen(), 9), c(small_gen(), 10);
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool any_diff = false;
  for (std::size_t k = 0; k < pa.size(); ++k) {
    EXPECT_EQ(pa[k].name, pb[k].name);
    EXPECT_TRUE(std::equal(pa[k].tensor.data().begin(), pa[k].tensor.data().end(), pb[k].tensor.data().begin()));
    any_diff = any_diff || !std::equal(pa[k].tensor.data().begin(), pa[k].tensor.data().end(), pc[k].tensor.data().begin());
  }
  EXPECT_TRUE(any_diff);
}

TEST(Generator, RejectsIndivisibleInput) {
  const Generator<float> g(small_gen(), 1);
  EXPECT_THROW(g.forward(Tensor<float>::zeros({1, 16, 10, 16}), 0.f), std::invalid_argument);
  EXPECT_THROW(g.forward(Tensor<float>::zeros({1, 4, 4, 4}), 0.f), std::invalid_argument);
  EXPECT_THROW(g.forward(Tensor<float>::zeros({2, 16, 16, 16}), 0.f), std::invalid_argument);
  GeneratorConfig bad = small_gen();
  bad.depth = 1;
  EXPECT_THROW(Generator<float>(bad, 1), std::invalid_argument);
}

TEST(Generator, OutputDependsOnAmplitude) {
  Generator<double> g(small_gen(), 2);
  perturb(g, 5);
  std::mt19937_64 rng(2);
  const auto x = ct_like({1, 16, 16, 16}, rng);
  const auto a = g.forward(x, 0.2), b = g.forward(x, 0.8);
  double diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += std::abs(a.data()[i] - b.data()[i]);
  EXPECT_GT(diff / a.size(), 1e-4);
}

TEST(Generator, EndToEndGradient) {
  Generator<double> g(small_gen(), 4);
  perturb(g, 6);
  std::mt19937_64 rng(3);
  const auto x = ct_like({1, 16, 16, 16}, rng);
  std::vector<Tensor<double>> params;
  for (auto& p : g.parameters()) params.push_back(p.tensor);
  const auto r = grad_check([&] { return project(g.forward(x, 0.6)); }, params, 4, 1e-6, 1e-4);
  EXPECT_GE(r.checked, 50u);
  EXPECT_LT(r.max_rel_err, 1e-3);
}

TEST(Generator, FreshModelPassesGradientToEveryWeight) {
  Generator<double> g(small_gen(), 4);
  std::mt19937_64 rng(4);
  const auto x = ct_like({1, 16, 16, 16}, rng);
  auto target = random_tensor({3, 16, 16, 16}, rng);
  l1_mean(g.forward(x, 0.5), target).backward();
  for (auto& [name, p] : g.parameters()) {
    if (name.ends_with(".b") && name.rfind("cond.", 0) != 0) continue;
    double norm = 0;
    if (p.has_grad())
      for (double v : p.grad()) norm += std::abs(v);
    EXPECT_GT(norm, 0.0) << name;
  }
}

TEST(Discriminator, OutputShapeAndChannelChecks) {
  const Discriminator<double> d3(small_disc(3), 1), d2(small_disc(2), 1);
  std::mt19937_64 rng(5);
  const auto x = ct_like({1, 16, 12, 8}, rng), y = ct_like({1, 16, 12, 8}, rng);
  const auto m = random_tensor({1, 16, 12, 8}, rng, 0, 10);
  EXPECT_EQ(d3.forward(x, y, m).shape(), small_disc(3).output_shape({16, 12, 8}));
  EXPECT_EQ(d2.forward(x, y).shape(), (Shape{1, 4, 3, 2}));
  EXPECT_THROW(d3.forward(x, y), std::invalid_argument);
  EXPECT_THROW(d2.forward(x, y, m), std::invalid_argument);
  EXPECT_THROW(d2.forward(x, ct_like({1, 8, 12, 8}, rng)), std::invalid_argument);
  DiscriminatorConfig bad = small_disc(4);
  EXPECT_THROW(Discriminator<double>(bad, 1), std::invalid_argument);
}

TEST(Discriminator, Gradient) {
  const Discriminator<double> d(small_disc(3), 2);
  std::mt19937_64 rng(6);
  auto x = ct_like({1, 8, 8, 8}, rng), y = ct_like({1, 8, 8, 8}, rng);
  auto m = random_tensor({1, 8, 8, 8}, rng, 0, 10);
  std::vector<Tensor<double>> inputs{y, m};
  for (auto& p : d.parameters()) inputs.push_back(p.tensor);
  const auto r = grad_check([&] { return project(d.forward(x, y, m)); }, inputs, 12, 1e-6, 1e-4);
  EXPECT_LT(r.max_rel_err, 1e-3);
}

TEST(Checkpoint, ParameterRoundTrip) {
  Generator<float> a(small_gen(), 11);
  perturb(a, 12);
  Checkpoint ck;
  ck.meta["format"] = "test";
  store_params(ck, a.parameters(), "G.");
  const auto back = decode_checkpoint(encode_checkpoint(ck));
  EXPECT_EQ(back, ck);
  Generator<float> b(small_gen(), 99);
  auto pb = b.parameters();
  restore_params(back, pb, "G.");
  std::mt19937_64 rng(7);
  std::vector<float> x(16 * 16 * 16);
  std::uniform_real_distribution<float> d(-1000, 100);
  for (auto& v : x) v = d(rng);
  const Tensor<float> xt({1, 16, 16, 16}, x);
  const auto fa = a.forward(xt, 0.3f), fb = b.forward(xt, 0.3f);
  EXPECT_TRUE(std::equal(fa.data().begin(), fa.data().end(), fb.data().begin()));
}

TEST(Checkpoint, CorruptionIsReported) {
  Checkpoint ck;
  ck.meta["k"] = "v";
  ck.tensors.push_back({"t", {2, 2}, {1, 2, 3, 4}});
  auto bytes = encode_checkpoint(ck);
  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_THROW(decode_checkpoint(truncated), CheckpointError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(decode_checkpoint(trailing), CheckpointError);
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(magic), CheckpointError);
  ParamList<float> wrong{{"t", Tensor<float>::zeros({4})}};
  EXPECT_THROW(restore_params(ck, wrong, ""), CheckpointError);
  ParamList<float> missing{{"u", Tensor<float>::zeros({2, 2})}};
  EXPECT_THROW(restore_params(ck, missing, ""), CheckpointError);
}
