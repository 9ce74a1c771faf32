#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support.hpp"

using namespace comalign;
using matching::SimilarityBundle;
using num::Tape;
using num::Tensor;
using num::Var;
using objective::LossFlags;
using testing_support::random_matrix;

namespace {

SimilarityBundle uniform_bundle(std::size_t B, double value) {
  const Tensor u = Tensor(std::vector<std::size_t>{B, B}, value);
  return {u, u, u, u, u, u};
}

SimilarityBundle random_bundle(std::mt19937_64& rng, std::size_t B, double scale = 1.0) {
  return {random_matrix(rng, B, B, scale), random_matrix(rng, B, B, scale), random_matrix(rng, B, B, scale),
          random_matrix(rng, B, B, scale), random_matrix(rng, B, B, scale), random_matrix(rng, B, B, scale)};
}

// Direct transcription with log-sum-exp written naively.
double row_oracle(const Tensor& s, std::size_t i, double tau) {
  double z = 0.0;
  for (std::size_t j = 0; j < s.cols(); ++j) z += std::exp(s(i, j) / tau);
  return -std::log(std::exp(s(i, i) / tau) / z);
}

double total_oracle(const SimilarityBundle& b, const LossFlags& f) {
  const std::size_t B = b.batch();
  double s = 0.0;
  for (std::size_t i = 0; i < B; ++i) {
    if (f.use_entity) s += row_oracle(b.i2t_entity, i, f.temperature) + row_oracle(b.t2i_entity, i, f.temperature);
    if (f.use_relation)
      s += row_oracle(b.i2t_relation, i, f.temperature) + row_oracle(b.t2i_relation, i, f.temperature);
    if (f.use_global) s += row_oracle(b.i2t_global, i, f.temperature) + row_oracle(b.t2i_global, i, f.temperature);
  }
  return s / (2.0 * B);
}

}  // namespace

TEST(InfoNce, SingleItemIsZero) {
  const std::vector<double> s{0.37};
  EXPECT_EQ(objective::info_nce_row(s, 0, 1.0), 0.0);
  EXPECT_EQ(objective::total_loss(uniform_bundle(1, 0.8), {}), 0.0);
}

TEST(InfoNce, UniformRowIsLogB) {
  const std::vector<double> s(4, 0.3);
  EXPECT_NEAR(objective::info_nce_row(s, 2, 1.0), std::log(4.0), 1e-15);
}

TEST(InfoNce, TwoItemExample) {
  const std::vector<double> s{2.0, 0.0};
  EXPECT_NEAR(objective::info_nce_row(s, 0, 1.0), 0.126928011, 1e-9);
  EXPECT_NEAR(objective::info_nce_row(s, 1, 1.0), 2.126928011, 1e-9);
}

TEST(InfoNce, ShiftInvariant) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> s(6), t(6);
    const double c = 10.0 * n(rng);
    for (std::size_t j = 0; j < 6; ++j) {
      s[j] = n(rng);
      t[j] = s[j] + c;
    }
    EXPECT_NEAR(objective::info_nce_row(s, 3, 0.5), objective::info_nce_row(t, 3, 0.5), 1e-12);
  }
}

TEST(InfoNce, StableAtSmallTemperature) {
  const std::vector<double> s{1.0, 0.5, -1.0};
  const double v = objective::info_nce_row(s, 1, 1e-3);
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, 500.0, 1e-9);
}

TEST(TotalLoss, UniformBundleIsThreeLogB) {
  EXPECT_NEAR(objective::total_loss(uniform_bundle(4, 0.25), {}), 3.0 * std::log(4.0), 1e-14);
}

TEST(TotalLoss, IdentityBundleMatchesClosedForm) {
  const Tensor I = Tensor::identity(4);
  const SimilarityBundle b{I, I, I, I, I, I};
  const double row = -std::log(std::exp(1.0) / (std::exp(1.0) + 3.0));
  EXPECT_NEAR(objective::total_loss(b, {}), 3.0 * row, 1e-14);
}

TEST(TotalLoss, MatchesOracleOnRandomBundles) {
  std::mt19937_64 rng(2);
  for (int rep = 0; rep < 50; ++rep) {
    const auto b = random_bundle(rng, 1 + rep % 7);
    LossFlags f;
    f.temperature = 0.2 + 0.1 * (rep % 5);
    f.use_relation = rep % 3 != 0;
    EXPECT_NEAR(objective::total_loss(b, f), total_oracle(b, f), 1e-10);
  }
}

TEST(TotalLoss, ChannelsAreAdditive) {
  std::mt19937_64 rng(3);
  const auto b = random_bundle(rng, 5);
  double parts = 0.0;
  for (int c = 0; c < 3; ++c) {
    LossFlags f{c == 2, c == 0, c == 1, 1.0};
    parts += objective::total_loss(b, f);
  }
  EXPECT_NEAR(objective::total_loss(b, {}), parts, 1e-12);
}

TEST(TotalLoss, ThreeIdenticalChannelsTripleOne) {
  std::mt19937_64 rng(4);
  const Tensor s = random_matrix(rng, 6, 6);
  const SimilarityBundle b{s, s, s, s, s, s};
  EXPECT_NEAR(objective::total_loss(b, {}), 3.0 * objective::total_loss(b, {true, false, false, 1.0}), 1e-12);
}

TEST(TotalLoss, SwappingDirectionsWithTransposeIsInvariant) {
  std::mt19937_64 rng(5);
  const auto b = random_bundle(rng, 4);
  const SimilarityBundle swapped{b.t2i_entity, b.i2t_entity, b.t2i_relation, b.i2t_relation, b.t2i_global, b.i2t_global};
  EXPECT_NEAR(objective::total_loss(b, {}), objective::total_loss(swapped, {}), 1e-14);
}

TEST(TotalLoss, BreakdownIsConsistent) {
  std::mt19937_64 rng(6);
  const auto b = random_bundle(rng, 5);
  const auto br = objective::breakdown(b, {});
  double sum = 0.0;
  for (int k = 0; k < 3; ++k) sum += br.i2t[k] + br.t2i[k];
  EXPECT_NEAR(br.total, 0.5 * sum, 1e-12);
}

TEST(TotalLoss, RejectsAllChannelsDisabled) {
  EXPECT_THROW(objective::total_loss(uniform_bundle(2, 0.0), {false, false, false, 1.0}), ConfigError);
  EXPECT_THROW(objective::total_loss(uniform_bundle(2, 0.0), {true, true, true, 0.0}), ConfigError);
}

TEST(TotalLoss, RejectsNonSquare) {
  auto b = uniform_bundle(3, 0.0);
  b.t2i_relation = Tensor::matrix(3, 2);
  EXPECT_THROW(objective::total_loss(b, {}), DimensionError);
}

namespace {

Var loss_graph(Tape& t, std::span<const Var> v, const LossFlags& f) {
  matching::BundleVars b{v[0], v[1], v[2], v[3], v[4], v[5]};
  return objective::contrastive_loss(t, b, f);
}

}  // namespace

TEST(ContrastiveLoss, TapeValueEqualsTotalLoss) {
  std::mt19937_64 rng(7);
  const auto b = random_bundle(rng, 4);
  Tape t;
  matching::BundleVars v{t.parameter(b.i2t_entity),   t.parameter(b.t2i_entity), t.parameter(b.i2t_relation),
                         t.parameter(b.t2i_relation), t.parameter(b.i2t_global), t.parameter(b.t2i_global)};
  EXPECT_EQ(t.value(objective::contrastive_loss(t, v, {}))[0], objective::total_loss(b, {}));
}

TEST(ContrastiveLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  for (double tau : {1.0, 0.3}) {
    // Logits of unit spread keep every softmax entry well away from zero.
    const auto b = random_bundle(rng, 4, tau);
    LossFlags f;
    f.temperature = tau;
    auto graph = [&](Tape& t, std::span<const Var> v) { return loss_graph(t, v, f); };
    const auto r = num::finite_diff_check(
        graph, {b.i2t_entity, b.t2i_entity, b.i2t_relation, b.t2i_relation, b.i2t_global, b.t2i_global}, 1e-6);
    EXPECT_LT(r.max_rel_err, 1e-6) << "tau " << tau << " analytic " << r.analytic << " numeric " << r.numeric;
  }
}

TEST(ContrastiveLoss, DisabledChannelGetsZeroGradient) {
  std::mt19937_64 rng(9);
  const auto b = random_bundle(rng, 3);
  Tape t;
  matching::BundleVars v{t.parameter(b.i2t_entity),   t.parameter(b.t2i_entity), t.parameter(b.i2t_relation),
                         t.parameter(b.t2i_relation), t.parameter(b.i2t_global), t.parameter(b.t2i_global)};
  t.backward(objective::contrastive_loss(t, v, {true, true, false, 1.0}));
  const Tensor gi = t.grad(v.i2t_relation), gt = t.grad(v.t2i_relation), ge = t.grad(v.i2t_entity);
  for (double g : gi.data()) EXPECT_EQ(g, 0.0);
  for (double g : gt.data()) EXPECT_EQ(g, 0.0);
  double mag = 0.0;
  for (double g : ge.data()) mag += std::abs(g);
  EXPECT_GT(mag, 0.0);
}

TEST(ContrastiveLoss, GradientRowsSumToZero) {
  // Softmax minus one-hot sums to zero along each row.
  std::mt19937_64 rng(10);
  const auto b = random_bundle(rng, 5);
  Tape t;
  matching::BundleVars v{t.parameter(b.i2t_entity),   t.parameter(b.t2i_entity), t.parameter(b.i2t_relation),
                         t.parameter(b.t2i_relation), t.parameter(b.i2t_global), t.parameter(b.t2i_global)};
  t.backward(objective::contrastive_loss(t, v, {}));
  const Tensor g = t.grad(v.i2t_global);
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0.0;
    for (double x : g.row(i)) s += x;
    EXPECT_NEAR(s, 0.0, 1e-15);
  }
}
