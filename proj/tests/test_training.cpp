#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "support.hpp"

using namespace comalign;
using ingestion::PairedDataset;
using ingestion::SynthOptions;
using num::Tensor;
using training::RunConfig;

namespace {

RunConfig small_config() {
  RunConfig c;
  c.dim = 16;
  c.n_entities = 3;
  c.m_relations = 3;
  c.heads = 2;
  c.layers = 1;
  c.batch_size = 8;
  c.epochs = 2;
  c.lr0 = 1e-3;
  c.seed = 5;
  return c;
}

PairedDataset small_data(std::size_t count, std::uint64_t seed, double noise = 0.25) {
  SynthOptions o;
  o.count = count;
  o.dim = 16;
  o.n_entities = 3;
  o.m_relations = 3;
  o.noise_sigma = noise;
  o.seed = seed;
  return ingestion::synth_pairs(o);
}

std::vector<Tensor> flatten(const encoder::EncoderParams& p) {
  std::vector<Tensor> out;
  encoder::visit(p, [&](const std::string&, const Tensor& t) { out.push_back(t); });
  return out;
}

}  // namespace

TEST(AdamW, FirstStepMovesByLearningRate) {
  Tensor p = Tensor::vector({0.0});
  std::vector<Tensor*> ps{&p};
  auto s = training::init_state(ps);
  training::adamw_step(ps, {Tensor::vector({1.0})}, s, {1e-3, 0.9, 0.999, 1e-8, 0.0});
  EXPECT_NEAR(p[0], -9.99999995e-4, 1e-11);
}

TEST(AdamW, FirstStepWithDecayExample) {
  // Adam part 0.5 / (0.5 + 1e-8) and decay 0.01 * 1.0, both times lr.
  Tensor p = Tensor::vector({1.0});
  std::vector<Tensor*> ps{&p};
  auto s = training::init_state(ps);
  training::adamw_step(ps, {Tensor::vector({0.5})}, s, {1e-3, 0.9, 0.999, 1e-8, 0.01});
  EXPECT_NEAR(p[0] - 1.0, -1e-3 * (0.5 / (0.5 + 1e-8) + 0.01), 1e-15);
}

TEST(AdamW, ZeroGradientIsPureDecay) {
  Tensor p = Tensor::vector({2.0, -4.0});
  std::vector<Tensor*> ps{&p};
  auto s = training::init_state(ps);
  training::adamw_step(ps, {Tensor::vector({0.0, 0.0})}, s, {0.1, 0.9, 0.999, 1e-8, 0.5});
  EXPECT_NEAR(p[0], 2.0 * (1.0 - 0.05), 1e-15);
  EXPECT_NEAR(p[1], -4.0 * (1.0 - 0.05), 1e-15);
}

TEST(AdamW, ZeroLearningRateLeavesParameters) {
  Tensor p = Tensor::vector({0.3, -0.7});
  const Tensor before = p;
  std::vector<Tensor*> ps{&p};
  auto s = training::init_state(ps);
  for (int k = 0; k < 5; ++k) training::adamw_step(ps, {Tensor::vector({1.0, -2.0})}, s, {0.0, 0.9, 0.999, 1e-8, 0.01});
  EXPECT_EQ(p, before);
}

TEST(AdamW, RejectsNonFiniteGradient) {
  Tensor p = Tensor::vector({0.0});
  std::vector<Tensor*> ps{&p};
  auto s = training::init_state(ps);
  EXPECT_THROW(training::adamw_step(ps, {Tensor::vector({std::nan("")})}, s, {}), NumericalError);
}

TEST(StepLr, HalvesEveryStep) {
  EXPECT_EQ(training::steplr(1e-4, 0, 10, 0.5), 1e-4);
  EXPECT_EQ(training::steplr(1e-4, 9, 10, 0.5), 1e-4);
  EXPECT_EQ(training::steplr(1e-4, 10, 10, 0.5), 5e-5);
  EXPECT_EQ(training::steplr(1e-4, 29, 10, 0.5), 2.5e-5);
}

TEST(ClipGlobalNorm, ScalesToMaximum) {
  std::vector<Tensor> g{Tensor::vector({3.0}), Tensor::vector({4.0})};
  EXPECT_EQ(training::clip_global_norm(g, 1.0), 5.0);
  EXPECT_NEAR(g[0][0], 0.6, 1e-15);
  EXPECT_NEAR(g[1][0], 0.8, 1e-15);
  std::vector<Tensor> h{Tensor::vector({0.3})};
  training::clip_global_norm(h, 1.0);
  EXPECT_EQ(h[0][0], 0.3);
}

TEST(Config, TextRoundTrip) {
  RunConfig c = small_config();
  c.tau = 0.07;
  c.architecture = "mlp_shared";
  c.use_relation = false;
  std::istringstream in(training::to_config_text(c));
  RunConfig back;
  training::apply_config_text(back, in);
  EXPECT_EQ(back, c);
}

TEST(Config, ParsesCommentsAndWhitespace) {
  std::istringstream in("# header\n  tau = 0.5  # inline\n\nbatch_size=16\nuse_global = false\n");
  RunConfig c;
  training::apply_config_text(c, in);
  EXPECT_EQ(c.tau, 0.5);
  EXPECT_EQ(c.batch_size, 16u);
  EXPECT_FALSE(c.use_global);
}

TEST(Config, UnknownKeyIsRejected) {
  std::istringstream in("learning_rate = 0.1\n");
  RunConfig c;
  EXPECT_THROW(training::apply_config_text(c, in), ConfigError);
}

TEST(Config, BadValuesAreRejected) {
  RunConfig c;
  EXPECT_THROW(training::set_field(c, "batch_size", "-3"), ConfigError);
  EXPECT_THROW(training::set_field(c, "tau", "abc"), ConfigError);
  EXPECT_THROW(training::set_field(c, "shuffle", "maybe"), ConfigError);
  c.use_entity = c.use_relation = c.use_global = false;
  EXPECT_THROW(training::validate(c), ConfigError);
}

TEST(Checkpoint, RoundTripIsExact) {
  const auto dir = testing_support::scratch_dir("ckpt");
  const auto ds = small_data(8, 1);
  const auto r = training::train(ds, small_config());
  training::write_checkpoint(dir / "m.json", r.last);
  const auto back = training::read_checkpoint(dir / "m");
  EXPECT_EQ(back.config, r.last.config);
  EXPECT_EQ(back.final_loss, r.last.final_loss);
  EXPECT_EQ(flatten(back.image), flatten(r.last.image));
  EXPECT_EQ(flatten(back.text), flatten(r.last.text));
}

TEST(Checkpoint, ReloadReproducesFinalLoss) {
  const auto dir = testing_support::scratch_dir("ckpt_loss");
  const auto ds = small_data(4, 2);
  RunConfig c = small_config();
  c.batch_size = 4;
  c.epochs = 1;
  training::TrainOptions opt;
  opt.out_dir = dir;
  const auto r = training::train(ds, c, opt);
  const auto back = training::read_checkpoint(dir / "last.json");
  EXPECT_EQ(training::evaluate_loss(ds, back), r.last.final_loss);
  EXPECT_TRUE(std::filesystem::exists(dir / "best.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "loss.csv"));
}

TEST(Checkpoint, CorruptFilesAreFormatErrors) {
  const auto dir = testing_support::scratch_dir("ckpt_bad");
  std::ofstream(dir / "a.json") << "{not json";
  std::ofstream(dir / "b.json") << R"({"format":"other"})";
  EXPECT_THROW(training::read_checkpoint(dir / "a.json"), FormatError);
  EXPECT_THROW(training::read_checkpoint(dir / "b.json"), FormatError);
  EXPECT_THROW(training::read_checkpoint(dir / "missing.json"), FormatError);
}

TEST(Train, ZeroLearningRateKeepsInitialization) {
  RunConfig c = small_config();
  c.lr0 = 0.0;
  c.weight_decay = 0.5;
  const auto r = training::train(small_data(16, 3), c);
  const auto init = training::round_to_f32(
      encoder::init_params(training::encoder_config(c, ingestion::Modality::image), c.seed));
  EXPECT_EQ(flatten(r.last.image), flatten(init));
}

TEST(Train, IsDeterministic) {
  const auto ds = small_data(16, 4);
  const auto a = training::train(ds, small_config());
  const auto b = training::train(ds, small_config());
  EXPECT_EQ(flatten(a.last.image), flatten(b.last.image));
  EXPECT_EQ(flatten(a.last.text), flatten(b.last.text));
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t e = 0; e < a.log.size(); ++e) EXPECT_EQ(a.log[e].loss.total, b.log[e].loss.total);
}

TEST(Train, FrozenTextEncoderStaysBitIdentical) {
  RunConfig c = small_config();
  c.train_text_encoder = false;
  const auto r = training::train(small_data(16, 5), c);
  const auto init = training::round_to_f32(
      encoder::init_params(training::encoder_config(c, ingestion::Modality::text), c.seed));
  EXPECT_EQ(flatten(r.last.text), flatten(init));
  EXPECT_NE(flatten(r.last.image), flatten(init));
}

TEST(Train, BypassWithZeroNoiseMatchesClosedForm) {
  RunConfig c = small_config();
  c.image_bypass = c.text_bypass = true;
  c.epochs = 0;
  c.batch_size = 4;
  const auto ds = small_data(4, 6, 0.0);
  const auto r = training::train(ds, c);
  // Bypass heads only renormalize; stored vectors are unit up to binary32 rounding.
  const auto prep = training::prepare(ds, c);
  const double expected = objective::total_loss(matching::batch_similarities(prep.images, prep.texts), {});
  EXPECT_NEAR(r.last.final_loss, expected, 1e-7);
  // Matched pairs share every latent, so the diagonal is 1 in every channel.
  const auto b = matching::batch_similarities(prep.images, prep.texts);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(b.i2t_entity(i, i), 1.0, 1e-6);
    EXPECT_NEAR(b.t2i_relation(i, i), 1.0, 1e-6);
  }
}

TEST(Train, LossCsvHasOneRowPerEpoch) {
  const auto dir = testing_support::scratch_dir("losscsv");
  training::TrainOptions opt;
  opt.out_dir = dir;
  RunConfig c = small_config();
  c.epochs = 3;
  const auto r = training::train(small_data(16, 7), c, opt);
  std::ifstream in(dir / "loss.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, training::loss_csv_header());
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    EXPECT_EQ(line, training::loss_csv_row(r.log[rows]));
    ++rows;
  }
  EXPECT_EQ(rows, 3u);
}

TEST(Train, LossMostlyNonIncreasing) {
  RunConfig c = small_config();
  c.epochs = 30;
  c.batch_size = 16;
  c.lr0 = 1e-3;
  c.tau = 0.1;
  const auto r = training::train(small_data(64, 8), c);
  std::size_t ok = 0;
  for (std::size_t e = 1; e < r.log.size(); ++e) ok += r.log[e].loss.total <= r.log[e - 1].loss.total;
  EXPECT_GE(static_cast<double>(ok), 0.8 * static_cast<double>(r.log.size() - 1));
  EXPECT_LT(r.log.back().loss.total, r.log.front().loss.total);
}

TEST(Train, RejectsTooFewPairs) {
  EXPECT_THROW(training::train(small_data(1, 9), small_config()), ConfigError);
}

TEST(PipelineGradients, TwoPairBatchMatchesFiniteDifferences) {
  RunConfig c = small_config();
  c.layers = 1;
  const auto g = training::check_pipeline_gradients(small_data(2, 10), c);
  EXPECT_LT(g.result.max_rel_err, 1e-5) << g.worst_parameter;
  EXPECT_GT(g.parameters, 0u);
}

class PipelineArchitecture : public ::testing::TestWithParam<const char*> {};

TEST_P(PipelineArchitecture, ThreePairBatchMatchesFiniteDifferences) {
  RunConfig c = small_config();
  c.architecture = GetParam();
  // Some entries are near 1e-8, where round-off dominates at smaller steps.
  const auto g = training::check_pipeline_gradients(small_data(3, 11), c, 1e-4);
  EXPECT_LT(g.result.max_rel_err, 1e-4) << g.worst_parameter;
}

INSTANTIATE_TEST_SUITE_P(All, PipelineArchitecture, ::testing::Values("transformer", "mlp_shared", "mlp_separate"));
