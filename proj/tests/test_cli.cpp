#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>
#include <sys/wait.h>

#include "comalign/cli.hpp"
#include "support.hpp"

using namespace comalign;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

const std::vector<std::string> kShape{"--dim", "16", "--entities", "3", "--relations", "3"};

std::vector<std::string> with_shape(std::vector<std::string> args) {
  args.insert(args.end(), kShape.begin(), kShape.end());
  return args;
}

// Builds data and a 2-epoch checkpoint once for the suite.
class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = testing_support::scratch_dir("cli_pipeline");
    ASSERT_EQ(run(with_shape({"synth-data", "--pairs", "24", "--seed", "1", "-o", (dir_ / "train").string()})).code, 0);
    ASSERT_EQ(run(with_shape({"synth-data", "--pairs", "12", "--seed", "2", "-o", (dir_ / "test").string()})).code, 0);
    ASSERT_EQ(run(with_shape({"synth-data", "--kind", "triples", "--count", "6", "--seed", "3", "-o",
                              (dir_ / "triples").string()}))
                  .code,
              0);
    const auto r = run(with_shape({"train", "--data", (dir_ / "train").string(), "-o", (dir_ / "ckpt").string(),
                                   "--epochs", "2", "--batch", "8", "--heads", "2", "--layers", "1", "--lr0",
                                   "1e-3", "--quiet"}));
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static fs::path dir_;
  static std::string ckpt() { return (dir_ / "ckpt" / "last.json").string(); }
};
fs::path Pipeline::dir_;

}  // namespace

TEST(Cli, HelpExitsZero) {
  EXPECT_EQ(run({"--help"}).code, 0);
  EXPECT_EQ(run({"train", "--help"}).code, 0);
}

TEST(Cli, UnknownFlagIsUsageError) {
  const auto r = run({"train", "--no-such-flag", "1"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("error"), std::string::npos);
}

TEST(Cli, MissingSubcommandIsUsageError) { EXPECT_EQ(run({}).code, 1); }

TEST(Cli, SynthDataIsDeterministic) {
  const auto dir = testing_support::scratch_dir("cli_synth");
  for (const char* name : {"a", "b"})
    ASSERT_EQ(run(with_shape({"synth-data", "--pairs", "10", "--seed", "7", "-o", (dir / name).string()})).code, 0);
  EXPECT_EQ(slurp(dir / "a" / "records.jsonl"), slurp(dir / "b" / "records.jsonl"));
  EXPECT_EQ(slurp(dir / "a" / "pairs.jsonl"), slurp(dir / "b" / "pairs.jsonl"));
  ASSERT_EQ(run(with_shape({"synth-data", "--pairs", "10", "--seed", "8", "-o", (dir / "c").string()})).code, 0);
  EXPECT_NE(slurp(dir / "a" / "records.jsonl"), slurp(dir / "c" / "records.jsonl"));
}

TEST(Cli, MissingDataIsFormatError) {
  const auto dir = testing_support::scratch_dir("cli_missing");
  EXPECT_EQ(run({"train", "--data", (dir / "nope").string(), "-o", (dir / "out").string()}).code, 1);
}

TEST(Cli, DimensionMismatchExitsOne) {
  const auto dir = testing_support::scratch_dir("cli_dim");
  ASSERT_EQ(run(with_shape({"synth-data", "--pairs", "4", "-o", dir.string()})).code, 0);
  EXPECT_EQ(run({"train", "--data", dir.string(), "-o", (dir / "out").string(), "--dim", "8", "--quiet"}).code, 1);
}

TEST(Cli, ConfigFileWithFlagOverride) {
  const auto dir = testing_support::scratch_dir("cli_config");
  ASSERT_EQ(run(with_shape({"synth-data", "--pairs", "6", "-o", (dir / "d").string()})).code, 0);
  std::ofstream(dir / "run.cfg") << "dim = 16\nn_entities = 3\nm_relations = 3\nheads = 2\nlayers = 1\n"
                                    "epochs = 3\nbatch_size = 4\n";
  const auto r = run({"train", "--config", (dir / "run.cfg").string(), "--epochs", "1", "--data",
                      (dir / "d").string(), "-o", (dir / "out").string(), "--quiet"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto ck = training::read_checkpoint(dir / "out" / "last.json");
  EXPECT_EQ(ck.config.epochs, 1u);
  EXPECT_EQ(ck.config.batch_size, 4u);
  std::ofstream(dir / "bad.cfg") << "nonsense_key = 1\n";
  EXPECT_EQ(run({"train", "--config", (dir / "bad.cfg").string(), "--data", (dir / "d").string(), "-o",
                 (dir / "out2").string()})
                .code,
            1);
}

TEST(Cli, GradCheckPasses) {
  const auto r = run({"grad-check", "--dim", "16", "--batch", "3", "--seed", "1"});
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("max_rel_err"), std::string::npos);
}

TEST(Cli, RelationCandidatesCsv) {
  const auto dir = testing_support::scratch_dir("cli_boxes");
  std::ofstream(dir / "boxes.json") << "[[0,0,2,2,0.9],[1,1,3,4,0.8],[5,5,6,6,0.5]]";
  const auto r = run({"relation-candidates", "--boxes", (dir / "boxes.json").string(), "-m", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, "subject,object,x1,y1,x2,y2,score\n0,1,0,0,3,4,0.72\n0,2,0,0,6,6,0.45\n");
}

TEST(Cli, BinaryExitCodesFromProcess) {
  const std::string bin = COMALIGN_CLI_PATH;
  ASSERT_TRUE(fs::exists(bin)) << bin;
  auto status = [&](const std::string& args) {
    const int s = std::system((bin + " " + args + " > /dev/null 2>&1").c_str());
    return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
  };
  EXPECT_EQ(status("--help"), 0);
  EXPECT_EQ(status("train --bogus"), 1);
  EXPECT_EQ(status("grad-check --dim 16 --batch 3 --seed 1 --tolerance 1e-30"), 2);
}

TEST_F(Pipeline, TrainWritesCheckpointsAndLossLog) {
  EXPECT_TRUE(fs::exists(dir_ / "ckpt" / "last.json"));
  EXPECT_TRUE(fs::exists(dir_ / "ckpt" / "best.json"));
  std::istringstream log(slurp(dir_ / "ckpt" / "loss.csv"));
  std::string line;
  std::getline(log, line);
  EXPECT_EQ(line, "epoch,lr,L_total,L_I2T_E,L_I2T_R,L_I2T_G,L_T2I_E,L_T2I_R,L_T2I_G");
  int rows = 0;
  while (std::getline(log, line)) ++rows;
  EXPECT_EQ(rows, 2);
}

TEST_F(Pipeline, EvalRetrievalMatchesLibrary) {
  const auto r = run({"eval-retrieval", "--checkpoint", ckpt(), "--data", (dir_ / "test").string(), "--csv",
                      (dir_ / "report.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto ck = training::read_checkpoint(ckpt());
  const auto lib = inference::eval_retrieval(ingestion::read_retrieval_set(dir_ / "test"), ck, inference::weights(ck.config));
  std::ostringstream expected;
  inference::write_report_csv(expected, lib);
  EXPECT_EQ(slurp(dir_ / "report.csv"), expected.str());
  EXPECT_NE(r.out.find("R@1"), std::string::npos);
}

TEST_F(Pipeline, ScoreEqualsLibraryScore) {
  const auto r = run({"score", "--checkpoint", ckpt(), "--data", (dir_ / "test").string(), "--image", "img-000003",
                      "--text", "txt-000003", "--alpha1", "0.2"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto ck = training::read_checkpoint(ckpt());
  const auto set = ingestion::read_retrieval_set(dir_ / "test");
  auto w = inference::weights(ck.config);
  w.alpha1 = 0.2;
  const auto table = inference::pair_table(set.images, set.texts, ck);
  const auto p = table.at(3, 3, w);
  EXPECT_NE(r.out.find("s_i2t " + matching::format_g9(p.i2t) + "\n"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("s_t2i " + matching::format_g9(p.t2i) + "\n"), std::string::npos) << r.out;
}

TEST_F(Pipeline, ScoreUnknownIdExitsOne) {
  EXPECT_EQ(run({"score", "--checkpoint", ckpt(), "--data", (dir_ / "test").string(), "--image", "nope", "--text",
                 "txt-000000"})
                .code,
            1);
}

TEST_F(Pipeline, EvalBinaryWritesPredictions) {
  const auto r = run({"eval-binary", "--checkpoint", ckpt(), "--data", (dir_ / "triples").string(), "--csv",
                      (dir_ / "binary.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.rfind("accuracy ", 0), 0u);
  std::istringstream csv(slurp(dir_ / "binary.csv"));
  std::string line;
  int rows = -1;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 6);
}

TEST_F(Pipeline, DumpSimilarityShape) {
  const auto r = run({"dump-similarity", "--checkpoint", ckpt(), "--data", (dir_ / "test").string(), "--image",
                      "img-000000", "--text", "txt-000000", "--kind", "relation"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream csv(r.out);
  std::string line;
  int rows = 0;
  while (std::getline(csv, line)) {
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 2);
    ++rows;
  }
  EXPECT_EQ(rows, 3);
}

TEST_F(Pipeline, SweepHasOneRowPerGridPoint) {
  const auto r = run({"sweep", "--checkpoint", ckpt(), "--data", (dir_ / "test").string(), "--alpha1-grid",
                      "0,0.1", "--alpha2-grid", "0", "--beta1-grid", "0,0.33,1"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream csv(r.out);
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "alpha1,alpha2,beta1,R1_I2T,R1_T2I");
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 6);
}

TEST_F(Pipeline, CheckpointArchitectureCannotBeOverridden) {
  // Only weights override a stored config; an encoder flag is ignored at eval.
  const auto a = run({"eval-retrieval", "--checkpoint", ckpt(), "--data", (dir_ / "test").string()});
  const auto b = run({"eval-retrieval", "--checkpoint", ckpt(), "--data", (dir_ / "test").string(), "--layers", "5"});
  EXPECT_EQ(a.out, b.out);
}
