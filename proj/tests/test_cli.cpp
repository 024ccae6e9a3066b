#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "support.hpp"

namespace {

namespace fs = std::filesystem;
using namespace cfu;

struct Result {
  int code;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += line.empty() ? 0 : 1;
  return n;
}

Result cfu_run(const std::string& args, const fs::path& dir, const std::string& env = "") {
  const auto err = dir / "stderr.txt";
  const std::string cmd = env + " " + CFU_CLI_PATH + " " + args + " > " + (dir / "stdout.txt").string() +
                          " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(err)};
}

// Small dataset flags shared by the tests below.
const std::string kSmall =
    " --train-per-class 60 --test-per-class 60 --calib-per-class 60 --calib-unlearn-per-class 30"
    " --pool-extra-per-class 10";

class CliChain : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fixture::temp_dir("cli_chain");
    const auto d = dir_.string();
    ASSERT_EQ(cfu_run("gen-data --seed 4 --out-dir " + d + kSmall, dir_).code, 0);
    ASSERT_EQ(cfu_run("train --seed 4 --epochs 8 --data " + d + "/dataset.csv --split-file " + d +
                          "/splits.csv --out-dir " + d,
                      dir_)
                  .code,
              0);
  }
  std::string d() const { return dir_.string(); }
  std::string inputs() const { return " --data " + d() + "/dataset.csv --split-file " + d() + "/splits.csv"; }
  static inline fs::path dir_;
};

TEST_F(CliChain, FullChainWritesEveryArtifact) {
  auto r = cfu_run("unlearn --seed 4 --method finetune --lambda 0.5 --unlearn-epochs 2 --model " + d() +
                       "/original.ckpt --out-dir " + d() + inputs(),
                   dir_);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir_ / "finetune_lambda0.5.ckpt"));
  EXPECT_EQ(line_count(dir_ / "finetune_lambda0.5_epochs.csv"), 3u);

  r = cfu_run("predict --seed 4 --splits all --model " + d() + "/finetune_lambda0.5.ckpt --out " + d() +
                  "/ft.csv --out-dir " + d() + inputs(),
              dir_);
  ASSERT_EQ(r.code, 0) << r.err;
  r = cfu_run("predict --seed 4 --splits all --model " + d() + "/original.ckpt --out " + d() + "/orig.csv --out-dir " +
                  d() + inputs(),
              dir_);
  ASSERT_EQ(r.code, 0) << r.err;

  r = cfu_run("eval --seed 4 --alpha 0.1 --method original --predictions " + d() + "/orig.csv --split-file " + d() +
                  "/splits.csv --out " + d() + "/orig.json --out-dir " + d(),
              dir_);
  ASSERT_EQ(r.code, 0) << r.err;
  r = cfu_run("eval --seed 4 --alpha 0.1 --method finetune --lambda 0.5 --predictions " + d() +
                  "/ft.csv --split-file " + d() + "/splits.csv --retrain-report " + d() + "/orig.json --out " + d() +
                  "/ft.json --out-dir " + d(),
              dir_);
  ASSERT_EQ(r.code, 0) << r.err;
  r = cfu_run("mia --seed 4 --predictions " + d() + "/ft.csv --split-file " + d() + "/splits.csv --report " + d() +
                  "/ft.json --out-dir " + d(),
              dir_);
  ASSERT_EQ(r.code, 0) << r.err;

  const auto rep = load_report(d() + "/ft.json");
  EXPECT_EQ(rep.method, "finetune");
  EXPECT_EQ(rep.lambda, 0.5);
  EXPECT_EQ(rep.alpha, 0.1);
  EXPECT_TRUE(rep.mia.has_value());
  EXPECT_TRUE(rep.gap_to_retrain.contains("ua"));
  EXPECT_TRUE(fs::exists(dir_ / "attack.txt"));

  r = cfu_run("report --out-dir " + d() + " " + d() + "/orig.json " + d() + "/ft.json", dir_);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(line_count(dir_ / "comparison.csv"), 3u);
  EXPECT_NE(slurp(dir_ / "comparison.txt").find("finetune"), std::string::npos);

  // Every stage appended itself and every recorded output exists.
  const auto manifest = nlohmann::json::parse(slurp(dir_ / "manifest.json"));
  EXPECT_GE(manifest["stages"].size(), 8u);
  for (const auto& stage : manifest["stages"]) {
    EXPECT_TRUE(stage.contains("argv"));
    EXPECT_TRUE(stage.contains("config"));
    for (const auto& [name, path] : stage["outputs"].items()) EXPECT_TRUE(fs::exists(path.get<std::string>())) << name;
  }
}

TEST_F(CliChain, EvalOnIncompleteMatrixNamesMissingId) {
  ASSERT_EQ(cfu_run("predict --seed 4 --splits retain,test --model " + d() + "/original.ckpt --out " + d() +
                        "/partial.csv --out-dir " + d() + inputs(),
                    dir_)
                .code,
            0);
  const auto splits = load_splits(d() + "/splits.csv");
  const auto r = cfu_run("eval --predictions " + d() + "/partial.csv --split-file " + d() + "/splits.csv --out-dir " +
                             d() + "/bad",
                         dir_);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("id " + std::to_string(splits.forget.front())), std::string::npos) << r.err;
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
}

TEST_F(CliChain, UsageErrorsExitOne) {
  EXPECT_EQ(cfu_run("train --bogus-flag", dir_).code, 1);
  EXPECT_EQ(cfu_run("", dir_).code, 1);
  EXPECT_EQ(cfu_run("unlearn --method sparse --model " + d() + "/original.ckpt --out-dir " + d() + inputs(), dir_)
                .code,
            1);
  EXPECT_EQ(cfu_run("eval --predictions /nonexistent.csv --split-file " + d() + "/splits.csv", dir_).code, 1);
  EXPECT_EQ(cfu_run("gen-data --forget-class 9 --out-dir " + d() + "/x", dir_).code, 1);
}

TEST_F(CliChain, DivergenceExitsThree) {
  const auto r = cfu_run("train --lr 1e200 --out " + d() + "/boom.ckpt --out-dir " + d() + "/boom" + inputs(), dir_);
  EXPECT_EQ(r.code, 3) << r.err;
  EXPECT_NE(r.err.find("diverged"), std::string::npos);
}

TEST_F(CliChain, CalibStabilityWritesCurves) {
  ASSERT_EQ(cfu_run("predict --model " + d() + "/original.ckpt --out " + d() + "/all.csv --out-dir " + d() + inputs(),
                    dir_)
                .code,
            0);
  const auto out = d() + "/stab";
  const auto r = cfu_run("calib-stability --sizes 20,100 --repeats 5 --predictions " + d() + "/all.csv --split-file " +
                             d() + "/splits.csv --out-dir " + out,
                         dir_);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(line_count(fs::path(out) / "stability_raw.csv"), 11u);
  EXPECT_EQ(line_count(fs::path(out) / "stability_summary.csv"), 3u);
  EXPECT_EQ(cfu_run("calib-stability --sizes 20 --repeats 1 --predictions " + d() + "/all.csv --split-file " + d() +
                        "/splits.csv --out-dir " + out,
                    dir_)
                .code,
            1);
}

TEST(Cli, SeedFromEnvironmentMatchesFlag) {
  const auto dir = fixture::temp_dir("cli_env");
  const auto a = (dir / "a").string(), b = (dir / "b").string();
  ASSERT_EQ(cfu_run("gen-data --seed 17 --out-dir " + a + kSmall, dir).code, 0);
  ASSERT_EQ(cfu_run("gen-data" + kSmall, dir, "CFU_SEED=17 CFU_OUT_DIR=" + b).code, 0);
  EXPECT_EQ(slurp(fs::path(a) / "splits.csv"), slurp(fs::path(b) / "splits.csv"));
  EXPECT_EQ(slurp(fs::path(a) / "dataset.csv"), slurp(fs::path(b) / "dataset.csv"));
}

TEST(Cli, SweepRowCountMatchesGrid) {
  const auto dir = fixture::temp_dir("cli_sweep");
  const auto r = cfu_run("sweep --methods finetune,random_label,gradient_ascent --lambdas 0,0.5 --seeds 1,2 --jobs 2"
                         " --train-epochs 5 --out-dir " +
                             dir.string() + kSmall,
                         dir);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(line_count(dir / "sweep_raw.csv"), 1u + 2 * 3 * 2);
  EXPECT_EQ(line_count(dir / "sweep_summary.csv"), 1u + 2 * 3);
  const auto header = slurp(dir / "sweep_summary.csv").substr(0, 60);
  EXPECT_EQ(header.rfind("method,lambda,alpha,n_seeds,ua_mean,ua_std", 0), 0u) << header;
}

TEST(Cli, SweepIsIndependentOfJobCount) {
  const auto dir = fixture::temp_dir("cli_sweep_jobs");
  const std::string grid = "sweep --methods finetune,neggrad_plus --lambdas 0.5 --seeds 3 --train-epochs 5" + kSmall;
  ASSERT_EQ(cfu_run(grid + " --jobs 1 --out-dir " + (dir / "j1").string(), dir).code, 0);
  ASSERT_EQ(cfu_run(grid + " --jobs 3 --out-dir " + (dir / "j3").string(), dir).code, 0);
  EXPECT_EQ(slurp(dir / "j1" / "sweep_raw.csv"), slurp(dir / "j3" / "sweep_raw.csv"));
}

TEST(Cli, PipelineReportHasEveryMetricKey) {
  const auto dir = fixture::temp_dir("cli_pipeline");
  const auto r = cfu_run("pipeline --seeds 2 --train-epochs 5 --out-dir " + dir.string() + kSmall, dir);
  ASSERT_EQ(r.code, 0) << r.err;
  for (auto m : kAllMethods) {
    const auto path = dir / "seed_2" / (std::string(to_string(m)) + "_lambda0_report.json");
    ASSERT_TRUE(fs::exists(path)) << path;
    const auto j = nlohmann::json::parse(slurp(path));
    for (const char* key : {"accuracy", "conformal", "recovery", "mia", "calibration"}) {
      EXPECT_TRUE(j.contains(key)) << key;
    }
    if (m != Method::kRetrain) {
      EXPECT_TRUE(j.contains("gap_to_retrain"));
    }
  }
  EXPECT_EQ(line_count(dir / "comparison.csv"), 6u);
}

}  // namespace
