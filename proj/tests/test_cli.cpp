#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "cflow/tensor_io.hpp"
#include "json.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

CliResult run_cli(const testutil::TempDir& dir, const std::string& args) {
  const fs::path out = dir.path() / "stdout.txt", err = dir.path() / "stderr.txt";
  const std::string cmd = std::string(CFLOW_CLI) + " " + args + " >" + out.string() + " 2>" +
                          err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

// Binary segmentation on 8x8 images with a model small enough to train in
// a couple of seconds.
fs::path write_config(const testutil::TempDir& dir, const std::string& name,
                      const std::string& drop_key = "") {
  const std::pair<const char*, const char*> entries[] = {
      {"task.kind", "binary-seg"}, {"task.size", "8"},      {"task.train_size", "32"},
      {"task.test_size", "8"},     {"task.seed", "7"},      {"model.L", "1"},
      {"model.K", "2"},            {"model.n_c", "4"},      {"model.n_w", "8"},
      {"model.hidden", "8"},       {"model.features", "4"}, {"train.iters", "30"},
      {"train.seed", "5"},         {"train.lr", "0.002"},   {"predict.mode", "sample-mean"},
      {"predict.M", "10"}};
  const fs::path p = dir.path() / (name + ".cfg");
  std::ofstream os(p);
  os << "# test config\n";
  for (const auto& [k, v] : entries) {
    if (drop_key != k) os << k << " = " << v << '\n';
  }
  if (drop_key != "io.outdir") os << "io.outdir = " << (dir.path() / name).string() << '\n';
  return p;
}

nlohmann::json aggregate_line(const fs::path& jsonl) {
  std::ifstream is(jsonl);
  std::string line, last;
  while (std::getline(is, line)) last = line;
  return nlohmann::json::parse(last);
}

}  // namespace

TEST(Cli, CheckSuitePasses) {
  testutil::TempDir dir("cli-check");
  const CliResult r = run_cli(dir, "check");
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  for (const char* suite : {"round-trip", "jacobian", "gradient", "normalization", "dequant-bound"}) {
    EXPECT_NE(r.out.find(suite), std::string::npos) << suite;
  }
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
}

TEST(Cli, TrainThenPredictReportsIou) {
  testutil::TempDir dir("cli-seg");
  const fs::path cfg = write_config(dir, "seg");
  ASSERT_EQ(run_cli(dir, "train -q -c " + cfg.string()).code, 0);
  const CliResult r = run_cli(dir, "predict --mode sample-mean --M 10 -c " + cfg.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const fs::path out = dir.path() / "seg";
  const auto agg = aggregate_line(out / "metrics.jsonl");
  EXPECT_EQ(agg["task"], "binary-seg");
  EXPECT_EQ(agg["M"], 10);
  ASSERT_TRUE(agg.contains("mean_iou"));
  EXPECT_GE(agg["mean_iou"].get<double>(), 0.0);
  EXPECT_LE(agg["mean_iou"].get<double>(), 1.0);
  EXPECT_EQ(cflow::load_tensor(out / "predictions.cft").shape(), (cflow::Shape{8, 8, 8, 1}));
  EXPECT_TRUE(fs::exists(out / "variance.cft"));
  EXPECT_TRUE(fs::exists(out / "metrics.csv"));
  EXPECT_TRUE(fs::exists(out / "pred_000.pgm"));
  EXPECT_EQ(slurp(out / "curve.csv").rfind("iteration,nll_nats_per_dim\n", 0), 0u);
}

TEST(Cli, MissingKeyIsConfigErrorNamingTheKey) {
  testutil::TempDir dir("cli-missing");
  for (const std::string key : {"model.L", "train.iters", "io.outdir", "task.kind"}) {
    const CliResult r = run_cli(dir, "train -q -c " + write_config(dir, "m", key).string());
    EXPECT_EQ(r.code, 2) << key;
    EXPECT_NE(r.err.find(key), std::string::npos) << r.err;
  }
}

TEST(Cli, UsageErrors) {
  testutil::TempDir dir("cli-usage");
  EXPECT_EQ(run_cli(dir, "").code, 1);
  EXPECT_EQ(run_cli(dir, "frobnicate").code, 1);
  EXPECT_EQ(run_cli(dir, "train --no-such-flag").code, 1);
  EXPECT_EQ(run_cli(dir, "train -c " + (dir.path() / "absent.cfg").string()).code, 1);
  EXPECT_EQ(run_cli(dir, "--help").code, 0);
}

TEST(Cli, BadValuesAreConfigErrors) {
  testutil::TempDir dir("cli-bad");
  const std::string cfg = write_config(dir, "b").string();
  EXPECT_EQ(run_cli(dir, "train -q -c " + cfg + " -s task.size=6").code, 2);
  EXPECT_EQ(run_cli(dir, "train -q -c " + cfg + " -s task.kind=colorize").code, 2);
  EXPECT_EQ(run_cli(dir, "train -q -c " + cfg + " -s model.L=x").code, 2);
  EXPECT_EQ(run_cli(dir, "train -q -c " + cfg + " -s oops").code, 2);
  ASSERT_EQ(run_cli(dir, "train -q -c " + cfg + " -s train.iters=1").code, 0);
  EXPECT_EQ(run_cli(dir, "predict -c " + cfg + " --mode mode-seeking").code, 2);
  EXPECT_EQ(run_cli(dir, "predict -c " + cfg + " -s predict.M=0").code, 2);
  // The stored dataset no longer matches the task keys.
  EXPECT_EQ(run_cli(dir, "predict -c " + cfg + " -s task.seed=8").code, 2);
}

TEST(Cli, DivergenceIsNumericFailure) {
  testutil::TempDir dir("cli-nan");
  const fs::path cfg = write_config(dir, "n");
  const CliResult r = run_cli(dir, "train -q -c " + cfg.string() + " -s train.lr=1e6");
  EXPECT_EQ(r.code, 3) << r.err;
  EXPECT_TRUE(fs::exists(dir.path() / "n" / "emergency.cfck"));
}

TEST(Cli, RunsAreReproducible) {
  testutil::TempDir dir("cli-repro");
  for (const char* name : {"a", "b"}) {
    const std::string cfg = write_config(dir, name).string();
    ASSERT_EQ(run_cli(dir, "train -q -c " + cfg).code, 0);
    ASSERT_EQ(run_cli(dir, "predict -c " + cfg).code, 0);
  }
  const fs::path a = dir.path() / "a", b = dir.path() / "b";
  for (const char* f : {"checkpoint.cfck", "curve.csv", "predictions.cft", "variance.cft",
                        "metrics.csv"}) {
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
}

TEST(Cli, ResumeMatchesUninterruptedRun) {
  testutil::TempDir dir("cli-resume");
  const std::string split = write_config(dir, "split").string();
  const std::string whole = write_config(dir, "whole").string();
  ASSERT_EQ(run_cli(dir, "train -q -c " + split + " -s train.iters=12").code, 0);
  ASSERT_EQ(run_cli(dir, "train -q --resume -c " + split).code, 0);
  ASSERT_EQ(run_cli(dir, "train -q -c " + whole).code, 0);
  for (const char* f : {"checkpoint.cfck", "curve.csv"}) {
    EXPECT_EQ(slurp(dir.path() / "split" / f), slurp(dir.path() / "whole" / f)) << f;
  }
  EXPECT_EQ(run_cli(dir, "train -q --resume -c " + split + " -s model.K=3").code, 2);
}

TEST(Cli, GenAndSampleWriteFiles) {
  testutil::TempDir dir("cli-sample");
  const std::string cfg = write_config(dir, "s").string();
  ASSERT_EQ(run_cli(dir, "gen -c " + cfg).code, 0);
  EXPECT_TRUE(fs::exists(dir.path() / "s" / "data" / "manifest.txt"));
  EXPECT_NE(run_cli(dir, "sample -c " + cfg).code, 0);  // nothing trained yet
  ASSERT_EQ(run_cli(dir, "train -q -c " + cfg + " -s train.iters=2").code, 0);
  ASSERT_EQ(run_cli(dir, "sample -c " + cfg + " --count 3 --index 1").code, 0);
  EXPECT_EQ(cflow::load_tensor(dir.path() / "s" / "samples.cft").dim(0), 3u);
  EXPECT_TRUE(fs::exists(dir.path() / "s" / "sample_002.pgm"));
  EXPECT_EQ(run_cli(dir, "sample -c " + cfg + " --index 99").code, 2);
}
