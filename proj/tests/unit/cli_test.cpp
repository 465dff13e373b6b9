#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "eksft/analyze.hpp"
#include "eksft/csv.hpp"
#include "eksft/tasks.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string output;
};

Run cli(const std::string& args) {
    const auto log = fs::temp_directory_path() / "eksft_cli_test_output.txt";
    const std::string cmd = std::string(EKSFT_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    Run r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(log);
    std::stringstream ss;
    ss << in.rdbuf();
    r.output = ss.str();
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

// One small pipeline shared by the tests below.
class CliPipeline : public ::testing::Test {
protected:
    static fs::path root;

    static void SetUpTestSuite() {
        root = fs::temp_directory_path() / "eksft_cli_test";
        fs::remove_all(root);
        fs::create_directories(root);
        nlohmann::json spec = {{"family", "reverse_copy"},
                               {"string_length", 3},
                               {"seed", 3},
                               {"counts", {{"pretrain", 32}, {"sft", 8}, {"rl", 4}, {"eval", 4}}}};
        std::ofstream(root / "spec.json") << spec.dump();
        nlohmann::json cfg = {{"model", {{"d_model", 16}, {"n_heads", 2}, {"context_len", 16}}},
                              {"sft", {{"epochs", 1}, {"batch_size", 8}}}};
        std::ofstream(root / "tiny.json") << cfg.dump();
        const std::string r = root.string();
        ASSERT_EQ(cli("gen-data --spec " + r + "/spec.json --out " + r + "/data").code, 0);
        ASSERT_EQ(cli("pretrain --config " + r + "/tiny.json --data " + r + "/data --out " + r +
                      "/base")
                      .code,
                  0);
    }

    static std::string r() { return root.string(); }
    static std::string base() { return r() + "/base/checkpoints/final"; }
};

fs::path CliPipeline::root;

}  // namespace

TEST_F(CliPipeline, GenDataWritesSplitsAndRefusesRerun) {
    for (const auto& n : eksft::split_names()) {
        EXPECT_TRUE(fs::exists(root / "data" / (n + ".jsonl"))) << n;
    }
    const auto again = cli("gen-data --spec " + r() + "/spec.json --out " + r() + "/data");
    EXPECT_EQ(again.code, 2);
    EXPECT_NE(again.output.find("--force"), std::string::npos);
    EXPECT_EQ(cli("gen-data --spec " + r() + "/spec.json --out " + r() + "/data --force").code, 0);
}

TEST_F(CliPipeline, SeedChangesHashes) {
    ASSERT_EQ(cli("gen-data --spec " + r() + "/spec.json --seed 4 --out " + r() + "/data4").code, 0);
    EXPECT_NE(slurp(root / "data" / "sft.jsonl"), slurp(root / "data4" / "sft.jsonl"));
}

TEST_F(CliPipeline, RunDirectoryLayout) {
    EXPECT_TRUE(fs::exists(root / "base" / "config.json"));
    EXPECT_TRUE(fs::exists(root / "base" / "manifest.json"));
    EXPECT_TRUE(fs::exists(root / "base" / "metrics.csv"));
    EXPECT_TRUE(fs::exists(root / "base" / "checkpoints" / "final.weights.bin"));
    EXPECT_TRUE(fs::exists(root / "base" / "checkpoints" / "init.manifest.json"));
    const auto m = nlohmann::json::parse(slurp(root / "base" / "manifest.json"));
    EXPECT_TRUE(m.contains("dataset_hashes"));
    EXPECT_TRUE(m.contains("seeds"));
}

TEST_F(CliPipeline, ZeroRatioEksftMatchesSftMetrics) {
    ASSERT_EQ(cli("train-sft --config " + r() + "/tiny.json --data " + r() + "/data --init " +
                  base() + " --method sft --out " + r() + "/sft")
                  .code,
              0);
    ASSERT_EQ(cli("train-sft --config " + r() + "/tiny.json --data " + r() + "/data --init " +
                  base() + " --method eksft --rho 0 --lambda-h 0 --lambda-kl 0 --out " + r() +
                  "/eksft0")
                  .code,
              0);
    const auto a = eksft::read_csv(root / "sft" / "metrics.csv");
    const auto b = eksft::read_csv(root / "eksft0" / "metrics.csv");
    EXPECT_EQ(a.numeric("loss"), b.numeric("loss"));
    EXPECT_EQ(slurp(root / "sft" / "checkpoints" / "final.weights.bin"),
              slurp(root / "eksft0" / "checkpoints" / "final.weights.bin"));
}

TEST_F(CliPipeline, ConfigFileReproducesRun) {
    ASSERT_EQ(cli("train-sft --config " + r() + "/tiny.json --data " + r() + "/data --init " +
                  base() + " --mask-dump --out " + r() + "/ek1")
                  .code,
              0);
    ASSERT_EQ(cli("train-sft --config " + r() + "/ek1/config.json --mask-dump --out " + r() +
                  "/ek2")
                  .code,
              0);
    EXPECT_EQ(slurp(root / "ek1" / "metrics.csv"), slurp(root / "ek2" / "metrics.csv"));
    EXPECT_EQ(slurp(root / "ek1" / "checkpoints" / "final.weights.bin"),
              slurp(root / "ek2" / "checkpoints" / "final.weights.bin"));
    EXPECT_TRUE(fs::exists(root / "ek1" / "reports" / "mask_dump.jsonl"));

    ASSERT_EQ(cli("analyze iou --dump " + r() + "/ek1/reports/mask_dump.jsonl --out " + r() +
                  "/iou")
                  .code,
              0);
    const auto summary = eksft::read_csv(root / "iou" / "iou_summary.csv");
    EXPECT_EQ(summary.rows.size(), 2u);
}

TEST_F(CliPipeline, RlEvalDriftAndPlots) {
    ASSERT_EQ(cli("train-rl --data " + r() + "/data --init " + base() +
                  " --steps 2 --group-size 2 --prompts-per-step 2 --max-gen-len 6 --out " + r() +
                  "/rl")
                  .code,
              0);
    const auto rl = eksft::read_csv(root / "rl" / "metrics.csv");
    EXPECT_EQ(rl.rows.size(), 2u);

    ASSERT_EQ(cli("eval --ckpt " + r() + "/rl/checkpoints/final --data " + r() +
                  "/data --n 4 --ks 1,2,4 --max-len 6 --out " + r() + "/ev")
                  .code,
              0);
    EXPECT_EQ(eksft::read_csv(root / "ev" / "eval.csv").rows.size(), 3u);

    ASSERT_EQ(cli("analyze drift --before " + base() + " --after " + base() + " --out " + r() +
                  "/drift")
                  .code,
              0);
    const auto drift = eksft::read_csv(root / "drift" / "drift.csv");
    for (const auto& row : drift.rows) EXPECT_EQ(row.back(), "0");

    ASSERT_EQ(cli("analyze plots --csv " + r() + "/base/metrics.csv --csv " + r() +
                  "/rl/metrics.csv --csv " + r() + "/ev/eval.csv --out " + r() + "/plots")
                  .code,
              0);
    EXPECT_TRUE(fs::exists(root / "plots" / "loss.svg"));
    EXPECT_TRUE(fs::exists(root / "plots" / "reward.svg"));
    EXPECT_TRUE(fs::exists(root / "plots" / "pass_at_k.svg"));
}

TEST_F(CliPipeline, SweepWritesOneRowPerRatio) {
    ASSERT_EQ(cli("analyze sweep --config " + r() + "/tiny.json --data " + r() + "/data --init " +
                  base() + " --n 2 --ks 1,2 --out " + r() + "/sweep")
                  .code,
              0);
    EXPECT_EQ(eksft::read_csv(root / "sweep" / "sweep.csv").rows.size(), 5u);
}

TEST_F(CliPipeline, RunRootEnvironment) {
    const auto alt = root / "runroot";
    fs::create_directories(alt);
    ::setenv("EKSFT_RUN_ROOT", alt.c_str(), 1);
    const auto res = cli("gen-data --spec " + r() + "/spec.json --out relative_data");
    ::unsetenv("EKSFT_RUN_ROOT");
    ASSERT_EQ(res.code, 0);
    EXPECT_TRUE(fs::exists(alt / "relative_data" / "eval.jsonl"));
}

TEST(CliErrors, MissingCheckpointNamesPath) {
    const auto res = cli("train-sft --data /nonexistent --init /no/such/ckpt --out /tmp/x_eksft");
    EXPECT_EQ(res.code, 2);
    const auto res2 = cli("analyze drift --before /no/such/ckpt --after /no/such/ckpt --out "
                          "/tmp/eksft_drift_missing");
    EXPECT_EQ(res2.code, 2);
    EXPECT_NE(res2.output.find("/no/such/ckpt"), std::string::npos);
}

TEST(CliErrors, UsageErrorsExitTwo) {
    EXPECT_EQ(cli("").code, 2);
    EXPECT_EQ(cli("no-such-command").code, 2);
    EXPECT_EQ(cli("eval --ckpt x").code, 2);
}

TEST(CliErrors, RuntimeFailureExitsOne) {
    const auto dir = fs::temp_directory_path() / "eksft_cli_bad_data";
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::ofstream(dir / "pretrain.jsonl") << "{\"prompt\": broken\n";
    const auto res = cli("pretrain --data " + dir.string() + " --out " + (dir / "run").string());
    EXPECT_EQ(res.code, 1);
}
