// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct CliResult {
    int code = -1;
    std::string out;
};

CliResult run_cli(const std::string& args) {
    const std::string cmd = std::string(RAZOR_CLI_PATH) + " " + args + " 2>&1";
    CliResult r;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return r;
    std::array<char, 4096> buf{};
    std::size_t n;
    while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::path(RAZOR_SCRATCH_DIR) / "cli" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

const std::string kFixtures = RAZOR_FIXTURE_DIR;
const std::string kGolden = RAZOR_GOLDEN_DIR;

}  // namespace

TEST(Cli, HelpListsSubcommandsAndDefaults) {
    const auto top = run_cli("--help");
    EXPECT_EQ(top.code, 0);
    for (const char* sub : {"make-model", "identify", "run", "verify-alibi", "bench"}) {
        EXPECT_NE(top.out.find(sub), std::string::npos) << sub;
    }
    const auto id = run_cli("identify --help");
    EXPECT_EQ(id.code, 0);
    EXPECT_NE(id.out.find("--induction-frac"), std::string::npos);
    EXPECT_NE(id.out.find("0.14"), std::string::npos);
    EXPECT_NE(id.out.find("2500"), std::string::npos);
    const auto run = run_cli("run --help");
    EXPECT_NE(run.out.find("--ratio"), std::string::npos);
    EXPECT_NE(run.out.find("4000"), std::string::npos);
}

TEST(Cli, UsageErrorsExitOne) {
    EXPECT_EQ(run_cli("").code, 1);
    EXPECT_EQ(run_cli("frobnicate").code, 1);
    EXPECT_EQ(run_cli("identify --model " + kFixtures + "/induction.rzmd").code, 1);
    EXPECT_EQ(run_cli("identify --model /nonexistent.rzmd --out x.json").code, 1);
    EXPECT_EQ(run_cli("run --model " + kFixtures + "/toy-rope.rzmd --policy sideways").code, 1);
}

TEST(Cli, DataErrorsExitTwo) {
    const auto dir = scratch("data_errors");
    std::ofstream(dir / "junk.rzmd") << "not a model";
    EXPECT_EQ(run_cli("run --model " + (dir / "junk.rzmd").string() + " --prompt 1,2").code, 2);
    EXPECT_EQ(run_cli("verify-alibi --model " + kFixtures + "/toy-rope.rzmd").code, 2);
    // Probe longer than the model's context window.
    EXPECT_EQ(run_cli("identify --model " + kFixtures + "/toy-rope.rzmd --out " + (dir / "h.json").string()).code, 2);
}

TEST(Cli, IdentifyMatchesGolden) {
    const auto dir = scratch("identify");
    const auto r = run_cli("identify --model " + kFixtures + "/induction.rzmd --out " + (dir / "heads.json").string() +
                           " --probe-k 200 --seed 0");
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_NE(r.out.find("retrieval heads: 3 of 8"), std::string::npos) << r.out;
    EXPECT_EQ(slurp(dir / "heads.json"), slurp(fs::path(kGolden) / "heads_induction.json"));
}

TEST(Cli, RunReportsMemory) {
    const auto dir = scratch("run");
    const auto r = run_cli("run --model " + kFixtures + "/induction.rzmd --heads " + kGolden +
                           "/heads_induction.json --prompt-len 300 --steps 8 --policy razor --threshold 32 --out " +
                           (dir / "run.json").string() + " --dump-caches " + (dir / "caches").string());
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_NE(r.out.find("compression ratio:"), std::string::npos);
    const auto j = nlohmann::json::parse(slurp(dir / "run.json"));
    EXPECT_EQ(j.at("generated").size(), 8u);
    EXPECT_GT(j.at("ratio").get<double>(), 1.0);
    std::size_t snapshots = 0;
    for (const auto& e : fs::directory_iterator(dir / "caches")) snapshots += e.path().extension() == ".rzkv";
    EXPECT_EQ(snapshots, 8u);
}

TEST(Cli, RunWithoutHeadsOnRopeFails) {
    EXPECT_EQ(run_cli("run --model " + kFixtures + "/toy-rope.rzmd --prompt 1,2,3 --policy razor").code, 1);
    EXPECT_EQ(run_cli("run --model " + kFixtures + "/toy-rope.rzmd --prompt 1,2,3 --policy full --steps 2").code, 0);
}

TEST(Cli, VerifyAlibi) {
    const auto dir = scratch("verify");
    const auto r = run_cli("verify-alibi --model " + kFixtures + "/toy-alibi.rzmd --trials 6 --epsilon 0.001 "
                           "--epsilon 0.01 --out " + (dir / "plan.json").string());
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_NE(r.out.find("violations: 0"), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("L_h(eps=0.01)"), std::string::npos);
    const auto j = nlohmann::json::parse(slurp(dir / "plan.json"));
    EXPECT_EQ(j.at("format"), "razor-scope-plan");
}

TEST(Cli, BenchWritesReport) {
    const auto dir = scratch("bench");
    const auto r = run_cli("bench --model " + kFixtures + "/induction.rzmd --heads " + kGolden +
                           "/heads_induction.json --out " + dir.string() +
                           " --context-len 256 --depths 0.1,0.5,0.9 --copy-len 6 --threshold 32 --seed 3");
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_EQ(slurp(dir / "bench.csv"), slurp(fs::path(kGolden) / "bench_small.csv"));
    const auto j = nlohmann::json::parse(slurp(dir / "summary.json"));
    EXPECT_EQ(j.at("format"), "razor-bench-summary");
    EXPECT_EQ(j.at("policies").size(), 3u);
}

TEST(Cli, BenchAlibiUsesScopePlan) {
    const auto dir = scratch("bench_alibi");
    const auto r = run_cli("bench --model " + kFixtures + "/toy-alibi.rzmd --out " + dir.string() +
                           " --context-len 200 --depths 0.5 --policies full,razor");
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_TRUE(fs::exists(dir / "bench.csv"));
}
