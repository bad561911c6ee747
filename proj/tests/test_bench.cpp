// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "razor/bench.hpp"
#include "razor/fixtures.hpp"

using namespace razor;

namespace {

const Transformer<float>& induction_model() {
    static const Model m = make_induction_fixture();
    static const Transformer<float> t(m);
    return t;
}

RetrievalHeadSet fixture_heads() {
    RetrievalHeadSet s;
    s.num_layers = 2;
    s.num_heads = 4;
    s.heads.push_back({kFixturePrevTokenHead, 0, 0, Provenance::Induction});
    s.heads.push_back({kFixtureEchoHead, 0, 0, Provenance::Echo});
    s.heads.push_back({kFixtureInductionHead, 0, 0, Provenance::Induction});
    return s;
}

BenchConfig small_config() {
    BenchConfig c;
    c.compressed = HeadPolicy::compressed(4, 5.0, 32);
    c.heads = fixture_heads();
    return c;
}

std::vector<TaskSpec> small_tasks(std::size_t context = 256) {
    TaskSpec needle;
    needle.kind = TaskKind::NeedleRetrieval;
    needle.context_len = context;
    needle.depths = {0.1, 0.5, 0.9};
    needle.seed = 3;
    TaskSpec copy = needle;
    copy.kind = TaskKind::CopyTask;
    copy.copy_len = 6;
    copy.seed = 4;
    return {needle, copy};
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace

TEST(Tasks, NeedleStructure) {
    TaskSpec spec;
    spec.context_len = 200;
    spec.depths = {0.0, 0.5, 1.0};
    const auto inst = build_task(spec, 64);
    ASSERT_EQ(inst.size(), 3u);
    for (const auto& t : inst) {
        EXPECT_EQ(t.context.size(), 200u);
        ASSERT_EQ(t.query.size(), 1u);
        ASSERT_EQ(t.expected.size(), 1u);
        std::size_t planted = 0;
        for (std::size_t i = 0; i + 1 < t.context.size(); ++i) {
            planted += t.context[i] == t.query[0] && t.context[i + 1] == t.expected[0];
        }
        EXPECT_EQ(planted, 1u) << t.name;
        EXPECT_EQ(std::count(t.context.begin(), t.context.end(), t.query[0]), 1) << t.name;
    }
    EXPECT_EQ(inst[1].name, "needle@0.50");
    EXPECT_EQ(build_task(spec, 64)[2].context, inst[2].context);
}

TEST(Tasks, CopyStructure) {
    TaskSpec spec;
    spec.kind = TaskKind::CopyTask;
    spec.context_len = 120;
    spec.copy_len = 5;
    spec.depths = {0.3};
    const auto t = build_task(spec, 64).at(0);
    ASSERT_EQ(t.query.size(), 5u);
    const std::set<TokenId> run(t.query.begin(), t.query.end());
    EXPECT_EQ(run.size(), 5u);
    for (std::size_t i = 0; i + 1 < 5; ++i) EXPECT_EQ(t.expected[i], t.query[i + 1]);
    EXPECT_EQ(std::count(t.context.begin(), t.context.end(), t.query[0]), 1);
}

TEST(Tasks, Validation) {
    TaskSpec spec;
    spec.depths = {};
    EXPECT_THROW(build_task(spec, 64), std::invalid_argument);
    spec.depths = {1.2};
    EXPECT_THROW(build_task(spec, 64), std::invalid_argument);
    spec = TaskSpec{};
    spec.kind = TaskKind::CopyTask;
    spec.copy_len = 100;
    EXPECT_THROW(build_task(spec, 64), std::invalid_argument);
}

TEST(Bench, FullHasZeroDeviationAndSolvesTasks) {
    const auto r = run_bench(induction_model(), {BenchPolicy::Full}, small_tasks(), small_config());
    ASSERT_EQ(r.rows.size(), 6u);
    for (const auto& row : r.rows) {
        EXPECT_EQ(row.logit_dev, 0.0);
        EXPECT_EQ(row.exact_match, 1.0) << row.task;
        EXPECT_DOUBLE_EQ(row.ratio, 1.0);
        EXPECT_TRUE(row.conserved);
    }
}

TEST(Bench, WideWindowEqualsFull) {
    auto cfg = small_config();
    cfg.window = 1000;
    const auto r = run_bench(induction_model(), {BenchPolicy::WindowSinks}, small_tasks(), cfg);
    for (const auto& row : r.rows) {
        EXPECT_EQ(row.logit_dev, 0.0) << row.task;
        EXPECT_EQ(row.window, 1000u);
    }
}

TEST(Bench, AllRetrievalRazorEqualsFull) {
    auto cfg = small_config();
    cfg.razor_table = PolicyTable::all_retrieval(induction_model().spec());
    const auto r = run_bench(induction_model(), {BenchPolicy::Razor}, small_tasks(), cfg);
    for (const auto& row : r.rows) EXPECT_EQ(row.logit_dev, 0.0) << row.task;
}

TEST(Bench, RazorNoWorseThanWindowAtEqualBudget) {
    const auto r = run_bench(induction_model(), {BenchPolicy::Full, BenchPolicy::WindowSinks, BenchPolicy::Razor},
                             small_tasks(), small_config());
    ASSERT_EQ(r.rows.size(), 18u);
    ASSERT_TRUE(r.errors.empty());
    double window_dev = 0.0, razor_dev = 0.0;
    for (std::size_t i = 0; i < 6; ++i) {
        const auto& w = r.rows[6 + i];
        const auto& z = r.rows[12 + i];
        ASSERT_EQ(w.policy, "window");
        ASSERT_EQ(z.policy, "razor");
        ASSERT_EQ(w.task, z.task);
        EXPECT_GE(z.exact_match, w.exact_match) << z.task;
        EXPECT_TRUE(z.conserved);
        EXPECT_TRUE(w.conserved);
        window_dev += w.logit_dev;
        razor_dev += z.logit_dev;
    }
    EXPECT_LE(razor_dev, window_dev);
}

TEST(Bench, OversizedTaskRecordedAsError) {
    auto tasks = small_tasks();
    tasks[0].context_len = induction_model().spec().max_context + 10;
    const auto r = run_bench(induction_model(), {BenchPolicy::Full}, tasks, small_config());
    EXPECT_EQ(r.rows.size(), 3u);
    EXPECT_EQ(r.errors.size(), 3u);
}

TEST(Report, CsvHeaderAndSummary) {
    const auto r = run_bench(induction_model(), {BenchPolicy::Full}, small_tasks(128), small_config());
    const std::string csv = bench_csv(r);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "policy,task,exact_match,logit_dev,kv_entries,ratio,ms");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
    const std::string summary = bench_summary(r, small_config());
    EXPECT_NE(summary.find("\"razor-bench-summary\""), std::string::npos);
}

TEST(Report, EmptyResultWritesNothing) {
    const auto dir = std::filesystem::path(RAZOR_SCRATCH_DIR) / "empty_report";
    std::filesystem::remove_all(dir);
    EXPECT_THROW(emit_report(BenchResult{}, small_config(), dir), std::invalid_argument);
    EXPECT_FALSE(std::filesystem::exists(dir / "bench.csv"));
}

TEST(Report, GoldenCsv) {
    const auto r = run_bench(induction_model(), {BenchPolicy::Full, BenchPolicy::WindowSinks, BenchPolicy::Razor},
                             small_tasks(), small_config());
    const auto dir = std::filesystem::path(RAZOR_SCRATCH_DIR) / "golden_report";
    emit_report(r, small_config(), dir);
    EXPECT_EQ(slurp(dir / "bench.csv"), slurp(std::filesystem::path(RAZOR_GOLDEN_DIR) / "bench_small.csv"));
}
