// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "razor/head_id.hpp"
#include "razor/kv_cache.hpp"
#include "razor/runtime.hpp"

namespace razor {

enum class TaskKind { NeedleRetrieval, CopyTask };

const char* task_kind_name(TaskKind kind);

struct TaskSpec {
    TaskKind kind = TaskKind::NeedleRetrieval;
    std::size_t context_len = 1024;
    std::vector<double> depths{0.1, 0.3, 0.5, 0.7, 0.9};
    std::uint64_t seed = 0;
    std::size_t copy_len = 8;  // query tokens of a copy task

    void validate() const;
};

// One evaluated prompt: `context` is prefilled, then `query` is fed token by
// token; after query[i] the model should predict expected[i].
struct TaskInstance {
    std::string name;  // e.g. "needle@0.30"
    std::vector<TokenId> context;
    std::vector<TokenId> query;
    std::vector<TokenId> expected;
};

// Needle: filler that avoids the pair (X, Y), with "X Y" planted at the
// depth; the query is X and the answer Y.
// Copy: a run of copy_len + 1 distinct tokens planted at the depth inside
// filler that avoids them; the query replays the run and each answer is the
// next token of the run.
std::vector<TaskInstance> build_task(const TaskSpec& spec, std::size_t vocab_size);

enum class BenchPolicy { Full, WindowSinks, Razor };

const char* bench_policy_name(BenchPolicy p);

struct BenchConfig {
    // Template for non-retrieval heads under the Razor policy.
    HeadPolicy compressed = HeadPolicy::compressed(4, 5.0, 4000);
    RetrievalHeadSet heads;
    // Window+Sinks keeps as many entries per KV head as Razor does after
    // prefill, averaged over heads; 0 derives it that way, anything else
    // fixes the window.
    std::size_t window = 0;
    std::size_t evict_chunk = 0;
    bool timing = false;
    // Replaces the head-set derived Razor table (ALiBi models plan theirs
    // from vision scopes).
    std::optional<PolicyTable> razor_table;
};

struct BenchRow {
    std::string policy;
    std::string task;
    double exact_match = 0.0;
    double logit_dev = 0.0;  // mean |logit − full logit| over query steps
    std::uint64_t kv_entries = 0;
    double ratio = 1.0;
    double ms = 0.0;  // wall time, recorded only when timing is enabled
    // Conservation check: Σ (stored + N_d + discarded) == Σ total_seen.
    bool conserved = true;
    std::size_t window = 0;  // Window+Sinks rows: window used
};

struct BenchResult {
    std::vector<BenchRow> rows;
    std::vector<std::string> errors;  // tasks skipped, with reasons
};

BenchResult run_bench(const Transformer<float>& model, const std::vector<BenchPolicy>& policies,
                      const std::vector<TaskSpec>& tasks, const BenchConfig& config);

std::string bench_csv(const BenchResult& result);
std::string bench_summary(const BenchResult& result, const BenchConfig& config);

// Writes bench.csv and summary.json into `dir`. Empty results are an error
// and create no files.
void emit_report(const BenchResult& result, const BenchConfig& config, const std::filesystem::path& dir);

}  // namespace razor
