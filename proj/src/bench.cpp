// SPDX-License-Identifier: Apache-2.0
#include "razor/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>

#include "json.hpp"
#include "razor/errors.hpp"
#include "razor/rng.hpp"

namespace razor {

const char* task_kind_name(TaskKind kind) { return kind == TaskKind::NeedleRetrieval ? "needle" : "copy"; }

const char* bench_policy_name(BenchPolicy p) {
    switch (p) {
        case BenchPolicy::Full: return "full";
        case BenchPolicy::WindowSinks: return "window";
        case BenchPolicy::Razor: return "razor";
    }
    return "?";
}

void TaskSpec::validate() const {
    if (depths.empty()) throw std::invalid_argument("TaskSpec: no depths");
    for (double d : depths) {
        if (!(d >= 0.0 && d <= 1.0)) throw std::invalid_argument("TaskSpec: depth fractions must lie in [0, 1]");
    }
    if (kind == TaskKind::CopyTask && copy_len == 0) throw std::invalid_argument("TaskSpec: copy_len must be >= 1");
}

namespace {

std::string depth_label(TaskKind kind, double depth) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%s@%.2f", task_kind_name(kind), depth);
    return buf;
}

// Filler tokens drawn uniformly from the vocabulary minus `reserved`.
std::vector<TokenId> filler(Rng& rng, std::size_t len, std::size_t vocab, const std::vector<TokenId>& reserved) {
    std::vector<TokenId> allowed;
    for (TokenId t = 0; t < vocab; ++t) {
        if (std::find(reserved.begin(), reserved.end(), t) == reserved.end()) allowed.push_back(t);
    }
    if (allowed.empty()) throw std::invalid_argument("task vocabulary exhausted by reserved tokens");
    std::vector<TokenId> out(len);
    for (auto& t : out) t = allowed[rng.below(allowed.size())];
    return out;
}

std::vector<TokenId> distinct_tokens(Rng& rng, std::size_t count, std::size_t vocab) {
    if (count > vocab) throw std::invalid_argument("task needs more distinct tokens than the vocabulary holds");
    std::vector<TokenId> pool(vocab);
    std::iota(pool.begin(), pool.end(), TokenId{0});
    for (std::size_t i = 0; i < count; ++i) std::swap(pool[i], pool[i + rng.below(vocab - i)]);
    pool.resize(count);
    return pool;
}

}  // namespace

std::vector<TaskInstance> build_task(const TaskSpec& spec, std::size_t vocab_size) {
    spec.validate();
    Rng root(spec.seed);
    std::vector<TaskInstance> out;
    for (double depth : spec.depths) {
        Rng rng = root.split();
        TaskInstance inst;
        inst.name = depth_label(spec.kind, depth);
        const std::size_t planted = spec.kind == TaskKind::NeedleRetrieval ? 2 : spec.copy_len + 1;
        if (spec.context_len < planted) throw std::invalid_argument("TaskSpec: context too short for the task");
        const auto run = distinct_tokens(rng, planted, vocab_size);
        inst.context = filler(rng, spec.context_len, vocab_size, run);
        const auto at = static_cast<std::size_t>(std::floor(depth * static_cast<double>(spec.context_len - planted)));
        std::copy(run.begin(), run.end(), inst.context.begin() + static_cast<std::ptrdiff_t>(at));
        inst.query.assign(run.begin(), run.end() - 1);
        inst.expected.assign(run.begin() + 1, run.end());
        out.push_back(std::move(inst));
    }
    return out;
}

namespace {

struct RunOutcome {
    Matrix<float> logits;
    MemoryReport memory;
    std::uint64_t prefill_entries = 0;
    bool conserved = true;
    double ms = 0.0;
};

RunOutcome run_policy(const Transformer<float>& model, const PolicyTable& table, const TaskInstance& inst,
                      const BenchConfig& config) {
    const auto start = std::chrono::steady_clock::now();
    Session<float> session(model, table, SessionOptions{config.evict_chunk, false});
    session.prefill(inst.context);
    RunOutcome r;
    r.prefill_entries = session.memory_report().stored_entries;
    r.logits = session.decode_tokens(inst.query);
    r.memory = session.memory_report();
    for (const auto& c : session.caches()) {
        if (c.stored() + c.comp().count + c.discarded() != c.total_seen()) r.conserved = false;
    }
    if (config.timing) {
        r.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    }
    return r;
}

BenchRow score(const char* policy, const TaskInstance& inst, const RunOutcome& run, const Matrix<float>& full) {
    BenchRow row;
    row.policy = policy;
    row.task = inst.name;
    std::size_t hits = 0;
    double dev = 0.0;
    for (std::size_t i = 0; i < inst.query.size(); ++i) {
        if (argmax(run.logits.row(i)) == inst.expected[i]) ++hits;
        const auto a = run.logits.row(i);
        const auto b = full.row(i);
        for (std::size_t j = 0; j < a.size(); ++j) dev += std::abs(static_cast<double>(a[j]) - b[j]);
    }
    row.exact_match = static_cast<double>(hits) / static_cast<double>(inst.query.size());
    row.logit_dev = dev / static_cast<double>(inst.query.size() * full.cols);
    row.kv_entries = run.memory.stored_entries;
    row.ratio = run.memory.ratio();
    row.ms = run.ms;
    row.conserved = run.conserved;
    return row;
}

}  // namespace

BenchResult run_bench(const Transformer<float>& model, const std::vector<BenchPolicy>& policies,
                      const std::vector<TaskSpec>& tasks, const BenchConfig& config) {
    const auto& spec = model.spec();
    if (policies.empty()) throw std::invalid_argument("run_bench: no policies");

    const bool wants_razor_table =
        std::find(policies.begin(), policies.end(), BenchPolicy::Razor) != policies.end() ||
        (std::find(policies.begin(), policies.end(), BenchPolicy::WindowSinks) != policies.end() && config.window == 0);
    std::optional<PolicyTable> razor;
    if (config.razor_table) {
        razor = config.razor_table;
    } else if (wants_razor_table) {
        razor = PolicyTable::from_head_set(spec, config.heads, config.compressed);
    }
    const PolicyTable full_table = PolicyTable::all_retrieval(spec);
    const std::size_t sinks = config.compressed.sink_count;

    std::map<BenchPolicy, std::vector<BenchRow>> by_policy;
    BenchResult result;
    for (const auto& task : tasks) {
        std::vector<TaskInstance> instances;
        try {
            instances = build_task(task, spec.vocab_size);
        } catch (const std::exception& e) {
            result.errors.push_back(std::string(task_kind_name(task.kind)) + ": " + e.what());
            continue;
        }
        for (const auto& inst : instances) {
            if (inst.context.size() + inst.query.size() > spec.max_context) {
                result.errors.push_back(inst.name + ": context of " +
                                        std::to_string(inst.context.size() + inst.query.size()) +
                                        " tokens exceeds max_context " + std::to_string(spec.max_context));
                continue;
            }
            const RunOutcome full = run_policy(model, full_table, inst, config);
            std::optional<RunOutcome> razor_run;
            if (razor) razor_run = run_policy(model, *razor, inst, config);

            for (BenchPolicy p : policies) {
                if (p == BenchPolicy::Full) {
                    by_policy[p].push_back(score("full", inst, full, full.logits));
                } else if (p == BenchPolicy::Razor) {
                    by_policy[p].push_back(score("razor", inst, *razor_run, full.logits));
                } else {
                    std::size_t window = config.window;
                    if (window == 0) {
                        const std::size_t per_head =
                            (razor_run->prefill_entries + spec.num_layers * spec.num_kv_heads - 1) /
                            (spec.num_layers * spec.num_kv_heads);
                        window = per_head > sinks ? per_head - sinks : 1;
                    }
                    const auto table = PolicyTable::uniform(spec, HeadPolicy::windowed(sinks, window));
                    const RunOutcome run = run_policy(model, table, inst, config);
                    auto row = score("window", inst, run, full.logits);
                    row.window = window;
                    by_policy[p].push_back(row);
                }
            }
        }
    }
    for (BenchPolicy p : policies) {
        auto& rows = by_policy[p];
        result.rows.insert(result.rows.end(), rows.begin(), rows.end());
        rows.clear();
    }
    return result;
}

std::string bench_csv(const BenchResult& result) {
    std::string out = "policy,task,exact_match,logit_dev,kv_entries,ratio,ms\n";
    char buf[256];
    for (const auto& r : result.rows) {
        std::snprintf(buf, sizeof buf, "%s,%s,%.4f,%.6f,%llu,%.4f,%.3f\n", r.policy.c_str(), r.task.c_str(),
                      r.exact_match, r.logit_dev, static_cast<unsigned long long>(r.kv_entries), r.ratio, r.ms);
        out += buf;
    }
    return out;
}

std::string bench_summary(const BenchResult& result, const BenchConfig& config) {
    using nlohmann::ordered_json;
    ordered_json j;
    j["format"] = "razor-bench-summary";
    j["version"] = 1;
    j["config"] = {{"sinks", config.compressed.sink_count},
                   {"compression_ratio", config.compressed.compression_ratio},
                   {"threshold", config.compressed.threshold},
                   {"retrieval_heads", config.heads.size()}};
    ordered_json policies = ordered_json::array();
    std::vector<std::string> order;
    for (const auto& r : result.rows) {
        if (std::find(order.begin(), order.end(), r.policy) == order.end()) order.push_back(r.policy);
    }
    for (const auto& name : order) {
        double em = 0.0, dev = 0.0;
        std::uint64_t entries = 0;
        std::size_t n = 0;
        bool conserved = true;
        ordered_json windows = ordered_json::object();
        for (const auto& r : result.rows) {
            if (r.policy != name) continue;
            em += r.exact_match;
            dev += r.logit_dev;
            entries += r.kv_entries;
            conserved = conserved && r.conserved;
            if (r.window) windows[r.task] = r.window;
            ++n;
        }
        ordered_json p;
        p["policy"] = name;
        p["tasks"] = n;
        p["mean_exact_match"] = std::round(em / static_cast<double>(n) * 1e6) / 1e6;
        p["mean_logit_dev"] = std::round(dev / static_cast<double>(n) * 1e6) / 1e6;
        p["kv_entries_total"] = entries;
        p["conserved"] = conserved;
        if (!windows.empty()) p["windows"] = windows;
        policies.push_back(p);
    }
    j["policies"] = policies;
    j["errors"] = result.errors;
    return j.dump(2) + "\n";
}

void emit_report(const BenchResult& result, const BenchConfig& config, const std::filesystem::path& dir) {
    if (result.rows.empty()) throw std::invalid_argument("emit_report: no results to write");
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw Error("cannot create output directory " + dir.string() + ": " + ec.message());
    const std::pair<const char*, std::string> files[] = {{"bench.csv", bench_csv(result)},
                                                         {"summary.json", bench_summary(result, config)}};
    for (const auto& [name, text] : files) {
        std::ofstream os(dir / name, std::ios::binary);
        if (!os) throw Error("cannot write " + (dir / name).string());
        os << text;
        if (!os) throw Error("failed writing " + (dir / name).string());
    }
}

}  // namespace razor
