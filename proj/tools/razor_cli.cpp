// SPDX-License-Identifier: Apache-2.0
// Command-line front end: model fixtures, retrieval-head identification,
// compressed generation, ALiBi scope verification and benchmarks.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "razor/alibi_scope.hpp"
#include "razor/bench.hpp"
#include "razor/errors.hpp"
#include "razor/fixtures.hpp"
#include "razor/head_id.hpp"
#include "razor/model_io.hpp"
#include "razor/rng.hpp"
#include "razor/runtime.hpp"

namespace fs = std::filesystem;
using namespace razor;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitVerification = 3;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CacheFlags {
    double ratio = 5.0;
    std::size_t threshold = 4000;
    std::size_t sinks = 4;
};

void add_cache_flags(CLI::App* cmd, CacheFlags& f) {
    cmd->add_option("--ratio", f.ratio, "Compression ratio C for non-retrieval heads")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    cmd->add_option("--threshold", f.threshold, "Buffer floor S0: recent tokens kept = max(S0, N/C)")
        ->capture_default_str();
    cmd->add_option("--sinks", f.sinks, "Attention-sink tokens N0 always kept")->capture_default_str();
}

HeadPolicy compressed_policy(const CacheFlags& f) {
    try {
        return HeadPolicy::compressed(f.sinks, f.ratio, f.threshold);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
}

std::vector<TokenId> parse_tokens(const std::string& text) {
    std::vector<TokenId> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            std::size_t used = 0;
            const unsigned long v = std::stoul(item, &used);
            if (used != item.size()) throw std::invalid_argument(item);
            out.push_back(static_cast<TokenId>(v));
        } catch (const std::exception&) {
            throw UsageError("bad token id '" + item + "' in --prompt");
        }
    }
    return out;
}

std::vector<double> parse_doubles(const std::string& text, const char* flag) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(std::stod(item));
        } catch (const std::exception&) {
            throw UsageError(std::string("bad number '") + item + "' in " + flag);
        }
    }
    return out;
}

std::string join_tokens(const std::vector<TokenId>& tokens) {
    std::string s;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) s += ' ';
        s += std::to_string(tokens[i]);
    }
    return s;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write " + path.string());
    os << text;
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

HeadSetFile load_heads_for(const Model& model, const fs::path& path) {
    HeadSetFile file = read_head_set(path);
    if (file.set.num_layers != model.spec.num_layers || file.set.num_heads != model.spec.num_heads) {
        throw ShapeError("head set " + path.string() + " is for a " + std::to_string(file.set.num_layers) + "x" +
                         std::to_string(file.set.num_heads) + " model, this model is " +
                         std::to_string(model.spec.num_layers) + "x" + std::to_string(model.spec.num_heads));
    }
    const std::string id = model_id(model);
    if (file.model_id != id) {
        std::cerr << "warning: head set was identified on model " << file.model_id << ", loading it for " << id
                  << "\n";
    }
    return file;
}

// ---------------------------------------------------------------------------

struct MakeModelArgs {
    std::string kind = "induction";
    std::uint64_t seed = 7;
    std::string out;
};

int cmd_make_model(const MakeModelArgs& a) {
    const Model m = make_fixture(a.kind, a.seed);
    save_model(a.out, m);
    std::cout << "wrote " << a.kind << " model to " << a.out << " (" << model_id(m) << ")\n";
    return kExitOk;
}

struct IdentifyArgs {
    std::string model;
    std::string out;
    double induction_frac = 0.14;
    double echo_frac = 0.01;
    std::size_t probe_k = 2500;
    std::size_t probe_repeats = 4;
    std::uint64_t seed = 0;
    bool allow_empty = false;
};

int cmd_identify(const IdentifyArgs& a) {
    const Model model = load_model(a.model);
    const Transformer<float> tf(model);
    ProbeSpec probe{a.probe_k, a.probe_repeats, model.spec.vocab_size, a.seed};
    const ProbeReport report = probe_model(tf, probe);

    SelectOptions opts{a.induction_frac, a.echo_frac, a.allow_empty};
    RetrievalHeadSet set = select_retrieval_heads(report, opts);
    set = gqa_promote(set, model.spec.group_size(), &report);

    HeadSetFile file{model_id(model), probe, set};
    write_head_set(a.out, file);

    std::cout << "probe: " << probe.unique_tokens << " tokens x " << probe.repeats << " repeats (seed " << a.seed
              << ")\n";
    std::cout << "retrieval heads: " << set.size() << " of " << report.total_heads()
              << " (protected fraction " << fmt("%.4f", set.protected_fraction()) << ")\n";
    for (const auto& e : set.heads) {
        std::cout << "  layer " << e.id.layer << " head " << e.id.head << "  echo " << fmt("%.4f", e.echo_score)
                  << "  induction " << fmt("%.4f", e.induction_score) << "  " << provenance_name(e.provenance)
                  << "\n";
    }
    std::cout << "wrote " << a.out << "\n";
    return kExitOk;
}

struct RunArgs {
    std::string model;
    std::string heads;
    std::string prompt;
    std::size_t prompt_len = 0;
    std::size_t steps = 16;
    std::string policy = "razor";
    CacheFlags cache;
    std::size_t window = 0;
    double epsilon = kDefaultScopeEpsilon;
    std::uint64_t seed = 0;
    bool capture = false;
    std::string dump_caches;
    std::string out;
};

int cmd_run(const RunArgs& a) {
    const Model model = load_model(a.model);
    const auto& spec = model.spec;
    const Transformer<float> tf(model);

    std::vector<TokenId> prompt;
    if (!a.prompt.empty()) {
        prompt = parse_tokens(a.prompt);
    } else if (a.prompt_len > 0) {
        Rng rng(a.seed);
        for (std::size_t i = 0; i < a.prompt_len; ++i) prompt.push_back(static_cast<TokenId>(rng.below(spec.vocab_size)));
    } else {
        throw UsageError("run needs --prompt or --prompt-len");
    }
    if (prompt.empty()) throw UsageError("empty prompt");

    std::optional<PolicyTable> table;
    std::string describe;
    if (a.policy == "full") {
        table = PolicyTable::all_retrieval(spec);
        describe = "full cache on every head";
    } else if (a.policy == "window") {
        const std::size_t window = a.window ? a.window : a.cache.threshold;
        table = PolicyTable::uniform(spec, HeadPolicy::windowed(a.cache.sinks, window));
        describe = "window+sinks (sinks " + std::to_string(a.cache.sinks) + ", window " + std::to_string(window) + ")";
    } else if (a.policy == "razor") {
        if (spec.embedding == EmbeddingKind::ALiBi) {
            const ScopePlan plan = plan_alibi_caches(model, a.epsilon);
            table = plan.policy_table(spec);
            describe = "vision-scope windows (epsilon " + fmt("%g", a.epsilon) + ")";
        } else {
            if (a.heads.empty()) throw UsageError("--policy razor on a RoPE model needs --heads");
            const HeadSetFile hs = load_heads_for(model, a.heads);
            table = PolicyTable::from_head_set(spec, hs.set, compressed_policy(a.cache));
            describe = "retrieval heads full, others " + describe_policy(compressed_policy(a.cache));
        }
    } else {
        throw UsageError("unknown --policy '" + a.policy + "' (full|window|razor)");
    }

    Session<float> session(tf, *table, SessionOptions{128, a.capture});
    const auto generated = greedy_generate(session, prompt, a.steps);

    std::cout << "policy: " << a.policy << " (" << describe << ")\n";
    std::cout << "prompt tokens: " << prompt.size() << "\n";
    std::cout << "generated: " << join_tokens(generated) << "\n";
    bool attention_ok = true;
    if (a.capture) {
        const auto maps = session.take_attention_maps();
        double worst = 0.0;
        for (const auto& m : maps) {
            for (std::size_t r = 0; r < m.seq_len(); ++r) {
                double s = 0.0;
                for (double w : m.row(r)) s += w;
                worst = std::max(worst, std::abs(s - 1.0));
            }
        }
        std::cout << "attention capture: " << maps.size() << " heads, max |row sum - 1| = " << fmt("%.3g", worst)
                  << "\n";
        attention_ok = worst <= 1e-5;
    }
    const MemoryReport mem = session.memory_report();
    std::cout << "kv entries: " << mem.stored_entries << " stored / " << mem.full_entries << " full\n";
    std::cout << "compression ratio: " << fmt("%.4f", mem.ratio()) << "\n";

    if (!a.dump_caches.empty()) {
        fs::create_directories(a.dump_caches);
        for (const auto& h : mem.heads) {
            const fs::path p = fs::path(a.dump_caches) /
                               ("cache_L" + std::to_string(h.layer) + "_H" + std::to_string(h.kv_head) + ".rzkv");
            std::ofstream os(p, std::ios::binary);
            if (!os) throw Error("cannot write " + p.string());
            write_snapshot(os, session.cache(h.layer, h.kv_head));
        }
        std::cout << "wrote " << mem.heads.size() << " cache snapshots to " << a.dump_caches << "\n";
    }
    if (!a.out.empty()) {
        nlohmann::ordered_json j;
        j["policy"] = a.policy;
        j["prompt_tokens"] = prompt.size();
        j["generated"] = generated;
        j["kv_entries"] = mem.stored_entries;
        j["full_entries"] = mem.full_entries;
        j["ratio"] = std::round(mem.ratio() * 1e6) / 1e6;
        auto& heads = j["heads"] = nlohmann::ordered_json::array();
        for (const auto& h : mem.heads) {
            heads.push_back({{"layer", h.layer},
                             {"kv_head", h.kv_head},
                             {"policy", policy_kind_name(h.kind)},
                             {"stored", h.stored},
                             {"compensation", h.comp_entries},
                             {"dropped", h.dropped},
                             {"discarded", h.discarded}});
        }
        write_text(a.out, j.dump(2) + "\n");
    }
    return attention_ok ? kExitOk : kExitVerification;
}

struct VerifyArgs {
    std::string model;
    std::vector<double> epsilons;
    std::size_t trials = 100;
    std::size_t max_seq = 4096;
    std::uint64_t seed = 0;
    std::string out;
};

int cmd_verify_alibi(VerifyArgs a) {
    const Model model = load_model(a.model);
    if (model.spec.embedding != EmbeddingKind::ALiBi) {
        std::cerr << "error: verify-alibi works on ALiBi models only; " << a.model
                  << " uses RoPE, whose caches are planned from retrieval heads instead\n";
        return kExitData;
    }
    if (a.epsilons.empty()) a.epsilons.push_back(kDefaultScopeEpsilon);
    for (double e : a.epsilons) {
        if (!(e > 0.0 && e < 1.0)) throw UsageError("--epsilon values must lie in (0, 1)");
    }

    std::vector<ScopePlan> plans;
    for (double e : a.epsilons) plans.push_back(plan_alibi_caches(model, e));

    std::cout << "layer head  slope      ||WqWk^T||";
    for (double e : a.epsilons) std::cout << "  L_h(eps=" << fmt("%g", e) << ")";
    std::cout << "  policy(eps=" << fmt("%g", a.epsilons.front()) << ")\n";
    for (std::size_t i = 0; i < plans.front().heads.size(); ++i) {
        const auto& h = plans.front().heads[i];
        std::cout << fmt("%5.0f", static_cast<double>(h.layer)) << fmt("%5.0f", static_cast<double>(h.head)) << "  "
                  << fmt("%-9.6f", h.slope) << "  " << fmt("%-10.6f", h.spectral_norm);
        for (const auto& p : plans) {
            const auto& hp = p.heads[i];
            std::string len = hp.scope_len == std::numeric_limits<std::size_t>::max() ? "inf"
                                                                                       : std::to_string(hp.scope_len);
            char buf[32];
            std::snprintf(buf, sizeof buf, "  %*s", 10 + static_cast<int>(fmt("%g", p.epsilon).size()), len.c_str());
            std::cout << buf;
        }
        std::cout << "  " << describe_policy(h.policy) << "\n";
    }

    std::size_t violations = 0, verified = 0, skipped = 0;
    Rng root(a.seed);
    for (const auto& plan : plans) {
        for (const auto& h : plan.heads) {
            Rng rng = root.split();
            const ScopeInput in = scope_input(model, h.layer, h.head, plan.epsilon);
            const double len = std::max(2.0 * std::ceil(h.scope), std::floor(h.scope) + 8.0);
            if (!(len <= static_cast<double>(a.max_seq))) {
                ++skipped;
                continue;
            }
            const auto r = verify_bound(in, static_cast<std::size_t>(len), a.trials, rng.next_u64());
            ++verified;
            violations += r.violations;
            if (!r.ok()) {
                std::cout << "VIOLATION eps=" << fmt("%g", plan.epsilon) << " layer " << h.layer << " head " << h.head
                          << ": " << r.violations << " weights above epsilon (max " << fmt("%.6g", r.max_far_weight)
                          << ")\n";
            }
        }
    }
    std::cout << "verified " << verified << " head scopes over " << a.trials << " random sequences each (+"
              << "adversarial), skipped " << skipped << " with scope above " << a.max_seq << " tokens\n";
    std::cout << "violations: " << violations << "\n";
    if (!a.out.empty()) write_text(a.out, scope_plan_to_text(plans.front()));
    return violations == 0 ? kExitOk : kExitVerification;
}

struct BenchArgs {
    std::string model;
    std::string heads;
    std::string out;
    std::string tasks = "needle,copy";
    std::string policies = "full,window,razor";
    std::size_t context_len = 1024;
    std::string depths = "0.1,0.3,0.5,0.7,0.9";
    std::size_t copy_len = 8;
    std::size_t window = 0;
    double epsilon = kDefaultScopeEpsilon;
    CacheFlags cache;
    std::uint64_t seed = 0;
    bool timing = false;
};

int cmd_bench(const BenchArgs& a) {
    const Model model = load_model(a.model);
    const Transformer<float> tf(model);

    BenchConfig config;
    config.compressed = compressed_policy(a.cache);
    config.window = a.window;
    config.timing = a.timing;

    std::vector<BenchPolicy> policies;
    std::stringstream ps(a.policies);
    for (std::string p; std::getline(ps, p, ',');) {
        if (p == "full") {
            policies.push_back(BenchPolicy::Full);
        } else if (p == "window") {
            policies.push_back(BenchPolicy::WindowSinks);
        } else if (p == "razor") {
            policies.push_back(BenchPolicy::Razor);
        } else {
            throw UsageError("unknown policy '" + p + "' in --policies");
        }
    }
    if (model.spec.embedding == EmbeddingKind::ALiBi) {
        config.razor_table = plan_alibi_caches(model, a.epsilon).policy_table(model.spec);
    } else {
        if (a.heads.empty()) throw UsageError("bench on a RoPE model needs --heads");
        config.heads = load_heads_for(model, a.heads).set;
    }

    std::vector<TaskSpec> tasks;
    const auto depths = parse_doubles(a.depths, "--depths");
    std::stringstream ts(a.tasks);
    std::uint64_t task_seed = a.seed;
    for (std::string t; std::getline(ts, t, ',');) {
        TaskSpec spec;
        if (t == "needle") {
            spec.kind = TaskKind::NeedleRetrieval;
        } else if (t == "copy") {
            spec.kind = TaskKind::CopyTask;
        } else {
            throw UsageError("unknown task '" + t + "' in --tasks (needle|copy)");
        }
        spec.context_len = a.context_len;
        spec.depths = depths;
        spec.copy_len = a.copy_len;
        spec.seed = task_seed++;
        try {
            spec.validate();
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
        tasks.push_back(spec);
    }

    const BenchResult result = run_bench(tf, policies, tasks, config);
    for (const auto& e : result.errors) std::cerr << "skipped: " << e << "\n";
    if (result.rows.empty()) {
        std::cerr << "error: no task could be run\n";
        return kExitData;
    }
    emit_report(result, config, a.out);
    std::cout << bench_csv(result);
    std::cout << "wrote " << (fs::path(a.out) / "bench.csv").string() << " and "
              << (fs::path(a.out) / "summary.json").string() << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"razor: head-wise KV-cache compression for a small CPU transformer runtime"};
    app.require_subcommand(1);
    app.footer("Exit codes: 0 success, 1 usage error, 2 data or geometry error, 3 verification failure.\n"
               "RZKV_THREADS=<n> sets the number of worker threads.");

    MakeModelArgs mk;
    auto* c_make = app.add_subcommand("make-model", "Write a built-in fixture model");
    c_make->add_option("--kind", mk.kind, "induction | toy-rope | toy-alibi | toy-gqa")->capture_default_str();
    c_make->add_option("--seed", mk.seed, "Weight seed")->capture_default_str();
    c_make->add_option("--out", mk.out, "Output model file")->required();

    IdentifyArgs id;
    auto* c_id = app.add_subcommand("identify", "Probe a model and write its retrieval-head set");
    c_id->add_option("--model", id.model, "Model file")->required()->check(CLI::ExistingFile);
    c_id->add_option("--out", id.out, "Head-set file to write")->required();
    c_id->add_option("--induction-frac", id.induction_frac, "Fraction of heads kept by induction score")
        ->capture_default_str()
        ->check(CLI::Range(0.0, 1.0));
    c_id->add_option("--echo-frac", id.echo_frac, "Fraction of heads kept by echo score")
        ->capture_default_str()
        ->check(CLI::Range(0.0, 1.0));
    c_id->add_option("--probe-k", id.probe_k, "Random tokens per probe block")->capture_default_str();
    c_id->add_option("--probe-repeats", id.probe_repeats, "Probe block repetitions")->capture_default_str();
    c_id->add_option("--seed", id.seed, "Probe seed")->capture_default_str();
    c_id->add_flag("--allow-empty", id.allow_empty, "Accept an empty selection (warns)");

    RunArgs run;
    auto* c_run = app.add_subcommand("run", "Greedy generation under a cache policy, with a memory report");
    c_run->add_option("--model", run.model, "Model file")->required()->check(CLI::ExistingFile);
    c_run->add_option("--heads", run.heads, "Head-set file (razor policy on RoPE models)");
    c_run->add_option("--prompt", run.prompt, "Comma-separated prompt token ids");
    c_run->add_option("--prompt-len", run.prompt_len, "Random prompt length drawn from --seed");
    c_run->add_option("--steps", run.steps, "Tokens to generate")->capture_default_str();
    c_run->add_option("--policy", run.policy, "full | window | razor")
        ->capture_default_str()
        ->check(CLI::IsMember({"full", "window", "razor"}));
    add_cache_flags(c_run, run.cache);
    c_run->add_option("--window", run.window, "Window for --policy window (0: use --threshold)")
        ->capture_default_str();
    c_run->add_option("--epsilon", run.epsilon, "Attention bound for ALiBi vision scopes")->capture_default_str();
    c_run->add_option("--seed", run.seed, "Seed for --prompt-len")->capture_default_str();
    c_run->add_flag("--capture-attn", run.capture, "Record attention maps during prefill and check them");
    c_run->add_option("--dump-caches", run.dump_caches, "Directory for per-head cache snapshots");
    c_run->add_option("--out", run.out, "JSON report file");

    VerifyArgs ver;
    auto* c_ver = app.add_subcommand("verify-alibi", "Compute ALiBi vision scopes and check the attention bound");
    c_ver->add_option("--model", ver.model, "ALiBi model file")->required()->check(CLI::ExistingFile);
    c_ver->add_option("--epsilon", ver.epsilons, "Attention bound; repeat to compare [default: 0.001]")
        ->expected(1, -1);
    c_ver->add_option("--trials", ver.trials, "Random sequences per head")->capture_default_str();
    c_ver->add_option("--max-seq", ver.max_seq, "Skip heads whose check needs longer sequences")
        ->capture_default_str();
    c_ver->add_option("--seed", ver.seed, "Verification seed")->capture_default_str();
    c_ver->add_option("--out", ver.out, "Scope plan file (first epsilon)");

    BenchArgs bench;
    auto* c_bench = app.add_subcommand("bench", "Needle and copy tasks under full, window and razor caches");
    c_bench->add_option("--model", bench.model, "Model file")->required()->check(CLI::ExistingFile);
    c_bench->add_option("--heads", bench.heads, "Head-set file (RoPE models)");
    c_bench->add_option("--out", bench.out, "Output directory for bench.csv and summary.json")->required();
    c_bench->add_option("--tasks", bench.tasks, "Comma-separated: needle, copy")->capture_default_str();
    c_bench->add_option("--policies", bench.policies, "Comma-separated: full, window, razor")->capture_default_str();
    c_bench->add_option("--context-len", bench.context_len, "Context tokens per task")->capture_default_str();
    c_bench->add_option("--depths", bench.depths, "Comma-separated depth fractions")->capture_default_str();
    c_bench->add_option("--copy-len", bench.copy_len, "Query tokens per copy task")->capture_default_str();
    c_bench->add_option("--window", bench.window, "Window+Sinks window (0: match razor's KV budget)")
        ->capture_default_str();
    c_bench->add_option("--epsilon", bench.epsilon, "Attention bound for ALiBi vision scopes")->capture_default_str();
    add_cache_flags(c_bench, bench.cache);
    c_bench->add_option("--seed", bench.seed, "Task seed")->capture_default_str();
    c_bench->add_flag("--timing", bench.timing, "Record wall time in the ms column (otherwise 0)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (*c_make) return cmd_make_model(mk);
        if (*c_id) return cmd_identify(id);
        if (*c_run) return cmd_run(run);
        if (*c_ver) return cmd_verify_alibi(ver);
        if (*c_bench) return cmd_bench(bench);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitUsage;
}
