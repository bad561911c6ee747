// SPDX-License-Identifier: Apache-2.0
#include "razor/head_id.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "json.hpp"
#include "razor/errors.hpp"
#include "razor/rng.hpp"

namespace razor {

void ProbeSpec::validate() const {
    if (unique_tokens < 2) throw std::invalid_argument("ProbeSpec: unique_tokens must be >= 2");
    if (repeats < 2) throw std::invalid_argument("ProbeSpec: repeats must be >= 2");
    if (vocab_size == 0) throw std::invalid_argument("ProbeSpec: vocab_size must be positive");
}

std::vector<TokenId> build_probe(const ProbeSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    std::vector<TokenId> tokens;
    tokens.reserve(spec.length());
    for (std::size_t i = 0; i < spec.unique_tokens; ++i) {
        tokens.push_back(static_cast<TokenId>(rng.below(spec.vocab_size)));
    }
    for (std::size_t r = 1; r < spec.repeats; ++r) {
        tokens.insert(tokens.end(), tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(spec.unique_tokens));
    }
    return tokens;
}

namespace {

struct TargetSets {
    // Per query position (offset by block_len), flattened target lists.
    std::vector<std::vector<std::size_t>> echo;
    std::vector<std::vector<std::size_t>> induction;
};

TargetSets build_targets(std::span<const TokenId> tokens, std::size_t block_len) {
    const std::size_t n = tokens.size();
    TargetSets t;
    t.echo.resize(n - block_len);
    t.induction.resize(n - block_len);

    std::unordered_map<TokenId, std::vector<std::size_t>> occurrences;
    for (std::size_t p = 0; p < n; ++p) occurrences[tokens[p]].push_back(p);

    for (std::size_t m = block_len; m < n; ++m) {
        const auto& occ = occurrences[tokens[m]];
        auto& echo = t.echo[m - block_len];
        auto& ind = t.induction[m - block_len];
        for (std::size_t p : occ) {
            if (p < m) echo.push_back(p);
            // p is an earlier occurrence; the token after it is the induction target.
            if (p + 1 < m) ind.push_back(p + 1);
        }
    }
    return t;
}

}  // namespace

ProbeReport score_heads(std::span<const AttentionMap> maps, std::size_t num_layers, std::size_t num_heads,
                        std::span<const TokenId> tokens, std::size_t block_len) {
    if (maps.size() != num_layers * num_heads) throw std::invalid_argument("score_heads: map count != layers*heads");
    if (block_len == 0 || block_len >= tokens.size()) {
        throw std::invalid_argument("score_heads: block length must be in [1, sequence length)");
    }
    for (const auto& m : maps) {
        if (m.seq_len() != tokens.size()) throw std::invalid_argument("score_heads: map length != token count");
    }

    const TargetSets targets = build_targets(tokens, block_len);
    ProbeReport report{num_layers, num_heads, std::vector<HeadScore>(num_layers * num_heads)};

    for (std::size_t idx = 0; idx < maps.size(); ++idx) {
        const AttentionMap& map = maps[idx];
        double echo_sum = 0.0, ind_sum = 0.0;
        std::size_t echo_n = 0, ind_n = 0;
        for (std::size_t m = block_len; m < tokens.size(); ++m) {
            const auto row = map.row(m);
            double total = 0.0;
            for (double w : row) total += w;
            if (std::abs(total - 1.0) > 1e-3) {
                throw std::invalid_argument("score_heads: attention row " + std::to_string(m) + " of head " +
                                            std::to_string(idx) + " is not stochastic (sum " +
                                            std::to_string(total) + ")");
            }
            const auto& e = targets.echo[m - block_len];
            if (!e.empty()) {
                double s = 0.0;
                for (std::size_t p : e) s += row[p];
                echo_sum += s;
                ++echo_n;
            }
            const auto& in = targets.induction[m - block_len];
            if (!in.empty()) {
                double s = 0.0;
                for (std::size_t p : in) s += row[p];
                ind_sum += s;
                ++ind_n;
            }
        }
        auto& hs = report.scores[idx];
        hs.id = {idx / num_heads, idx % num_heads};
        hs.echo = echo_n ? std::clamp(echo_sum / static_cast<double>(echo_n), 0.0, 1.0) : 0.0;
        hs.induction = ind_n ? std::clamp(ind_sum / static_cast<double>(ind_n), 0.0, 1.0) : 0.0;
    }
    return report;
}

const char* provenance_name(Provenance p) {
    switch (p) {
        case Provenance::Echo: return "echo";
        case Provenance::Induction: return "induction";
        case Provenance::Both: return "both";
        case Provenance::GqaGroup: return "gqa_group";
    }
    return "?";
}

Provenance parse_provenance(const std::string& name) {
    if (name == "echo") return Provenance::Echo;
    if (name == "induction") return Provenance::Induction;
    if (name == "both") return Provenance::Both;
    if (name == "gqa_group") return Provenance::GqaGroup;
    throw FormatError("unknown provenance '" + name + "'");
}

bool RetrievalHeadSet::contains(HeadId id) const {
    return std::binary_search(heads.begin(), heads.end(), RetrievalEntry{id},
                              [](const RetrievalEntry& a, const RetrievalEntry& b) { return a.id < b.id; });
}

double RetrievalHeadSet::protected_fraction() const {
    const std::size_t total = num_layers * num_heads;
    return total ? static_cast<double>(heads.size()) / static_cast<double>(total) : 0.0;
}

std::size_t top_count(double frac, std::size_t total) {
    if (!(frac >= 0.0 && frac <= 1.0)) throw std::invalid_argument("selection fraction must lie in [0, 1]");
    // The slack keeps products such as 0.14 * 100 = 14.000000000000002 at 14.
    const double raw = std::ceil(frac * static_cast<double>(total) - 1e-9);
    return std::min<std::size_t>(total, static_cast<std::size_t>(std::max(0.0, raw)));
}

namespace {

std::vector<std::size_t> ranked(const ProbeReport& report, double HeadScore::*field) {
    std::vector<std::size_t> order(report.scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double sa = report.scores[a].*field;
        const double sb = report.scores[b].*field;
        if (sa != sb) return sa > sb;
        return report.scores[a].id < report.scores[b].id;
    });
    return order;
}

}  // namespace

RetrievalHeadSet select_retrieval_heads(const ProbeReport& report, const SelectOptions& opts) {
    const std::size_t total = report.total_heads();
    const std::size_t n_ind = top_count(opts.induction_frac, total);
    const std::size_t n_echo = top_count(opts.echo_frac, total);

    std::vector<int> flags(total, 0);  // bit 0: induction, bit 1: echo
    const auto by_ind = ranked(report, &HeadScore::induction);
    const auto by_echo = ranked(report, &HeadScore::echo);
    for (std::size_t i = 0; i < n_ind; ++i) flags[by_ind[i]] |= 1;
    for (std::size_t i = 0; i < n_echo; ++i) flags[by_echo[i]] |= 2;

    RetrievalHeadSet set;
    set.num_layers = report.num_layers;
    set.num_heads = report.num_heads;
    set.induction_frac = opts.induction_frac;
    set.echo_frac = opts.echo_frac;
    for (std::size_t idx = 0; idx < total; ++idx) {
        if (!flags[idx]) continue;
        const auto& s = report.scores[idx];
        const Provenance p = flags[idx] == 3 ? Provenance::Both
                             : flags[idx] == 2 ? Provenance::Echo
                                               : Provenance::Induction;
        set.heads.push_back({s.id, s.echo, s.induction, p});
    }
    if (set.heads.empty() && total > 0) {
        if (!opts.allow_empty) {
            throw std::invalid_argument("select_retrieval_heads: selection is empty (pass allow_empty to force)");
        }
        std::cerr << "warning: retrieval head set is empty; every head will be compressed\n";
    }
    return set;
}

RetrievalHeadSet gqa_promote(const RetrievalHeadSet& set, std::size_t group_size, const ProbeReport* report) {
    if (group_size == 0 || set.num_heads % group_size != 0) {
        throw std::invalid_argument("gqa_promote: group size " + std::to_string(group_size) +
                                    " does not divide heads per layer " + std::to_string(set.num_heads));
    }
    RetrievalHeadSet out = set;
    out.group_size = group_size;
    if (group_size == 1) return out;

    for (const auto& e : set.heads) {
        const std::size_t first = (e.id.head / group_size) * group_size;
        for (std::size_t h = first; h < first + group_size; ++h) {
            const HeadId id{e.id.layer, h};
            if (out.contains(id)) continue;
            RetrievalEntry added{id, 0.0, 0.0, Provenance::GqaGroup};
            if (report) {
                added.echo_score = report->at(id.layer, id.head).echo;
                added.induction_score = report->at(id.layer, id.head).induction;
            }
            auto pos = std::lower_bound(out.heads.begin(), out.heads.end(), added,
                                        [](const RetrievalEntry& a, const RetrievalEntry& b) { return a.id < b.id; });
            out.heads.insert(pos, added);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

using nlohmann::ordered_json;

std::string head_set_to_text(const HeadSetFile& file) {
    const auto& s = file.set;
    ordered_json j;
    j["format"] = "razor-heads";
    j["version"] = 1;
    j["model_id"] = file.model_id;
    j["num_layers"] = s.num_layers;
    j["num_heads"] = s.num_heads;
    j["selection"] = {{"induction_frac", s.induction_frac},
                      {"echo_frac", s.echo_frac},
                      {"gqa_group_size", s.group_size}};
    j["probe"] = {{"unique_tokens", file.probe.unique_tokens},
                  {"repeats", file.probe.repeats},
                  {"vocab_size", file.probe.vocab_size},
                  {"seed", file.probe.seed}};
    j["protected_fraction"] = s.protected_fraction();
    ordered_json heads = ordered_json::array();
    for (const auto& e : s.heads) {
        heads.push_back({{"layer", e.id.layer},
                         {"head", e.id.head},
                         {"echo_score", e.echo_score},
                         {"induction_score", e.induction_score},
                         {"provenance", provenance_name(e.provenance)}});
    }
    j["heads"] = std::move(heads);
    return j.dump(2) + "\n";
}

HeadSetFile head_set_from_text(const std::string& text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("head-set file is not valid JSON: ") + e.what());
    }
    try {
        if (j.at("format") != "razor-heads") throw FormatError("head-set file: unexpected format tag");
        if (j.at("version") != 1) throw FormatError("head-set file: unsupported version");
        HeadSetFile f;
        f.model_id = j.at("model_id").get<std::string>();
        f.set.num_layers = j.at("num_layers").get<std::size_t>();
        f.set.num_heads = j.at("num_heads").get<std::size_t>();
        const auto& sel = j.at("selection");
        f.set.induction_frac = sel.at("induction_frac").get<double>();
        f.set.echo_frac = sel.at("echo_frac").get<double>();
        f.set.group_size = sel.at("gqa_group_size").get<std::size_t>();
        const auto& pr = j.at("probe");
        f.probe.unique_tokens = pr.at("unique_tokens").get<std::size_t>();
        f.probe.repeats = pr.at("repeats").get<std::size_t>();
        f.probe.vocab_size = pr.at("vocab_size").get<std::size_t>();
        f.probe.seed = pr.at("seed").get<std::uint64_t>();
        for (const auto& h : j.at("heads")) {
            RetrievalEntry e;
            e.id = {h.at("layer").get<std::size_t>(), h.at("head").get<std::size_t>()};
            if (e.id.layer >= f.set.num_layers || e.id.head >= f.set.num_heads) {
                throw ShapeError("head-set file: head id outside the declared geometry");
            }
            e.echo_score = h.at("echo_score").get<double>();
            e.induction_score = h.at("induction_score").get<double>();
            e.provenance = parse_provenance(h.at("provenance").get<std::string>());
            f.set.heads.push_back(e);
        }
        std::sort(f.set.heads.begin(), f.set.heads.end(),
                  [](const RetrievalEntry& a, const RetrievalEntry& b) { return a.id < b.id; });
        return f;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("head-set file: ") + e.what());
    }
}

void write_head_set(const std::filesystem::path& path, const HeadSetFile& file) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path.string() + " for writing");
    os << head_set_to_text(file);
    if (!os) throw Error("failed writing " + path.string());
}

HeadSetFile read_head_set(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return head_set_from_text(ss.str());
}

}  // namespace razor
