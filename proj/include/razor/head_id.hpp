// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "razor/attention_map.hpp"

namespace razor {

using TokenId = std::uint32_t;

struct HeadId {
    std::size_t layer = 0;
    std::size_t head = 0;

    auto operator<=>(const HeadId&) const = default;
};

// Repeated random-token probe: `unique_tokens` draws repeated `repeats` times.
struct ProbeSpec {
    std::size_t unique_tokens = 2500;
    std::size_t repeats = 4;
    std::size_t vocab_size = 0;
    std::uint64_t seed = 0;

    std::size_t length() const { return unique_tokens * repeats; }
    void validate() const;
};

std::vector<TokenId> build_probe(const ProbeSpec& spec);

struct HeadScore {
    HeadId id;
    double echo = 0.0;
    double induction = 0.0;
};

struct ProbeReport {
    std::size_t num_layers = 0;
    std::size_t num_heads = 0;  // query heads per layer
    std::vector<HeadScore> scores;  // layer-major

    const HeadScore& at(std::size_t layer, std::size_t head) const { return scores[layer * num_heads + head]; }
    std::size_t total_heads() const { return num_layers * num_heads; }
};

// Echo targets of query m: earlier positions n < m holding the same token.
// Induction targets: positions 1 <= n < m whose predecessor token equals
// token(m). A head's score is the attention mass on the targets, averaged over
// query positions in repetitions 2..R that have at least one target.
//
// `maps` is layer-major (maps[layer * num_heads + head]); `block_len` is the
// probe's unique-token count K. Rows must sum to 1 within 1e-3.
ProbeReport score_heads(std::span<const AttentionMap> maps, std::size_t num_layers, std::size_t num_heads,
                        std::span<const TokenId> tokens, std::size_t block_len);

enum class Provenance { Echo, Induction, Both, GqaGroup };

const char* provenance_name(Provenance p);
Provenance parse_provenance(const std::string& name);

struct RetrievalEntry {
    HeadId id;
    double echo_score = 0.0;
    double induction_score = 0.0;
    Provenance provenance = Provenance::Induction;
};

struct RetrievalHeadSet {
    std::size_t num_layers = 0;
    std::size_t num_heads = 0;
    double induction_frac = 0.14;
    double echo_frac = 0.01;
    std::size_t group_size = 1;
    std::vector<RetrievalEntry> heads;  // sorted by id

    bool contains(HeadId id) const;
    std::size_t size() const { return heads.size(); }
    double protected_fraction() const;
};

struct SelectOptions {
    double induction_frac = 0.14;
    double echo_frac = 0.01;
    // An empty selection is an error unless explicitly allowed.
    bool allow_empty = false;
};

// Number of heads covered by a top-`frac` selection over `total` heads.
std::size_t top_count(double frac, std::size_t total);

// Union of the top induction and top echo heads by global rank; ties go to the
// lower (layer, head).
RetrievalHeadSet select_retrieval_heads(const ProbeReport& report, const SelectOptions& opts = {});

// Marks every head of a GQA group as retrieval when any member is. Promoted
// heads carry Provenance::GqaGroup and the scores of `report` when given.
RetrievalHeadSet gqa_promote(const RetrievalHeadSet& set, std::size_t group_size,
                             const ProbeReport* report = nullptr);

// Head-set file: pretty-printed JSON, stable key order.
struct HeadSetFile {
    std::string model_id;
    ProbeSpec probe;
    RetrievalHeadSet set;
};

std::string head_set_to_text(const HeadSetFile& file);
HeadSetFile head_set_from_text(const std::string& text);
void write_head_set(const std::filesystem::path& path, const HeadSetFile& file);
HeadSetFile read_head_set(const std::filesystem::path& path);

}  // namespace razor
