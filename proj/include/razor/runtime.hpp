// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <concepts>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "razor/attention_map.hpp"
#include "razor/core_math.hpp"
#include "razor/embeddings.hpp"
#include "razor/head_id.hpp"
#include "razor/kv_cache.hpp"
#include "razor/model_io.hpp"
#include "razor/policy_table.hpp"

namespace razor {

// Per-KV-head cache occupancy.
struct HeadMemory {
    std::size_t layer = 0;
    std::size_t kv_head = 0;
    PolicyKind kind = PolicyKind::Retrieval;
    std::uint64_t total_seen = 0;
    std::uint64_t stored = 0;        // kept rows (sinks + recent)
    std::uint64_t comp_entries = 0;  // 1 when the compensation token is live
    std::uint64_t dropped = 0;       // N_d
    std::uint64_t discarded = 0;     // rows dropped by Window policies

    std::uint64_t entries() const { return stored + comp_entries; }
};

struct MemoryReport {
    std::vector<HeadMemory> heads;
    std::uint64_t full_entries = 0;
    std::uint64_t stored_entries = 0;

    // full / stored, the compensation token counting as one entry.
    double ratio() const {
        return stored_entries ? static_cast<double>(full_entries) / static_cast<double>(stored_entries) : 1.0;
    }
};

// `caches` is layer-major over KV heads.
template <std::floating_point T>
MemoryReport memory_report(std::span<const HeadKvCache<T>> caches, const PolicyTable& policies) {
    if (caches.size() != policies.num_layers() * policies.num_kv_heads()) {
        throw std::invalid_argument("memory_report: cache count does not match the policy table");
    }
    MemoryReport r;
    for (std::size_t i = 0; i < caches.size(); ++i) {
        const auto& c = caches[i];
        HeadMemory h;
        h.layer = i / policies.num_kv_heads();
        h.kv_head = i % policies.num_kv_heads();
        h.kind = policies.kv_policy(h.layer, h.kv_head).kind;
        h.total_seen = c.total_seen();
        h.stored = c.stored();
        h.comp_entries = c.comp().inert() ? 0 : 1;
        h.dropped = c.comp().count;
        h.discarded = c.discarded();
        r.full_entries += h.total_seen;
        r.stored_entries += h.entries();
        r.heads.push_back(h);
    }
    return r;
}

template <std::floating_point T>
struct LayerParams {
    NormParams<T> attn_norm;
    Matrix<T> wq, wk, wv, wo;
    NormParams<T> ffn_norm;
    Matrix<T> w_gate, w_up, w_down;
};

// Immutable weights in working precision plus the policy-free forward pass.
template <std::floating_point T>
class Transformer {
public:
    explicit Transformer(const Model& model);

    const ModelSpec& spec() const { return m_spec; }
    const Matrix<T>& tok_embed() const { return m_tok_embed; }
    const LayerParams<T>& layer(std::size_t i) const { return m_layers[i]; }
    const NormParams<T>& final_norm() const { return m_final_norm; }
    const Matrix<T>& lm_head() const { return m_lm_head; }
    const std::optional<RopeConfig>& rope() const { return m_rope; }
    const std::vector<double>& slopes() const { return m_slopes; }
    T scale() const { return m_scale; }

    // Additive positional score term for query position m, key position n.
    T bias(std::size_t head, std::uint64_t m, std::uint64_t n) const {
        if (m_slopes.empty()) return T{0};
        return static_cast<T>(-m_slopes[head] * static_cast<double>(m - n));
    }

    // Full causal forward with plain per-layer key/value matrices; no caches or
    // policies involved. Row m holds the logits after position m.
    Matrix<T> reference_forward(std::span<const TokenId> tokens) const;

    // Feed-forward sub-block, residual included: x += W_down(silu(x̂ W_gate) ⊙ x̂ W_up).
    void mlp_into(std::size_t layer, std::span<T> x, std::vector<T>& scratch) const;
    void logits_into(std::span<const T> x, std::span<T> out, std::vector<T>& scratch) const;

private:
    ModelSpec m_spec;
    Matrix<T> m_tok_embed;
    std::vector<LayerParams<T>> m_layers;
    NormParams<T> m_final_norm;
    Matrix<T> m_lm_head;
    std::optional<RopeConfig> m_rope;
    std::vector<double> m_slopes;  // empty for RoPE
    T m_scale;
};

struct SessionOptions {
    // Compressed heads are re-evicted once their recent block outgrows the
    // budget by this many rows. Window heads are trimmed every step.
    std::size_t evict_chunk = 128;
    // Record per-head attention weights during prefill (probe mode).
    bool capture_attention = false;
};

// One generation stream: owns a cache per (layer, KV head).
template <std::floating_point T>
class Session {
public:
    Session(const Transformer<T>& model, PolicyTable policies, SessionOptions options = {});

    // Runs the prompt with full attention, then evicts every non-retrieval
    // cache. Row m of the result holds the logits after prompt position m.
    Matrix<T> prefill(std::span<const TokenId> tokens);
    std::vector<T> decode_step(TokenId token);

    // Teacher-forced decode of `tokens`, returning the logits after each.
    Matrix<T> decode_tokens(std::span<const TokenId> tokens);

    std::size_t position() const { return m_position; }
    const PolicyTable& policies() const { return m_policies; }
    const Transformer<T>& model() const { return m_model; }

    std::size_t cache_count() const { return m_caches.size(); }
    const HeadKvCache<T>& cache(std::size_t layer, std::size_t kv_head) const {
        return m_caches[layer * m_model.spec().num_kv_heads + kv_head];
    }
    std::span<const HeadKvCache<T>> caches() const { return m_caches; }

    // Replaces all caches (layer-major over KV heads); the next token is
    // processed at `position`.
    void restore(std::size_t position, std::vector<HeadKvCache<T>> caches);

    // Attention maps recorded by the last capturing prefill, layer-major over
    // query heads. Moves them out of the session.
    std::vector<AttentionMap> take_attention_maps();

    MemoryReport memory_report() const { return razor::memory_report<T>(m_caches, m_policies); }

private:
    void evict_all(bool eager);

    const Transformer<T>& m_model;
    PolicyTable m_policies;
    SessionOptions m_options;
    std::vector<HeadKvCache<T>> m_caches;
    std::vector<AttentionMap> m_maps;
    std::size_t m_position = 0;
};

std::size_t argmax(std::span<const float> logits);
std::size_t argmax(std::span<const double> logits);

// Greedy continuation: prefill `prompt`, then emit `steps` argmax tokens.
template <std::floating_point T>
std::vector<TokenId> greedy_generate(Session<T>& session, std::span<const TokenId> prompt, std::size_t steps);

// Captures attention over the probe with full caches and scores every head.
ProbeReport probe_model(const Transformer<float>& model, const ProbeSpec& spec);

extern template class Transformer<float>;
extern template class Transformer<double>;
extern template class Session<float>;
extern template class Session<double>;

}  // namespace razor
