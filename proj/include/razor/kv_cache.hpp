// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "razor/core_math.hpp"
#include "razor/errors.hpp"

namespace razor {

// How one KV head keeps its history.
//  Retrieval  : every token, forever.
//  Compressed : first N_0 sink tokens, the most recent max(S_0, ceil(N/C))
//               tokens, and one compensation token averaging everything else.
//  Window     : first N_0 sink tokens plus a fixed recent window; the rest is
//               discarded outright (streaming baseline, ALiBi scope windows).
enum class PolicyKind { Retrieval, Compressed, Window };

struct HeadPolicy {
    PolicyKind kind = PolicyKind::Retrieval;
    std::size_t sink_count = 0;          // N_0
    double compression_ratio = 5.0;      // C
    std::size_t threshold = 4000;        // S_0
    std::size_t window = 0;              // Window only

    // Threshold value meaning "never compress".
    static constexpr std::size_t kNever = std::numeric_limits<std::size_t>::max();

    static HeadPolicy retrieval() { return {}; }

    static HeadPolicy compressed(std::size_t sinks, double ratio, std::size_t threshold) {
        HeadPolicy p{PolicyKind::Compressed, sinks, ratio, threshold, 0};
        p.validate();
        return p;
    }

    static HeadPolicy windowed(std::size_t sinks, std::size_t window) {
        HeadPolicy p{PolicyKind::Window, sinks, 0.0, 0, window};
        p.validate();
        return p;
    }

    void validate() const {
        if (kind == PolicyKind::Compressed) {
            if (!(compression_ratio > 1.0)) throw std::invalid_argument("HeadPolicy: compression ratio must exceed 1");
            if (threshold < sink_count + 1) throw std::invalid_argument("HeadPolicy: threshold S_0 must be >= N_0 + 1");
        } else if (kind == PolicyKind::Window) {
            if (window == 0) throw std::invalid_argument("HeadPolicy: window must be positive");
        }
    }

    std::size_t sinks() const { return kind == PolicyKind::Retrieval ? 0 : sink_count; }

    bool operator==(const HeadPolicy& o) const {
        if (kind != o.kind) return false;
        switch (kind) {
            case PolicyKind::Retrieval: return true;
            case PolicyKind::Compressed:
                return sink_count == o.sink_count && compression_ratio == o.compression_ratio &&
                       threshold == o.threshold;
            case PolicyKind::Window: return sink_count == o.sink_count && window == o.window;
        }
        return false;
    }
};

const char* policy_kind_name(PolicyKind kind);

// L_h = max(S_0, ceil(N / C)) for a Compressed policy.
inline std::size_t buffer_length(std::uint64_t total_seen, const HeadPolicy& policy) {
    if (policy.kind != PolicyKind::Compressed) throw std::invalid_argument("buffer_length: policy is not Compressed");
    if (policy.threshold == HeadPolicy::kNever) return HeadPolicy::kNever;
    const double c = policy.compression_ratio;
    std::uint64_t scaled;
    if (c == std::floor(c) && c < 1e15) {
        const auto ci = static_cast<std::uint64_t>(c);
        scaled = (total_seen + ci - 1) / ci;
    } else {
        scaled = static_cast<std::uint64_t>(std::ceil(static_cast<double>(total_seen) / c));
    }
    return std::max<std::size_t>(policy.threshold, static_cast<std::size_t>(scaled));
}

// Number of non-sink tokens a head may hold after eviction.
inline std::size_t recent_budget(std::uint64_t total_seen, const HeadPolicy& policy) {
    switch (policy.kind) {
        case PolicyKind::Retrieval: return HeadPolicy::kNever;
        case PolicyKind::Compressed: return buffer_length(total_seen, policy);
        case PolicyKind::Window: return policy.window;
    }
    return HeadPolicy::kNever;
}

// Mean key/value of every dropped token, attended with multiplicity `count`.
template <std::floating_point T>
struct CompensationToken {
    std::vector<T> key;
    std::vector<T> value;
    std::uint64_t count = 0;  // N_d

    CompensationToken() = default;
    explicit CompensationToken(std::size_t dim) : key(dim, T{0}), value(dim, T{0}) {}

    bool inert() const { return count == 0; }

    // Running-mean update: k' = (N_d k + Σ new) / (N_d + n).
    void fold(std::span<const T> keys, std::span<const T> values, std::size_t n) {
        const std::size_t dim = key.size();
        if (keys.size() != n * dim || values.size() != n * dim) {
            throw std::invalid_argument("CompensationToken::fold: dimension mismatch");
        }
        if (n == 0) return;
        const T old_count = static_cast<T>(count);
        const T new_count = static_cast<T>(count + n);
        for (std::size_t j = 0; j < dim; ++j) {
            T ks{0}, vs{0};
            for (std::size_t r = 0; r < n; ++r) {
                ks += keys[r * dim + j];
                vs += values[r * dim + j];
            }
            key[j] = (old_count * key[j] + ks) / new_count;
            value[j] = (old_count * value[j] + vs) / new_count;
        }
        count += n;
    }
};

template <std::floating_point T>
CompensationToken<T> fold_dropped(const CompensationToken<T>& comp, std::span<const T> keys,
                                  std::span<const T> values, std::size_t n) {
    CompensationToken<T> out = comp;
    out.fold(keys, values, n);
    return out;
}

namespace detail {

// FIFO of fixed-width rows with amortised O(1) push_back / pop_front.
template <std::floating_point T>
class RowRing {
public:
    explicit RowRing(std::size_t width = 0) : m_width(width) {}

    std::size_t size() const { return m_size; }
    std::size_t capacity() const { return m_capacity; }

    void push_back(std::span<const T> row) {
        if (m_size == m_capacity) grow();
        const std::size_t slot = (m_head + m_size) % m_capacity;
        std::copy(row.begin(), row.end(), m_data.begin() + slot * m_width);
        ++m_size;
    }

    void pop_front(std::size_t n) {
        n = std::min(n, m_size);
        if (m_capacity) m_head = (m_head + n) % m_capacity;
        m_size -= n;
    }

    std::span<const T> operator[](std::size_t i) const {
        return {m_data.data() + ((m_head + i) % m_capacity) * m_width, m_width};
    }

    void reserve(std::size_t rows) {
        if (rows > m_capacity) relayout(rows);
    }

private:
    void grow() { relayout(std::max<std::size_t>(16, m_capacity * 2)); }

    void relayout(std::size_t new_capacity) {
        std::vector<T> fresh(new_capacity * m_width);
        for (std::size_t i = 0; i < m_size; ++i) {
            auto r = (*this)[i];
            std::copy(r.begin(), r.end(), fresh.begin() + i * m_width);
        }
        m_data = std::move(fresh);
        m_capacity = new_capacity;
        m_head = 0;
    }

    std::size_t m_width;
    std::size_t m_capacity = 0;
    std::size_t m_head = 0;
    std::size_t m_size = 0;
    std::vector<T> m_data;
};

}  // namespace detail

// One KV head's cache: sink block, recent ring and compensation token.
// Stored row i enumerates sinks first, then recent tokens oldest to newest.
template <std::floating_point T>
class HeadKvCache {
public:
    HeadKvCache() = default;
    HeadKvCache(std::size_t dim, std::size_t sink_capacity)
        : m_dim(dim),
          m_sink_capacity(sink_capacity),
          m_recent_keys(dim),
          m_recent_values(dim),
          m_comp(dim) {}

    std::size_t dim() const { return m_dim; }
    std::size_t sink_capacity() const { return m_sink_capacity; }
    std::size_t sink_size() const { return m_sink_keys.size() / std::max<std::size_t>(m_dim, 1); }
    std::size_t recent_size() const { return m_recent_keys.size(); }
    std::size_t stored() const { return sink_size() + recent_size(); }
    std::uint64_t total_seen() const { return m_total_seen; }
    std::uint64_t discarded() const { return m_discarded; }
    const CompensationToken<T>& comp() const { return m_comp; }

    void append(std::span<const T> key, std::span<const T> value) {
        if (key.size() != m_dim || value.size() != m_dim) {
            throw std::invalid_argument("HeadKvCache::append: dimension mismatch");
        }
        if (sink_size() < m_sink_capacity && recent_size() == 0) {
            m_sink_keys.insert(m_sink_keys.end(), key.begin(), key.end());
            m_sink_values.insert(m_sink_values.end(), value.begin(), value.end());
        } else {
            m_recent_keys.push_back(key);
            m_recent_values.push_back(value);
        }
        ++m_total_seen;
    }

    std::span<const T> key(std::size_t i) const {
        const std::size_t s = sink_size();
        if (i < s) return {m_sink_keys.data() + i * m_dim, m_dim};
        return m_recent_keys[i - s];
    }

    std::span<const T> value(std::size_t i) const {
        const std::size_t s = sink_size();
        if (i < s) return {m_sink_values.data() + i * m_dim, m_dim};
        return m_recent_values[i - s];
    }

    // Absolute sequence position of stored row i.
    std::uint64_t position(std::size_t i) const {
        const std::size_t s = sink_size();
        if (i < s) return i;
        return m_total_seen - recent_size() + (i - s);
    }

    // Removes the n oldest recent rows. When fold is set they are averaged into
    // the compensation token; otherwise they are counted as discarded.
    std::size_t drop_oldest(std::size_t n, bool fold) {
        n = std::min(n, recent_size());
        if (n == 0) return 0;
        if (fold) {
            std::vector<T> ks(n * m_dim), vs(n * m_dim);
            for (std::size_t r = 0; r < n; ++r) {
                std::copy_n(m_recent_keys[r].begin(), m_dim, ks.begin() + r * m_dim);
                std::copy_n(m_recent_values[r].begin(), m_dim, vs.begin() + r * m_dim);
            }
            m_comp.fold(ks, vs, n);
        } else {
            m_discarded += n;
        }
        m_recent_keys.pop_front(n);
        m_recent_values.pop_front(n);
        return n;
    }

    void reserve_recent(std::size_t rows) {
        m_recent_keys.reserve(rows);
        m_recent_values.reserve(rows);
    }

    // Rebuilds a cache from snapshot contents.
    static HeadKvCache restore(std::size_t dim, std::size_t sink_capacity, std::span<const T> keys,
                               std::span<const T> values, std::size_t kept, CompensationToken<T> comp) {
        HeadKvCache c(dim, sink_capacity);
        for (std::size_t i = 0; i < kept; ++i) {
            c.append(keys.subspan(i * dim, dim), values.subspan(i * dim, dim));
        }
        c.m_comp = std::move(comp);
        c.m_total_seen += c.m_comp.count;
        return c;
    }

private:
    std::size_t m_dim = 0;
    std::size_t m_sink_capacity = 0;
    std::vector<T> m_sink_keys;
    std::vector<T> m_sink_values;
    detail::RowRing<T> m_recent_keys;
    detail::RowRing<T> m_recent_values;
    CompensationToken<T> m_comp;
    std::uint64_t m_total_seen = 0;
    std::uint64_t m_discarded = 0;
};

// Applies the policy's eviction rule: keeps every sink, keeps the newest
// recent_budget() non-sink tokens and folds (Compressed) or discards (Window)
// the rest. Returns the number of rows removed. Idempotent.
template <std::floating_point T>
std::size_t evict(HeadKvCache<T>& cache, const HeadPolicy& policy) {
    if (policy.kind == PolicyKind::Retrieval) return 0;
    const std::size_t budget = recent_budget(cache.total_seen(), policy);
    if (cache.recent_size() <= budget) return 0;
    return cache.drop_oldest(cache.recent_size() - budget, policy.kind == PolicyKind::Compressed);
}

// Scores every stored row: scale·q·k_i + bias(position_i).
template <std::floating_point T, class Bias>
void score_rows(std::span<const T> q, const HeadKvCache<T>& cache, T scale, Bias&& bias, std::vector<T>& scores) {
    const std::size_t n = cache.stored();
    scores.resize(n);
    for (std::size_t i = 0; i < n; ++i) scores[i] = scale * dot<T>(q, cache.key(i)) + bias(cache.position(i));
}

// Compressed attention over kept rows plus the compensation token weighted by
// its multiplicity N_d:
//   out = (N_d e^{s(k̂)} v̂ + Σ e^{s(k_n)} v_n) / (N_d e^{s(k̂)} + Σ e^{s(k_n)})
// evaluated in log-sum-exp form, the compensation logit being
// log N_d + scale·q·k̂. With N_d = 0 this is plain softmax attention.
template <std::floating_point T, class Bias>
void compressed_attention_into(std::span<const T> q, const HeadKvCache<T>& cache, T scale, Bias&& bias,
                               std::span<T> out, std::vector<T>& scratch) {
    if (q.size() != cache.dim() || out.size() != cache.dim()) {
        throw std::invalid_argument("compressed_attention: query dimension mismatch");
    }
    const auto& comp = cache.comp();
    const std::size_t n = cache.stored();
    if (n == 0 && comp.inert()) throw std::invalid_argument("compressed_attention: empty cache");

    score_rows(q, cache, scale, bias, scratch);
    T hi = -std::numeric_limits<T>::infinity();
    for (T s : scratch) hi = std::max(hi, s);
    T comp_logit{0};
    if (!comp.inert()) {
        comp_logit = static_cast<T>(std::log(static_cast<double>(comp.count))) +
                     scale * dot<T>(q, std::span<const T>(comp.key));
        hi = std::max(hi, comp_logit);
    }

    std::fill(out.begin(), out.end(), T{0});
    T denom{0};
    for (std::size_t i = 0; i < n; ++i) {
        const T w = std::exp(scratch[i] - hi);
        denom += w;
        const auto v = cache.value(i);
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += w * v[j];
    }
    if (!comp.inert()) {
        const T w = std::exp(comp_logit - hi);
        denom += w;
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += w * comp.value[j];
    }
    for (T& o : out) o /= denom;
}

template <std::floating_point T>
std::vector<T> compressed_attention(std::span<const T> q, const HeadKvCache<T>& cache, T scale) {
    std::vector<T> out(cache.dim());
    std::vector<T> scratch;
    compressed_attention_into<T>(q, cache, scale, [](std::uint64_t) { return T{0}; }, out, scratch);
    return out;
}

// ---------------------------------------------------------------------------
// Snapshot layout (little-endian):
//   "RZKV" | u32 version | u32 dim | u32 N_0 | u64 kept | u64 N_d
//   sink rows, then recent rows, each as dim f32 key followed by dim f32 value
//   compensation key (dim f32), compensation value (dim f32)
// Sink rows = min(N_0, kept).

inline constexpr std::uint32_t kSnapshotVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

template <class U>
void write_pod(std::ostream& os, U v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <class U>
U read_pod(std::istream& is, const char* what) {
    U v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(U))) {
        throw TruncationError(std::string("truncated input while reading ") + what);
    }
    return v;
}

template <std::floating_point T>
void write_f32_row(std::ostream& os, std::span<const T> row) {
    for (T x : row) write_pod<float>(os, static_cast<float>(x));
}

}  // namespace detail

template <std::floating_point T>
void write_snapshot(std::ostream& os, const HeadKvCache<T>& cache) {
    os.write("RZKV", 4);
    detail::write_pod<std::uint32_t>(os, kSnapshotVersion);
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(cache.dim()));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(cache.sink_capacity()));
    detail::write_pod<std::uint64_t>(os, cache.stored());
    detail::write_pod<std::uint64_t>(os, cache.comp().count);
    for (std::size_t i = 0; i < cache.stored(); ++i) {
        detail::write_f32_row<T>(os, cache.key(i));
        detail::write_f32_row<T>(os, cache.value(i));
    }
    detail::write_f32_row<T>(os, cache.comp().key);
    detail::write_f32_row<T>(os, cache.comp().value);
}

inline HeadKvCache<float> read_snapshot(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4)) throw TruncationError("truncated input while reading snapshot magic");
    if (std::memcmp(magic, "RZKV", 4) != 0) throw FormatError("not a KV snapshot (bad magic)");
    const auto version = detail::read_pod<std::uint32_t>(is, "version");
    if (version != kSnapshotVersion) throw FormatError("unsupported snapshot version " + std::to_string(version));
    const auto dim = detail::read_pod<std::uint32_t>(is, "dim");
    const auto sinks = detail::read_pod<std::uint32_t>(is, "sink count");
    const auto kept = detail::read_pod<std::uint64_t>(is, "kept count");
    const auto dropped = detail::read_pod<std::uint64_t>(is, "dropped count");

    std::vector<float> keys(kept * dim), values(kept * dim);
    for (std::uint64_t i = 0; i < kept; ++i) {
        for (std::uint32_t j = 0; j < dim; ++j) keys[i * dim + j] = detail::read_pod<float>(is, "key row");
        for (std::uint32_t j = 0; j < dim; ++j) values[i * dim + j] = detail::read_pod<float>(is, "value row");
    }
    CompensationToken<float> comp(dim);
    for (auto& k : comp.key) k = detail::read_pod<float>(is, "compensation key");
    for (auto& v : comp.value) v = detail::read_pod<float>(is, "compensation value");
    comp.count = dropped;
    return HeadKvCache<float>::restore(dim, sinks, keys, values, kept, std::move(comp));
}

}  // namespace razor
