// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace razor {

// Causal attention weights of one head over a sequence, packed lower
// triangular: row m holds the m+1 weights on positions 0..m.
class AttentionMap {
public:
    AttentionMap() = default;
    explicit AttentionMap(std::size_t seq_len) : m_seq_len(seq_len), m_weights(seq_len * (seq_len + 1) / 2, 0.0) {}

    std::size_t seq_len() const { return m_seq_len; }

    std::span<double> row(std::size_t m) { return {m_weights.data() + offset(m), m + 1}; }
    std::span<const double> row(std::size_t m) const { return {m_weights.data() + offset(m), m + 1}; }

private:
    static std::size_t offset(std::size_t m) { return m * (m + 1) / 2; }

    std::size_t m_seq_len = 0;
    std::vector<double> m_weights;
};

}  // namespace razor
