// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace razor {

// Rotary embedding over interleaved pairs (v[2i], v[2i+1]), pair i rotating at
// theta_base^(-2i/head_dim) radians per position.
class RopeConfig {
public:
    explicit RopeConfig(std::size_t head_dim, double theta_base = 10000.0)
        : m_head_dim(head_dim), m_theta_base(theta_base) {
        if (head_dim == 0 || head_dim % 2 != 0) throw std::invalid_argument("RopeConfig: head_dim must be even");
        if (!(theta_base > 1.0)) throw std::invalid_argument("RopeConfig: theta_base must exceed 1");
        m_inv_freq.resize(head_dim / 2);
        for (std::size_t i = 0; i < m_inv_freq.size(); ++i) {
            m_inv_freq[i] = std::pow(theta_base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
        }
    }

    std::size_t head_dim() const { return m_head_dim; }
    double theta_base() const { return m_theta_base; }
    double frequency(std::size_t pair) const { return m_inv_freq[pair]; }

private:
    std::size_t m_head_dim;
    double m_theta_base;
    std::vector<double> m_inv_freq;
};

template <std::floating_point T>
void rope_rotate_inplace(std::span<T> v, std::size_t position, const RopeConfig& cfg) {
    if (v.size() != cfg.head_dim()) throw std::invalid_argument("rope_rotate: vector length != head_dim");
    if (position == 0) return;
    const double pos = static_cast<double>(position);
    for (std::size_t i = 0; i < v.size() / 2; ++i) {
        const double angle = pos * cfg.frequency(i);
        const T c = static_cast<T>(std::cos(angle));
        const T s = static_cast<T>(std::sin(angle));
        const T x0 = v[2 * i];
        const T x1 = v[2 * i + 1];
        v[2 * i] = x0 * c - x1 * s;
        v[2 * i + 1] = x0 * s + x1 * c;
    }
}

template <std::floating_point T>
std::vector<T> rope_rotate(std::span<const T> v, std::size_t position, const RopeConfig& cfg) {
    std::vector<T> out(v.begin(), v.end());
    rope_rotate_inplace<T>(out, position, cfg);
    return out;
}

// Standard geometric ALiBi schedule: slope_h = 2^(-8(h+1)/num_heads).
inline std::vector<double> alibi_slopes(std::size_t num_heads) {
    if (num_heads == 0) throw std::invalid_argument("alibi_slopes: num_heads must be >= 1");
    std::vector<double> slopes(num_heads);
    for (std::size_t h = 0; h < num_heads; ++h) {
        slopes[h] = std::exp2(-8.0 * static_cast<double>(h + 1) / static_cast<double>(num_heads));
    }
    return slopes;
}

struct AlibiConfig {
    std::vector<double> slopes;

    explicit AlibiConfig(std::vector<double> s) : slopes(std::move(s)) {
        if (slopes.empty()) throw std::invalid_argument("AlibiConfig: no slopes");
        for (double l : slopes) {
            if (!(l > 0.0) || !std::isfinite(l)) throw std::invalid_argument("AlibiConfig: slopes must be positive");
        }
    }

    static AlibiConfig standard(std::size_t num_heads) { return AlibiConfig(alibi_slopes(num_heads)); }

    std::size_t num_heads() const { return slopes.size(); }
};

// Linear distance penalty added to the query·key score of query m and key n.
inline double alibi_bias(std::size_t m, std::size_t n, double slope) {
    if (m < n) throw std::invalid_argument("alibi_bias: key position after query (m < n)");
    return -slope * static_cast<double>(m - n);
}

}  // namespace razor
