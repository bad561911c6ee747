// SPDX-License-Identifier: Apache-2.0
// Independent reference computations used only by the tests. They favour
// directness over speed and never call the library kernels they check.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace oracle {

// Singular values (descending) by one-sided Jacobi rotations in long double.
inline std::vector<long double> jacobi_singular_values(std::size_t rows, std::size_t cols,
                                                       const std::vector<double>& row_major) {
    std::vector<std::vector<long double>> a(cols, std::vector<long double>(rows));
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) a[j][i] = row_major[i * cols + j];

    for (int sweep = 0; sweep < 100; ++sweep) {
        long double off = 0.0L;
        for (std::size_t p = 0; p + 1 < cols; ++p) {
            for (std::size_t q = p + 1; q < cols; ++q) {
                long double alpha = 0, beta = 0, gamma = 0;
                for (std::size_t i = 0; i < rows; ++i) {
                    alpha += a[p][i] * a[p][i];
                    beta += a[q][i] * a[q][i];
                    gamma += a[p][i] * a[q][i];
                }
                if (gamma == 0.0L) continue;
                off = std::max(off, std::fabs(gamma) / std::sqrt(alpha * beta));
                const long double zeta = (beta - alpha) / (2.0L * gamma);
                const long double t = (zeta >= 0 ? 1.0L : -1.0L) / (std::fabs(zeta) + std::sqrt(1.0L + zeta * zeta));
                const long double c = 1.0L / std::sqrt(1.0L + t * t);
                const long double s = c * t;
                for (std::size_t i = 0; i < rows; ++i) {
                    const long double x = a[p][i], y = a[q][i];
                    a[p][i] = c * x - s * y;
                    a[q][i] = s * x + c * y;
                }
            }
        }
        if (off < 1e-18L) break;
    }
    std::vector<long double> sv;
    for (const auto& col : a) {
        long double n = 0;
        for (long double x : col) n += x * x;
        sv.push_back(std::sqrt(n));
    }
    std::sort(sv.begin(), sv.end(), std::greater<>());
    return sv;
}

// Direct exp / sum in extended precision.
inline std::vector<long double> softmax_ld(std::span<const double> x) {
    long double hi = x[0];
    for (double v : x) hi = std::max<long double>(hi, v);
    std::vector<long double> e(x.size());
    long double sum = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        e[i] = std::exp(static_cast<long double>(x[i]) - hi);
        sum += e[i];
    }
    for (auto& v : e) v /= sum;
    return e;
}

// Exact softmax attention over an explicit row list, in long double.
inline std::vector<double> exact_attention(std::span<const double> q, const std::vector<std::vector<double>>& keys,
                                           const std::vector<std::vector<double>>& values, double scale,
                                           const std::vector<double>& bias = {}) {
    std::vector<double> scores(keys.size());
    for (std::size_t i = 0; i < keys.size(); ++i) {
        long double s = 0;
        for (std::size_t j = 0; j < q.size(); ++j) s += static_cast<long double>(q[j]) * keys[i][j];
        scores[i] = static_cast<double>(s * scale + (bias.empty() ? 0.0L : bias[i]));
    }
    const auto w = softmax_ld(scores);
    std::vector<double> out(q.size());
    for (std::size_t j = 0; j < out.size(); ++j) {
        long double acc = 0;
        for (std::size_t i = 0; i < keys.size(); ++i) acc += w[i] * values[i][j];
        out[j] = static_cast<double>(acc);
    }
    return out;
}

// Kept rows followed by `dropped` literal copies of the compensation pair.
inline std::vector<double> duplicate_token_attention(std::span<const double> q,
                                                     std::vector<std::vector<double>> keys,
                                                     std::vector<std::vector<double>> values,
                                                     const std::vector<double>& comp_key,
                                                     const std::vector<double>& comp_value, std::uint64_t dropped,
                                                     double scale) {
    for (std::uint64_t i = 0; i < dropped; ++i) {
        keys.push_back(comp_key);
        values.push_back(comp_value);
    }
    return exact_attention(q, keys, values, scale);
}

// Element-wise batch mean of a row list.
inline std::vector<double> batch_mean(const std::vector<std::vector<double>>& rows) {
    std::vector<long double> acc(rows.front().size(), 0.0L);
    for (const auto& r : rows)
        for (std::size_t j = 0; j < r.size(); ++j) acc[j] += r[j];
    std::vector<double> out(acc.size());
    for (std::size_t j = 0; j < acc.size(); ++j) out[j] = static_cast<double>(acc[j] / rows.size());
    return out;
}

struct CountedScores {
    double echo = 0.0;
    double induction = 0.0;
};

// Literal reading of the echo / induction definitions with O(n^2) loops:
// weight(m, n) is the attention of query m on key n.
inline CountedScores count_scores(const std::vector<std::uint32_t>& tokens, std::size_t block_len,
                                  const std::function<double(std::size_t, std::size_t)>& weight) {
    long double echo_sum = 0, ind_sum = 0;
    std::size_t echo_rows = 0, ind_rows = 0;
    for (std::size_t m = block_len; m < tokens.size(); ++m) {
        long double e = 0, in = 0;
        bool has_e = false, has_in = false;
        for (std::size_t n = 0; n < m; ++n) {
            if (tokens[n] == tokens[m]) {
                e += weight(m, n);
                has_e = true;
            }
        }
        for (std::size_t n = 1; n < m; ++n) {
            if (tokens[n - 1] == tokens[m]) {
                in += weight(m, n);
                has_in = true;
            }
        }
        if (has_e) {
            echo_sum += e;
            ++echo_rows;
        }
        if (has_in) {
            ind_sum += in;
            ++ind_rows;
        }
    }
    return {echo_rows ? static_cast<double>(echo_sum / echo_rows) : 0.0,
            ind_rows ? static_cast<double>(ind_sum / ind_rows) : 0.0};
}

}  // namespace oracle
