// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "razor/errors.hpp"

namespace razor {

// Dense row-major matrix. Runtime weights are Matrix<float>; tests and the
// scope calculator work in Matrix<double>.
template <std::floating_point T>
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, T{0}) {}
    Matrix(std::size_t r, std::size_t c, std::vector<T> values)
        : rows(r), cols(c), data(std::move(values)) {
        if (data.size() != rows * cols) {
            throw std::invalid_argument("Matrix: data length " + std::to_string(data.size()) +
                                        " != rows*cols " + std::to_string(rows * cols));
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
        return m;
    }

    T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    T operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const T> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    template <std::floating_point U>
    Matrix<U> cast() const {
        return Matrix<U>(rows, cols, std::vector<U>(data.begin(), data.end()));
    }

    bool all_finite() const {
        return std::all_of(data.begin(), data.end(), [](T v) { return std::isfinite(v); });
    }

    bool operator==(const Matrix&) const = default;
};

template <std::floating_point T>
T dot(std::span<const T> a, std::span<const T> b) {
    T acc{0};
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

template <std::floating_point T>
T squared_norm(std::span<const T> a) {
    return dot(a, a);
}

// out = x · W  (x is a row vector of length W.rows).
template <std::floating_point T>
void vec_mat(std::span<const T> x, const Matrix<T>& w, std::span<T> out) {
    std::fill(out.begin(), out.end(), T{0});
    for (std::size_t i = 0; i < w.rows; ++i) {
        const T xi = x[i];
        if (xi == T{0}) continue;
        const T* wr = w.data.data() + i * w.cols;
        for (std::size_t j = 0; j < w.cols; ++j) out[j] += xi * wr[j];
    }
}

template <std::floating_point T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.cols != b.rows) throw std::invalid_argument("matmul: inner dimensions differ");
    Matrix<T> c(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) vec_mat<T>(a.row(i), b, c.row(i));
    return c;
}

template <std::floating_point T>
Matrix<T> transpose(const Matrix<T>& a) {
    Matrix<T> t(a.cols, a.rows);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
    return t;
}

// In-place numerically stable softmax. -inf entries receive zero weight.
template <std::floating_point T>
void softmax_inplace(std::span<T> x) {
    if (x.empty()) throw std::invalid_argument("softmax: empty input");
    T hi = -std::numeric_limits<T>::infinity();
    for (T v : x) {
        if (std::isnan(v) || v == std::numeric_limits<T>::infinity()) {
            throw std::invalid_argument("softmax: non-finite score");
        }
        hi = std::max(hi, v);
    }
    if (hi == -std::numeric_limits<T>::infinity()) {
        throw std::invalid_argument("softmax: every score is -inf");
    }
    T sum{0};
    for (T& v : x) {
        v = std::exp(v - hi);
        sum += v;
    }
    for (T& v : x) v /= sum;
}

template <std::floating_point T>
std::vector<T> softmax(std::span<const T> scores) {
    std::vector<T> out(scores.begin(), scores.end());
    softmax_inplace<T>(out);
    return out;
}

enum class NormKind { LayerNorm, RMSNorm };

template <std::floating_point T>
struct NormParams {
    std::vector<T> gamma;
    std::vector<T> bias;  // all-zero for RMSNorm
    NormKind kind = NormKind::RMSNorm;
    T epsilon = T(1e-5);

    static NormParams unit(std::size_t dim, NormKind kind, T epsilon = T(1e-5)) {
        return {std::vector<T>(dim, T{1}), std::vector<T>(dim, T{0}), kind, epsilon};
    }

    void validate() const {
        if (gamma.size() != bias.size()) throw std::invalid_argument("NormParams: gamma/bias length mismatch");
        if (!(epsilon > T{0})) throw std::invalid_argument("NormParams: epsilon must be positive");
        if (kind == NormKind::RMSNorm &&
            std::any_of(bias.begin(), bias.end(), [](T b) { return b != T{0}; })) {
            throw std::invalid_argument("NormParams: RMSNorm requires an all-zero bias");
        }
    }

    template <std::floating_point U>
    NormParams<U> cast() const {
        return {std::vector<U>(gamma.begin(), gamma.end()), std::vector<U>(bias.begin(), bias.end()), kind,
                static_cast<U>(epsilon)};
    }
};

template <std::floating_point T>
void apply_norm_into(std::span<const T> x, const NormParams<T>& p, std::span<T> out) {
    const std::size_t d = x.size();
    if (d != p.gamma.size() || out.size() != d) throw std::invalid_argument("apply_norm: length mismatch");
    if (p.kind == NormKind::LayerNorm) {
        T mean{0};
        for (T v : x) mean += v;
        mean /= static_cast<T>(d);
        T var{0};
        for (T v : x) var += (v - mean) * (v - mean);
        var /= static_cast<T>(d);
        const T inv = T{1} / std::sqrt(var + p.epsilon);
        for (std::size_t i = 0; i < d; ++i) out[i] = p.gamma[i] * ((x[i] - mean) * inv) + p.bias[i];
    } else {
        T ms{0};
        for (T v : x) ms += v * v;
        ms /= static_cast<T>(d);
        const T inv = T{1} / std::sqrt(ms + p.epsilon);
        for (std::size_t i = 0; i < d; ++i) out[i] = p.gamma[i] * (x[i] * inv);
    }
}

template <std::floating_point T>
std::vector<T> apply_norm(std::span<const T> x, const NormParams<T>& p) {
    p.validate();
    std::vector<T> out(x.size());
    apply_norm_into<T>(x, p, out);
    return out;
}

// Largest singular value by power iteration on MᵀM, started from the
// normalised all-ones vector. The returned estimate is sqrt(‖MᵀM v‖) at the
// final unit iterate v, which never falls below the Rayleigh value ‖M v‖.
// Throws ConvergenceError (carrying the last estimate) after max_iters.
template <std::floating_point T>
T spectral_norm(const Matrix<T>& m, T tol = T(1e-12), std::size_t max_iters = 100000) {
    if (!(tol > T{0})) throw std::invalid_argument("spectral_norm: tol must be positive");
    if (m.rows == 0 || m.cols == 0) throw std::invalid_argument("spectral_norm: empty matrix");
    const std::size_t n = m.cols;
    std::vector<T> v(n, T{1} / std::sqrt(static_cast<T>(n)));
    std::vector<T> mv(m.rows), mtmv(n);

    auto apply = [&] {
        for (std::size_t i = 0; i < m.rows; ++i) mv[i] = dot<T>(m.row(i), v);
        std::fill(mtmv.begin(), mtmv.end(), T{0});
        for (std::size_t i = 0; i < m.rows; ++i) {
            const auto r = m.row(i);
            for (std::size_t j = 0; j < n; ++j) mtmv[j] += r[j] * mv[i];
        }
        return std::sqrt(squared_norm<T>(mtmv));
    };

    T lambda = apply();
    // All-ones lies in the null space of MᵀM; restart from basis vectors.
    for (std::size_t e = 0; lambda == T{0} && e < n; ++e) {
        std::fill(v.begin(), v.end(), T{0});
        v[e] = T{1};
        lambda = apply();
    }
    if (lambda == T{0}) throw std::invalid_argument("spectral_norm: zero matrix");

    T estimate = std::sqrt(lambda);
    for (std::size_t it = 0; it < max_iters; ++it) {
        for (std::size_t j = 0; j < n; ++j) v[j] = mtmv[j] / lambda;
        lambda = apply();
        const T next = std::sqrt(lambda);
        if (std::abs(next - estimate) <= tol * next) return next;
        estimate = next;
    }
    throw ConvergenceError("spectral_norm: no convergence after " + std::to_string(max_iters) + " iterations",
                           static_cast<double>(estimate));
}

}  // namespace razor
