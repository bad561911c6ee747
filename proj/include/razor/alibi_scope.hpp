// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "razor/core_math.hpp"
#include "razor/kv_cache.hpp"
#include "razor/model_io.hpp"
#include "razor/policy_table.hpp"

namespace razor {

inline constexpr double kDefaultScopeEpsilon = 0.001;

// One ALiBi head: query/key projections (hidden × head_dim, q = x·Wq), the
// pre-attention norm, its slope and the attention-weight threshold ε.
struct ScopeInput {
    Matrix<double> wq;
    Matrix<double> wk;
    NormParams<double> norm;
    double slope = 1.0;
    double epsilon = kDefaultScopeEpsilon;

    void validate() const;
};

// Bilinear form of the unscaled score: q_m·k_n = x_m (Wq Wkᵀ) x_nᵀ.
Matrix<double> composed_form(const Matrix<double>& wq, const Matrix<double>& wk);

// L = (2‖Wq Wkᵀ‖₂ (‖γ‖² + ‖b‖²) − ln ε) / slope
double vision_scope(double spectral, const NormParams<double>& norm, double slope, double epsilon);
double vision_scope(const ScopeInput& input);

struct ScopeVerification {
    double scope = 0.0;             // real-valued bound
    std::size_t sequences = 0;      // random + adversarial sequences evaluated
    std::size_t checked = 0;        // weights at distance > scope
    std::size_t violations = 0;     // of those, weights above ε
    double max_margin = -1.0;       // max(weight − ε) over checked weights
    double max_boundary_weight = 0; // max weight at the first distance beyond the scope
    double max_far_weight = 0;      // max weight over all checked distances

    bool ok() const { return violations == 0; }
};

// Evaluates exact Eq.-style ALiBi attention rows (unscaled scores minus
// slope·distance) over `trials` random pre-norm sequences and, when
// `adversarial` is set, extra sequences aligned with the top singular vectors
// of the composed form. Violations are counted, never thrown.
ScopeVerification verify_bound(const ScopeInput& input, std::size_t seq_len, std::size_t trials,
                               std::uint64_t seed, bool adversarial = true);

struct HeadScope {
    std::size_t layer = 0;
    std::size_t head = 0;
    double slope = 0.0;
    double spectral_norm = 0.0;
    double scope = 0.0;       // real-valued bound
    std::size_t scope_len = 0;  // L_h = ceil(scope), saturated at SIZE_MAX
    HeadPolicy policy;
};

struct ScopePlan {
    double epsilon = kDefaultScopeEpsilon;
    std::size_t max_context = 0;
    std::size_t num_layers = 0;
    std::size_t num_heads = 0;
    std::vector<HeadScope> heads;  // layer-major

    const HeadScope& at(std::size_t layer, std::size_t head) const { return heads[layer * num_heads + head]; }
    PolicyTable policy_table(const ModelSpec& spec) const;
};

// Extracts the ScopeInput of one query head from an ALiBi model.
ScopeInput scope_input(const Model& model, std::size_t layer, std::size_t head, double epsilon);

// Heads whose L_h reaches max_context keep full caches; the others keep the
// window of distances 0..L_h with no sinks and no compensation token. Query
// heads sharing a KV head take the widest policy of their group.
ScopePlan plan_alibi_caches(const Model& model, double epsilon = kDefaultScopeEpsilon);

std::string scope_plan_to_text(const ScopePlan& plan);

}  // namespace razor
