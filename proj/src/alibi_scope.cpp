// SPDX-License-Identifier: Apache-2.0
#include "razor/alibi_scope.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "json.hpp"
#include "razor/embeddings.hpp"
#include "razor/parallel.hpp"
#include "razor/rng.hpp"

namespace razor {

void ScopeInput::validate() const {
    if (!(epsilon > 0.0 && epsilon < 1.0)) throw std::invalid_argument("vision scope: epsilon must lie in (0, 1)");
    if (!(slope > 0.0) || !std::isfinite(slope)) throw std::invalid_argument("vision scope: slope must be positive");
    if (wq.rows == 0 || wq.cols == 0) throw std::invalid_argument("vision scope: empty query projection");
    if (wq.rows != wk.rows || wq.cols != wk.cols) {
        throw std::invalid_argument("vision scope: query and key projections differ in shape");
    }
    if (norm.gamma.size() != wq.rows) throw std::invalid_argument("vision scope: norm width != hidden size");
    norm.validate();
}

Matrix<double> composed_form(const Matrix<double>& wq, const Matrix<double>& wk) {
    return matmul(wq, transpose(wk));
}

double vision_scope(double spectral, const NormParams<double>& norm, double slope, double epsilon) {
    if (!(epsilon > 0.0 && epsilon < 1.0)) throw std::invalid_argument("vision scope: epsilon must lie in (0, 1)");
    if (!(slope > 0.0)) throw std::invalid_argument("vision scope: slope must be positive");
    const double g = squared_norm<double>(norm.gamma);
    const double b = squared_norm<double>(norm.bias);
    return (2.0 * spectral * (g + b) - std::log(epsilon)) / slope;
}

double vision_scope(const ScopeInput& input) {
    input.validate();
    const auto w = composed_form(input.wq, input.wk);
    double spectral = 0.0;
    // A zero form leaves only the -ln ε term.
    if (std::any_of(w.data.begin(), w.data.end(), [](double x) { return x != 0.0; })) spectral = spectral_norm(w);
    return vision_scope(spectral, input.norm, input.slope, input.epsilon);
}

namespace {

struct SingularPair {
    std::vector<double> u;  // left: maximises u·W
    std::vector<double> v;  // right
};

SingularPair top_singular_pair(const Matrix<double>& w) {
    const std::size_t n = w.cols;
    std::vector<double> v(n, 1.0 / std::sqrt(static_cast<double>(n))), wv(w.rows), next(n);
    for (int it = 0; it < 2000; ++it) {
        for (std::size_t i = 0; i < w.rows; ++i) wv[i] = dot<double>(w.row(i), v);
        std::fill(next.begin(), next.end(), 0.0);
        for (std::size_t i = 0; i < w.rows; ++i) {
            for (std::size_t j = 0; j < n; ++j) next[j] += w(i, j) * wv[i];
        }
        const double len = std::sqrt(squared_norm<double>(next));
        if (len == 0.0) break;
        for (std::size_t j = 0; j < n; ++j) v[j] = next[j] / len;
    }
    for (std::size_t i = 0; i < w.rows; ++i) wv[i] = dot<double>(w.row(i), v);
    const double len = std::sqrt(squared_norm<double>(wv));
    if (len > 0.0) {
        for (double& x : wv) x /= len;
    }
    return {wv, v};
}

// Pre-norm vector whose normalised image points (approximately) along t.
std::vector<double> prenorm_for(const std::vector<double>& t, const NormParams<double>& norm) {
    std::vector<double> x(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double g = norm.gamma[i];
        x[i] = g != 0.0 ? (t[i] - norm.bias[i]) / g : 0.0;
    }
    return x;
}

struct RowStats {
    std::size_t checked = 0;
    std::size_t violations = 0;
    double max_margin = -std::numeric_limits<double>::infinity();
    double max_boundary = 0.0;
    double max_far = 0.0;

    void merge(const RowStats& o) {
        checked += o.checked;
        violations += o.violations;
        max_margin = std::max(max_margin, o.max_margin);
        max_boundary = std::max(max_boundary, o.max_boundary);
        max_far = std::max(max_far, o.max_far);
    }
};

// Checks every attention row of one pre-norm sequence.
RowStats check_sequence(const ScopeInput& in, const Matrix<double>& pre, double scope) {
    const std::size_t n = pre.rows;
    const std::size_t hd = in.wq.cols;
    Matrix<double> q(n, hd), k(n, hd);
    std::vector<double> x(pre.cols);
    for (std::size_t i = 0; i < n; ++i) {
        apply_norm_into<double>(pre.row(i), in.norm, x);
        vec_mat<double>(x, in.wq, q.row(i));
        vec_mat<double>(x, in.wk, k.row(i));
    }
    // Distances strictly beyond the real-valued scope.
    const std::size_t first_far = static_cast<std::size_t>(std::floor(scope)) + 1;
    RowStats st;
    std::vector<double> s(n);
    for (std::size_t m = first_far; m < n; ++m) {
        double hi = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= m; ++j) {
            s[j] = dot<double>(q.row(m), k.row(j)) + alibi_bias(m, j, in.slope);
            hi = std::max(hi, s[j]);
        }
        double denom = 0.0;
        for (std::size_t j = 0; j <= m; ++j) denom += std::exp(s[j] - hi);
        for (std::size_t j = 0; j + first_far <= m; ++j) {
            const double w = std::exp(s[j] - hi) / denom;
            ++st.checked;
            if (w > in.epsilon) ++st.violations;
            st.max_margin = std::max(st.max_margin, w - in.epsilon);
            st.max_far = std::max(st.max_far, w);
            if (m - j == first_far) st.max_boundary = std::max(st.max_boundary, w);
        }
    }
    return st;
}

}  // namespace

ScopeVerification verify_bound(const ScopeInput& input, std::size_t seq_len, std::size_t trials, std::uint64_t seed,
                               bool adversarial) {
    input.validate();
    if (trials == 0) throw std::invalid_argument("verify_bound: trials must be >= 1");
    const double scope = vision_scope(input);
    if (!(static_cast<double>(seq_len) > scope)) {
        throw std::invalid_argument("verify_bound: sequence length must exceed the vision scope");
    }
    const std::size_t hidden = input.wq.rows;

    std::vector<Matrix<double>> sequences;
    Rng root(seed);
    for (std::size_t t = 0; t < trials; ++t) {
        Rng rng = root.split();
        Matrix<double> pre(seq_len, hidden);
        const std::size_t mode = t % 3;
        if (mode == 0) {
            // iid Gaussian states with a per-sequence scale
            const double sd = std::exp(rng.uniform(-2.0, 2.0));
            for (double& v : pre.data) v = rng.normal(0.0, sd);
        } else if (mode == 1) {
            // a small vocabulary of states, repeated like tokens
            const std::size_t vocab = 2 + rng.below(30);
            Matrix<double> table(vocab, hidden);
            for (double& v : table.data) v = rng.normal();
            for (std::size_t i = 0; i < seq_len; ++i) {
                const auto r = table.row(rng.below(vocab));
                std::copy(r.begin(), r.end(), pre.row(i).begin());
            }
        } else {
            // shared offset plus noise
            std::vector<double> offset(hidden);
            for (double& v : offset) v = rng.normal(0.0, 3.0);
            for (std::size_t i = 0; i < seq_len; ++i) {
                for (std::size_t j = 0; j < hidden; ++j) pre(i, j) = offset[j] + rng.normal();
            }
        }
        sequences.push_back(std::move(pre));
    }

    if (adversarial) {
        const auto w = composed_form(input.wq, input.wk);
        const auto sp = top_singular_pair(w);
        auto neg = [](std::vector<double> a) {
            for (double& x : a) x = -x;
            return a;
        };
        const auto pu = prenorm_for(sp.u, input.norm);
        const auto pv = prenorm_for(sp.v, input.norm);
        const auto nu = prenorm_for(neg(sp.u), input.norm);
        const auto nv = prenorm_for(neg(sp.v), input.norm);
        // (far-half state, near-half state A, near-half state B): queries in
        // the second half align with u, distant keys with v.
        const std::vector<std::vector<double>> patterns[] = {
            {pv, pu, pu}, {pv, pu, nv}, {pv, nv, pu}, {pv, nu, pu}, {pu, pv, pv}, {pv, pv, pu},
        };
        for (const auto& p : patterns) {
            Matrix<double> pre(seq_len, hidden);
            for (std::size_t i = 0; i < seq_len; ++i) {
                const auto& src = i < seq_len / 2 ? p[0] : (i % 2 == 0 ? p[1] : p[2]);
                std::copy(src.begin(), src.end(), pre.row(i).begin());
            }
            sequences.push_back(std::move(pre));
        }
        // Alternating u / v throughout.
        Matrix<double> alt(seq_len, hidden);
        for (std::size_t i = 0; i < seq_len; ++i) {
            const auto& src = i % 2 ? pu : pv;
            std::copy(src.begin(), src.end(), alt.row(i).begin());
        }
        sequences.push_back(std::move(alt));
    }

    std::vector<RowStats> stats(sequences.size());
    parallel_for(sequences.size(), [&](std::size_t i) { stats[i] = check_sequence(input, sequences[i], scope); });

    RowStats total;
    for (const auto& s : stats) total.merge(s);
    ScopeVerification r;
    r.scope = scope;
    r.sequences = sequences.size();
    r.checked = total.checked;
    r.violations = total.violations;
    r.max_margin = total.checked ? total.max_margin : -input.epsilon;
    r.max_boundary_weight = total.max_boundary;
    r.max_far_weight = total.max_far;
    return r;
}

ScopeInput scope_input(const Model& model, std::size_t layer, std::size_t head, double epsilon) {
    const auto& spec = model.spec;
    if (spec.embedding != EmbeddingKind::ALiBi) {
        throw std::invalid_argument("vision scopes are defined for ALiBi models only; this model uses RoPE");
    }
    if (layer >= spec.num_layers || head >= spec.num_heads) throw std::out_of_range("scope_input: head id");
    const auto& l = model.weights.layers[layer];
    const std::size_t d = spec.head_dim;
    const std::size_t kvh = spec.kv_head_of(head);
    ScopeInput in;
    in.wq = Matrix<double>(spec.hidden_dim, d);
    in.wk = Matrix<double>(spec.hidden_dim, d);
    for (std::size_t i = 0; i < spec.hidden_dim; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            in.wq(i, j) = l.wq(i, head * d + j);
            in.wk(i, j) = l.wk(i, kvh * d + j);
        }
    }
    in.norm = l.attn_norm.cast<double>();
    in.slope = spec.slopes()[head];
    in.epsilon = epsilon;
    return in;
}

ScopePlan plan_alibi_caches(const Model& model, double epsilon) {
    const auto& spec = model.spec;
    if (spec.embedding != EmbeddingKind::ALiBi) {
        throw std::invalid_argument("cache planning by vision scope requires an ALiBi model; this model uses RoPE");
    }
    if (!(epsilon > 0.0 && epsilon < 1.0)) throw std::invalid_argument("epsilon must lie in (0, 1)");

    ScopePlan plan;
    plan.epsilon = epsilon;
    plan.max_context = spec.max_context;
    plan.num_layers = spec.num_layers;
    plan.num_heads = spec.num_heads;
    plan.heads.resize(spec.num_layers * spec.num_heads);

    parallel_for(plan.heads.size(), [&](std::size_t idx) {
        const std::size_t layer = idx / spec.num_heads;
        const std::size_t head = idx % spec.num_heads;
        const ScopeInput in = scope_input(model, layer, head, epsilon);
        const auto w = composed_form(in.wq, in.wk);
        const bool zero = std::all_of(w.data.begin(), w.data.end(), [](double x) { return x == 0.0; });
        HeadScope hs;
        hs.layer = layer;
        hs.head = head;
        hs.slope = in.slope;
        hs.spectral_norm = zero ? 0.0 : spectral_norm(w);
        hs.scope = vision_scope(hs.spectral_norm, in.norm, in.slope, epsilon);
        const double c = std::ceil(hs.scope);
        hs.scope_len = c >= static_cast<double>(std::numeric_limits<std::size_t>::max() / 2)
                           ? std::numeric_limits<std::size_t>::max()
                           : static_cast<std::size_t>(c);
        plan.heads[idx] = hs;
    });

    const std::size_t group = spec.group_size();
    for (std::size_t layer = 0; layer < spec.num_layers; ++layer) {
        for (std::size_t first = 0; first < spec.num_heads; first += group) {
            std::size_t widest = 0;
            for (std::size_t h = first; h < first + group; ++h) widest = std::max(widest, plan.at(layer, h).scope_len);
            const HeadPolicy policy = widest >= spec.max_context ? HeadPolicy::retrieval()
                                                                 : HeadPolicy::windowed(0, widest + 1);
            for (std::size_t h = first; h < first + group; ++h) plan.heads[layer * spec.num_heads + h].policy = policy;
        }
    }
    return plan;
}

PolicyTable ScopePlan::policy_table(const ModelSpec& spec) const {
    std::vector<HeadPolicy> policies;
    for (const auto& h : heads) policies.push_back(h.policy);
    return PolicyTable(spec, std::move(policies));
}

std::string scope_plan_to_text(const ScopePlan& plan) {
    nlohmann::ordered_json j;
    j["format"] = "razor-scope-plan";
    j["version"] = 1;
    j["epsilon"] = plan.epsilon;
    j["max_context"] = plan.max_context;
    auto& arr = j["heads"] = nlohmann::ordered_json::array();
    for (const auto& h : plan.heads) {
        nlohmann::ordered_json e;
        e["layer"] = h.layer;
        e["head"] = h.head;
        e["slope"] = h.slope;
        e["spectral_norm"] = h.spectral_norm;
        e["scope"] = h.scope;
        if (h.scope_len == std::numeric_limits<std::size_t>::max()) {
            e["L_h"] = nullptr;
        } else {
            e["L_h"] = h.scope_len;
        }
        e["policy"] = policy_kind_name(h.policy.kind);
        if (h.policy.kind == PolicyKind::Window) e["window"] = h.policy.window;
        arr.push_back(std::move(e));
    }
    return j.dump(2) + "\n";
}

}  // namespace razor
