// SPDX-License-Identifier: Apache-2.0
#include "razor/runtime.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "razor/errors.hpp"
#include "razor/parallel.hpp"

namespace razor {

namespace {

template <std::floating_point T>
LayerParams<T> cast_layer(const LayerWeights& w) {
    return {w.attn_norm.cast<T>(), w.wq.cast<T>(), w.wk.cast<T>(), w.wv.cast<T>(), w.wo.cast<T>(),
            w.ffn_norm.cast<T>(),  w.w_gate.cast<T>(), w.w_up.cast<T>(), w.w_down.cast<T>()};
}

// Normalises x and produces the query/key/value rows, rotated to `position`
// on RoPE models.
template <std::floating_point T>
void project(const Transformer<T>& model, const LayerParams<T>& layer, std::span<const T> x, std::size_t position,
             std::span<T> q, std::span<T> k, std::span<T> v, std::vector<T>& normed) {
    const auto& spec = model.spec();
    normed.resize(x.size());
    apply_norm_into<T>(x, layer.attn_norm, normed);
    vec_mat<T>(normed, layer.wq, q);
    vec_mat<T>(normed, layer.wk, k);
    vec_mat<T>(normed, layer.wv, v);
    if (const auto& rope = model.rope()) {
        const std::size_t d = spec.head_dim;
        for (std::size_t h = 0; h < spec.num_heads; ++h) rope_rotate_inplace<T>(q.subspan(h * d, d), position, *rope);
        for (std::size_t h = 0; h < spec.num_kv_heads; ++h) {
            rope_rotate_inplace<T>(k.subspan(h * d, d), position, *rope);
        }
    }
}

// x += o · W_o
template <std::floating_point T>
void add_output(const LayerParams<T>& layer, std::span<const T> o, std::span<T> x, std::vector<T>& scratch) {
    scratch.resize(x.size());
    vec_mat<T>(o, layer.wo, scratch);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += scratch[i];
}

// Exact causal softmax attention of one query over `count` rows. The
// operation order matches compressed_attention_into with an inert
// compensation token, which keeps all-retrieval caches bitwise faithful.
template <std::floating_point T, class KeyAt, class ValueAt, class BiasAt>
void attend_rows(std::span<const T> q, std::size_t count, KeyAt&& key_at, ValueAt&& value_at, T scale,
                 BiasAt&& bias_at, std::span<T> out, std::vector<T>& scores, double* capture) {
    scores.resize(count);
    for (std::size_t i = 0; i < count; ++i) scores[i] = scale * dot<T>(q, key_at(i)) + bias_at(i);
    T hi = -std::numeric_limits<T>::infinity();
    for (T s : scores) hi = std::max(hi, s);

    std::fill(out.begin(), out.end(), T{0});
    T denom{0};
    for (std::size_t i = 0; i < count; ++i) {
        const T w = std::exp(scores[i] - hi);
        denom += w;
        const auto v = value_at(i);
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += w * v[j];
        if (capture) scores[i] = w;
    }
    for (T& o : out) o /= denom;
    if (capture) {
        for (std::size_t i = 0; i < count; ++i) capture[i] = static_cast<double>(scores[i]) / static_cast<double>(denom);
    }
}

void check_context(const ModelSpec& spec, std::size_t position, std::size_t extra) {
    if (position + extra > spec.max_context) {
        throw ContextOverflowError("sequence of " + std::to_string(position + extra) +
                                   " tokens exceeds the model's max_context " + std::to_string(spec.max_context));
    }
}

void check_tokens(const ModelSpec& spec, std::span<const TokenId> tokens) {
    for (TokenId t : tokens) {
        if (t >= spec.vocab_size) {
            throw std::invalid_argument("token id " + std::to_string(t) + " outside vocabulary of " +
                                        std::to_string(spec.vocab_size));
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Transformer

template <std::floating_point T>
Transformer<T>::Transformer(const Model& model) : m_spec(model.spec) {
    validate_weights(model);
    m_tok_embed = model.weights.tok_embed.cast<T>();
    for (const auto& l : model.weights.layers) m_layers.push_back(cast_layer<T>(l));
    m_final_norm = model.weights.final_norm.cast<T>();
    m_lm_head = model.weights.lm_head.cast<T>();
    if (m_spec.embedding == EmbeddingKind::RoPE) {
        m_rope.emplace(m_spec.head_dim, m_spec.rope_theta);
    } else {
        m_slopes = m_spec.slopes();
    }
    m_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(m_spec.head_dim)));
}

template <std::floating_point T>
void Transformer<T>::mlp_into(std::size_t layer, std::span<T> x, std::vector<T>& scratch) const {
    const auto& l = m_layers[layer];
    const std::size_t hid = m_spec.hidden_dim;
    const std::size_t ffn = m_spec.ffn_dim;
    scratch.resize(hid + 2 * ffn + hid);
    std::span<T> normed(scratch.data(), hid);
    std::span<T> gate(scratch.data() + hid, ffn);
    std::span<T> up(scratch.data() + hid + ffn, ffn);
    std::span<T> down(scratch.data() + hid + 2 * ffn, hid);
    apply_norm_into<T>(x, l.ffn_norm, normed);
    vec_mat<T>(normed, l.w_gate, gate);
    vec_mat<T>(normed, l.w_up, up);
    for (std::size_t i = 0; i < ffn; ++i) gate[i] = gate[i] / (T{1} + std::exp(-gate[i])) * up[i];
    vec_mat<T>(std::span<const T>(gate), l.w_down, down);
    for (std::size_t i = 0; i < hid; ++i) x[i] += down[i];
}

template <std::floating_point T>
void Transformer<T>::logits_into(std::span<const T> x, std::span<T> out, std::vector<T>& scratch) const {
    scratch.resize(x.size());
    apply_norm_into<T>(x, m_final_norm, scratch);
    vec_mat<T>(std::span<const T>(scratch), m_lm_head, out);
}

template <std::floating_point T>
Matrix<T> Transformer<T>::reference_forward(std::span<const TokenId> tokens) const {
    check_context(m_spec, 0, tokens.size());
    check_tokens(m_spec, tokens);
    const std::size_t n = tokens.size();
    const std::size_t hid = m_spec.hidden_dim;
    const std::size_t d = m_spec.head_dim;

    Matrix<T> x(n, hid);
    for (std::size_t m = 0; m < n; ++m) {
        const auto e = m_tok_embed.row(tokens[m]);
        std::copy(e.begin(), e.end(), x.row(m).begin());
    }

    Matrix<T> q(n, m_spec.q_width()), k(n, m_spec.kv_width()), v(n, m_spec.kv_width());
    for (std::size_t li = 0; li < m_spec.num_layers; ++li) {
        const auto& layer = m_layers[li];
        parallel_for(n, [&](std::size_t m) {
            std::vector<T> normed;
            project<T>(*this, layer, x.row(m), m, q.row(m), k.row(m), v.row(m), normed);
        });
        parallel_for(n, [&](std::size_t m) {
            std::vector<T> o(m_spec.q_width()), scores, scratch;
            for (std::size_t h = 0; h < m_spec.num_heads; ++h) {
                const std::size_t kvh = m_spec.kv_head_of(h);
                attend_rows<T>(
                    std::span<const T>(q.row(m)).subspan(h * d, d), m + 1,
                    [&](std::size_t i) { return std::span<const T>(k.row(i)).subspan(kvh * d, d); },
                    [&](std::size_t i) { return std::span<const T>(v.row(i)).subspan(kvh * d, d); }, m_scale,
                    [&](std::size_t i) { return bias(h, m, i); }, std::span<T>(o).subspan(h * d, d), scores, nullptr);
            }
            add_output<T>(layer, o, x.row(m), scratch);
            mlp_into(li, x.row(m), scratch);
        });
    }

    Matrix<T> logits(n, m_spec.vocab_size);
    parallel_for(n, [&](std::size_t m) {
        std::vector<T> scratch;
        logits_into(x.row(m), logits.row(m), scratch);
    });
    return logits;
}

// ---------------------------------------------------------------------------
// Session

template <std::floating_point T>
Session<T>::Session(const Transformer<T>& model, PolicyTable policies, SessionOptions options)
    : m_model(model), m_policies(std::move(policies)), m_options(options) {
    const auto& spec = model.spec();
    if (m_policies.num_layers() != spec.num_layers || m_policies.num_heads() != spec.num_heads ||
        m_policies.num_kv_heads() != spec.num_kv_heads) {
        throw ShapeError("policy table geometry does not match the model");
    }
#ifndef RAZOR_ATTN_CAPTURE
    if (options.capture_attention) {
        throw std::invalid_argument("attention capture was compiled out (RAZOR_ATTN_CAPTURE=OFF)");
    }
#endif
    for (std::size_t l = 0; l < spec.num_layers; ++l) {
        for (std::size_t h = 0; h < spec.num_kv_heads; ++h) {
            m_caches.emplace_back(spec.head_dim, m_policies.kv_policy(l, h).sinks());
        }
    }
}

template <std::floating_point T>
void Session<T>::evict_all(bool eager) {
    const auto& spec = m_model.spec();
    for (std::size_t i = 0; i < m_caches.size(); ++i) {
        const auto& policy = m_policies.kv_policy(i / spec.num_kv_heads, i % spec.num_kv_heads);
        auto& cache = m_caches[i];
        if (policy.kind == PolicyKind::Compressed && !eager) {
            const std::size_t budget = recent_budget(cache.total_seen(), policy);
            if (budget != HeadPolicy::kNever && cache.recent_size() > budget + m_options.evict_chunk) {
                evict(cache, policy);
            }
        } else {
            evict(cache, policy);
        }
    }
}

template <std::floating_point T>
Matrix<T> Session<T>::prefill(std::span<const TokenId> tokens) {
    const auto& spec = m_model.spec();
    if (m_position != 0) throw std::logic_error("Session::prefill: session already holds tokens");
    if (tokens.empty()) throw std::invalid_argument("Session::prefill: empty prompt");
    check_context(spec, 0, tokens.size());
    check_tokens(spec, tokens);

    const std::size_t n = tokens.size();
    const std::size_t d = spec.head_dim;
    const bool capture = m_options.capture_attention;
    m_maps.clear();
    if (capture) {
        for (std::size_t i = 0; i < spec.num_layers * spec.num_heads; ++i) m_maps.emplace_back(n);
    }

    Matrix<T> x(n, spec.hidden_dim);
    for (std::size_t m = 0; m < n; ++m) {
        const auto e = m_model.tok_embed().row(tokens[m]);
        std::copy(e.begin(), e.end(), x.row(m).begin());
    }

    Matrix<T> q(n, spec.q_width()), k(n, spec.kv_width()), v(n, spec.kv_width());
    for (std::size_t li = 0; li < spec.num_layers; ++li) {
        const auto& layer = m_model.layer(li);
        parallel_for(n, [&](std::size_t m) {
            std::vector<T> normed;
            project<T>(m_model, layer, x.row(m), m, q.row(m), k.row(m), v.row(m), normed);
        });
        for (std::size_t h = 0; h < spec.num_kv_heads; ++h) {
            auto& cache = m_caches[li * spec.num_kv_heads + h];
            cache.reserve_recent(n);
            for (std::size_t m = 0; m < n; ++m) {
                cache.append(std::span<const T>(k.row(m)).subspan(h * d, d),
                             std::span<const T>(v.row(m)).subspan(h * d, d));
            }
        }
        parallel_for(n, [&](std::size_t m) {
            std::vector<T> o(spec.q_width()), scores, scratch;
            for (std::size_t h = 0; h < spec.num_heads; ++h) {
                const auto& cache = m_caches[li * spec.num_kv_heads + spec.kv_head_of(h)];
                double* cap = capture ? m_maps[li * spec.num_heads + h].row(m).data() : nullptr;
                attend_rows<T>(
                    std::span<const T>(q.row(m)).subspan(h * d, d), m + 1,
                    [&](std::size_t i) { return cache.key(i); }, [&](std::size_t i) { return cache.value(i); },
                    m_model.scale(), [&](std::size_t i) { return m_model.bias(h, m, cache.position(i)); },
                    std::span<T>(o).subspan(h * d, d), scores, cap);
            }
            add_output<T>(layer, o, x.row(m), scratch);
            m_model.mlp_into(li, x.row(m), scratch);
        });
    }

    Matrix<T> logits(n, spec.vocab_size);
    parallel_for(n, [&](std::size_t m) {
        std::vector<T> scratch;
        m_model.logits_into(x.row(m), logits.row(m), scratch);
    });

    m_position = n;
    evict_all(true);
    return logits;
}

template <std::floating_point T>
std::vector<T> Session<T>::decode_step(TokenId token) {
    const auto& spec = m_model.spec();
    check_context(spec, m_position, 1);
    const TokenId one[] = {token};
    check_tokens(spec, one);

    const std::size_t d = spec.head_dim;
    const std::size_t m = m_position;
    std::vector<T> x(m_model.tok_embed().row(token).begin(), m_model.tok_embed().row(token).end());
    std::vector<T> q(spec.q_width()), k(spec.kv_width()), v(spec.kv_width()), o(spec.q_width()), scratch;

    for (std::size_t li = 0; li < spec.num_layers; ++li) {
        const auto& layer = m_model.layer(li);
        project<T>(m_model, layer, x, m, q, k, v, scratch);
        for (std::size_t h = 0; h < spec.num_kv_heads; ++h) {
            m_caches[li * spec.num_kv_heads + h].append(std::span<const T>(k).subspan(h * d, d),
                                                       std::span<const T>(v).subspan(h * d, d));
        }
        m_position = m + 1;
        evict_all(false);
        parallel_for(spec.num_heads, [&](std::size_t h) {
            const auto& cache = m_caches[li * spec.num_kv_heads + spec.kv_head_of(h)];
            std::vector<T> scores;
            compressed_attention_into<T>(
                std::span<const T>(q).subspan(h * d, d), cache, m_model.scale(),
                [&](std::uint64_t pos) { return m_model.bias(h, m, pos); }, std::span<T>(o).subspan(h * d, d),
                scores);
        });
        add_output<T>(layer, o, x, scratch);
        m_model.mlp_into(li, x, scratch);
    }
    std::vector<T> logits(spec.vocab_size);
    m_model.logits_into(x, logits, scratch);
    return logits;
}

template <std::floating_point T>
Matrix<T> Session<T>::decode_tokens(std::span<const TokenId> tokens) {
    Matrix<T> out(tokens.size(), m_model.spec().vocab_size);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const auto row = decode_step(tokens[i]);
        std::copy(row.begin(), row.end(), out.row(i).begin());
    }
    return out;
}

template <std::floating_point T>
void Session<T>::restore(std::size_t position, std::vector<HeadKvCache<T>> caches) {
    const auto& spec = m_model.spec();
    if (caches.size() != m_caches.size()) throw ShapeError("restore: cache count does not match the model");
    for (std::size_t i = 0; i < caches.size(); ++i) {
        if (caches[i].dim() != spec.head_dim) throw ShapeError("restore: cache dimension does not match head_dim");
    }
    check_context(spec, position, 0);
    m_caches = std::move(caches);
    m_position = position;
}

template <std::floating_point T>
std::vector<AttentionMap> Session<T>::take_attention_maps() {
    return std::exchange(m_maps, {});
}

template <std::floating_point T>
static std::size_t argmax_impl(std::span<const T> logits) {
    if (logits.empty()) throw std::invalid_argument("argmax: empty logits");
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[best]) best = i;
    }
    return best;
}

std::size_t argmax(std::span<const float> logits) { return argmax_impl<float>(logits); }
std::size_t argmax(std::span<const double> logits) { return argmax_impl<double>(logits); }

template <std::floating_point T>
std::vector<TokenId> greedy_generate(Session<T>& session, std::span<const TokenId> prompt, std::size_t steps) {
    check_context(session.model().spec(), 0, prompt.size() + (steps > 0 ? steps - 1 : 0));
    const Matrix<T> logits = session.prefill(prompt);
    std::vector<TokenId> out;
    if (steps == 0) return out;
    out.push_back(static_cast<TokenId>(argmax(logits.row(logits.rows - 1))));
    while (out.size() < steps) {
        const auto next = session.decode_step(out.back());
        out.push_back(static_cast<TokenId>(argmax(std::span<const T>(next))));
    }
    return out;
}

ProbeReport probe_model(const Transformer<float>& model, const ProbeSpec& spec) {
    const auto& ms = model.spec();
    ProbeSpec probe = spec;
    probe.vocab_size = ms.vocab_size;
    probe.validate();
    if (probe.length() > ms.max_context) {
        throw ContextOverflowError("probe of " + std::to_string(probe.length()) + " tokens exceeds max_context " +
                                   std::to_string(ms.max_context) + "; use fewer unique tokens (at most " +
                                   std::to_string(ms.max_context / probe.repeats) + " for " +
                                   std::to_string(probe.repeats) + " repeats)");
    }
    const auto tokens = build_probe(probe);
    Session<float> session(model, PolicyTable::all_retrieval(ms), SessionOptions{0, true});
    session.prefill(tokens);
    const auto maps = session.take_attention_maps();
    return score_heads(maps, ms.num_layers, ms.num_heads, tokens, probe.unique_tokens);
}

template class Transformer<float>;
template class Transformer<double>;
template class Session<float>;
template class Session<double>;
template std::vector<TokenId> greedy_generate<float>(Session<float>&, std::span<const TokenId>, std::size_t);
template std::vector<TokenId> greedy_generate<double>(Session<double>&, std::span<const TokenId>, std::size_t);

}  // namespace razor
