// SPDX-License-Identifier: Apache-2.0
#include "razor/fixtures.hpp"

#include <cmath>
#include <stdexcept>

#include "razor/rng.hpp"

namespace razor {

namespace {

Model zero_model(const ModelSpec& spec) {
    spec.validate();
    Model m;
    m.spec = spec;
    auto& w = m.weights;
    const float eps = static_cast<float>(spec.norm_eps);
    w.tok_embed = Matrix<float>(spec.vocab_size, spec.hidden_dim);
    for (std::size_t i = 0; i < spec.num_layers; ++i) {
        LayerWeights l;
        l.attn_norm = NormParams<float>::unit(spec.hidden_dim, spec.norm, eps);
        l.wq = Matrix<float>(spec.hidden_dim, spec.q_width());
        l.wk = Matrix<float>(spec.hidden_dim, spec.kv_width());
        l.wv = Matrix<float>(spec.hidden_dim, spec.kv_width());
        l.wo = Matrix<float>(spec.q_width(), spec.hidden_dim);
        l.ffn_norm = NormParams<float>::unit(spec.hidden_dim, spec.norm, eps);
        l.w_gate = Matrix<float>(spec.hidden_dim, spec.ffn_dim);
        l.w_up = Matrix<float>(spec.hidden_dim, spec.ffn_dim);
        l.w_down = Matrix<float>(spec.ffn_dim, spec.hidden_dim);
        w.layers.push_back(std::move(l));
    }
    w.final_norm = NormParams<float>::unit(spec.hidden_dim, spec.norm, eps);
    w.lm_head = Matrix<float>(spec.hidden_dim, spec.vocab_size);
    return m;
}

void fill_gaussian(Matrix<float>& m, Rng& rng, double sd) {
    for (float& v : m.data) v = static_cast<float>(rng.normal(0.0, sd));
}

void fill_norm(NormParams<float>& p, Rng& rng) {
    for (float& g : p.gamma) g = static_cast<float>(1.0 + 0.1 * rng.normal());
    if (p.kind == NormKind::LayerNorm) {
        for (float& b : p.bias) b = static_cast<float>(0.1 * rng.normal());
    }
}

}  // namespace

ModelSpec toy_rope_spec() {
    ModelSpec s;
    s.num_layers = 2;
    s.num_heads = 4;
    s.num_kv_heads = 4;
    s.head_dim = 8;
    s.hidden_dim = 32;
    s.ffn_dim = 64;
    s.vocab_size = 64;
    s.max_context = 2048;
    s.embedding = EmbeddingKind::RoPE;
    s.norm = NormKind::RMSNorm;
    s.norm_eps = 1e-5;
    s.rope_theta = 10000.0;
    return s;
}

ModelSpec toy_alibi_spec() {
    ModelSpec s;
    s.num_layers = 2;
    s.num_heads = 8;
    s.num_kv_heads = 8;
    s.head_dim = 4;
    s.hidden_dim = 32;
    s.ffn_dim = 64;
    s.vocab_size = 64;
    s.max_context = 1024;
    s.embedding = EmbeddingKind::ALiBi;
    s.norm = NormKind::LayerNorm;
    s.norm_eps = 1e-5;
    return s;
}

ModelSpec toy_gqa_spec() {
    ModelSpec s = toy_rope_spec();
    s.num_heads = 8;
    s.num_kv_heads = 2;
    s.head_dim = 4;
    return s;
}

Model make_random_model(const ModelSpec& spec, std::uint64_t seed) {
    Model m = zero_model(spec);
    Rng rng(seed);
    auto& w = m.weights;
    const double in_sd = 1.0 / std::sqrt(static_cast<double>(spec.hidden_dim));
    fill_gaussian(w.tok_embed, rng, 1.0);
    for (auto& l : w.layers) {
        fill_norm(l.attn_norm, rng);
        fill_gaussian(l.wq, rng, in_sd);
        fill_gaussian(l.wk, rng, in_sd);
        fill_gaussian(l.wv, rng, in_sd);
        fill_gaussian(l.wo, rng, 1.0 / std::sqrt(static_cast<double>(spec.q_width())));
        fill_norm(l.ffn_norm, rng);
        fill_gaussian(l.w_gate, rng, in_sd);
        fill_gaussian(l.w_up, rng, in_sd);
        fill_gaussian(l.w_down, rng, 1.0 / std::sqrt(static_cast<double>(spec.ffn_dim)));
    }
    fill_norm(w.final_norm, rng);
    fill_gaussian(w.lm_head, rng, in_sd);
    return m;
}

// ---------------------------------------------------------------------------
// Induction circuit

namespace {

constexpr std::size_t kHidden = 256;
constexpr std::size_t kHeadDim = 64;
constexpr std::size_t kVocab = 128;
constexpr std::size_t kCode = 44;         // token code width
constexpr std::size_t kTokBlock = 0;      // residual [0, 44): current token code
constexpr std::size_t kPrevBlock = 44;    // residual [44, 88): previous token code
constexpr std::size_t kOutBlock = 88;     // residual [88, 132): copied continuation
constexpr std::size_t kBiasChannel = 132; // residual 132: constant 1
constexpr std::size_t kFastPairs = 10;    // RoPE pairs 0..9 carry position
constexpr std::size_t kContent = 20;      // head dims [20, 64) carry content
constexpr double kMaxCorrelation = 0.45;

// Sharpness of each circuit, as scale · ‖q‖ · ‖k‖ at a perfect match.
constexpr double kPrevSharpness = 8.0;   // per fast pair
constexpr double kEchoSharpness = 30.0;
constexpr double kMatchSharpness = 30.0;
constexpr double kUnembedGain = 10.0;

std::vector<std::vector<double>> token_codes(Rng& rng) {
    std::vector<std::vector<double>> codes;
    while (codes.size() < kVocab) {
        std::vector<double> c(kCode);
        double len = 0.0;
        for (double& x : c) {
            x = rng.normal();
            len += x * x;
        }
        len = std::sqrt(len);
        for (double& x : c) x /= len;
        bool ok = true;
        for (const auto& other : codes) {
            double corr = 0.0;
            for (std::size_t j = 0; j < kCode; ++j) corr += c[j] * other[j];
            if (std::abs(corr) > kMaxCorrelation) {
                ok = false;
                break;
            }
        }
        if (ok) codes.push_back(std::move(c));
    }
    return codes;
}

}  // namespace

Model make_induction_fixture(std::uint64_t seed) {
    ModelSpec s;
    s.num_layers = 2;
    s.num_heads = 4;
    s.num_kv_heads = 4;
    s.head_dim = kHeadDim;
    s.hidden_dim = kHidden;
    s.ffn_dim = 8;
    s.vocab_size = kVocab;
    s.max_context = 2048;
    s.embedding = EmbeddingKind::RoPE;
    s.norm = NormKind::RMSNorm;
    s.norm_eps = 1e-6;
    s.rope_theta = 1e12;

    Model m = zero_model(s);
    auto& w = m.weights;
    Rng rng(seed);
    const auto codes = token_codes(rng);

    // RMSNorm gains seen by each sublayer: the residual holds 2, 3, then 4
    // unit-norm blocks.
    const double n = static_cast<double>(kHidden);
    const double s0 = 1.0 / std::sqrt(2.0 / n + s.norm_eps);
    const double s1 = 1.0 / std::sqrt(3.0 / n + s.norm_eps);
    const double s2 = 1.0 / std::sqrt(4.0 / n + s.norm_eps);
    const double scale = 1.0 / std::sqrt(static_cast<double>(kHeadDim));

    for (std::size_t t = 0; t < kVocab; ++t) {
        for (std::size_t j = 0; j < kCode; ++j) w.tok_embed(t, kTokBlock + j) = static_cast<float>(codes[t][j]);
        w.tok_embed(t, kBiasChannel) = 1.0f;
    }

    auto& l0 = w.layers[0];
    auto& l1 = w.layers[1];
    const auto col = [](std::size_t head, std::size_t dim) { return head * kHeadDim + dim; };

    // Layer 0 head 0: constant query/key from the bias channel whose pairwise
    // phases line up exactly at relative distance 1.
    {
        const double a = std::sqrt(kPrevSharpness / scale);
        for (std::size_t i = 0; i < kFastPairs; ++i) {
            const double omega = std::pow(s.rope_theta, -2.0 * static_cast<double>(i) / static_cast<double>(kHeadDim));
            l0.wq(kBiasChannel, col(0, 2 * i)) = static_cast<float>(a * std::cos(omega) / s0);
            l0.wq(kBiasChannel, col(0, 2 * i + 1)) = static_cast<float>(-a * std::sin(omega) / s0);
            l0.wk(kBiasChannel, col(0, 2 * i)) = static_cast<float>(a / s0);
        }
        for (std::size_t j = 0; j < kCode; ++j) {
            l0.wv(kTokBlock + j, col(0, j)) = static_cast<float>(1.0 / s0);
            l0.wo(col(0, j), kPrevBlock + j) = 1.0f;
        }
    }
    // Layer 0 head 1: query and key are the token code itself.
    {
        const double b = std::sqrt(kEchoSharpness / scale);
        for (std::size_t j = 0; j < kCode; ++j) {
            l0.wq(kTokBlock + j, col(1, kContent + j)) = static_cast<float>(b / s0);
            l0.wk(kTokBlock + j, col(1, kContent + j)) = static_cast<float>(b / s0);
        }
    }
    // Layer 1 head 0: current token against the previous-token block; the
    // value is the token at the matched position.
    {
        const double c = std::sqrt(kMatchSharpness / scale);
        for (std::size_t j = 0; j < kCode; ++j) {
            l1.wq(kTokBlock + j, col(0, kContent + j)) = static_cast<float>(c / s1);
            l1.wk(kPrevBlock + j, col(0, kContent + j)) = static_cast<float>(c / s1);
            l1.wv(kTokBlock + j, col(0, j)) = static_cast<float>(1.0 / s1);
            l1.wo(col(0, j), kOutBlock + j) = 1.0f;
        }
    }
    // Filler heads attend weakly at random and write nothing.
    for (auto* layer : {&l0, &l1}) {
        const std::size_t first = layer == &l0 ? 2 : 1;
        for (std::size_t h = first; h < 4; ++h) {
            for (std::size_t i = 0; i < kHidden; ++i) {
                for (std::size_t d = 0; d < kHeadDim; ++d) {
                    layer->wq(i, col(h, d)) = static_cast<float>(rng.normal(0.0, 0.02));
                    layer->wk(i, col(h, d)) = static_cast<float>(rng.normal(0.0, 0.02));
                    layer->wv(i, col(h, d)) = static_cast<float>(rng.normal(0.0, 0.02));
                }
            }
        }
    }

    for (std::size_t t = 0; t < kVocab; ++t) {
        for (std::size_t j = 0; j < kCode; ++j) {
            w.lm_head(kOutBlock + j, t) = static_cast<float>(kUnembedGain * codes[t][j] / s2);
        }
    }
    return m;
}

Model make_fixture(const std::string& kind, std::uint64_t seed) {
    if (kind == "induction") return make_induction_fixture(seed);
    if (kind == "toy-rope") return make_random_model(toy_rope_spec(), seed);
    if (kind == "toy-alibi") return make_random_model(toy_alibi_spec(), seed);
    if (kind == "toy-gqa") return make_random_model(toy_gqa_spec(), seed);
    throw std::invalid_argument("unknown fixture kind '" + kind + "' (expected induction, toy-rope, toy-alibi, toy-gqa)");
}

}  // namespace razor
