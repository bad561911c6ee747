// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include "razor/head_id.hpp"
#include "razor/model_io.hpp"

namespace razor {

// Small random geometries used by tests, benchmarks and the CLI.
ModelSpec toy_rope_spec();   // 2 layers, 4 heads × 8, hidden 32, vocab 64
ModelSpec toy_alibi_spec();  // 2 layers, 8 heads × 4, hidden 32, vocab 64, LayerNorm
ModelSpec toy_gqa_spec();    // 2 layers, 8 query heads over 2 KV heads, RoPE

// Gaussian weights with standard deviation 1/sqrt(fan_in); norm gains near 1
// and (LayerNorm only) small random shifts.
Model make_random_model(const ModelSpec& spec, std::uint64_t seed);

// Hand-wired two-layer induction circuit (4 heads per layer, head_dim 64):
//   layer 0 head 0: attends to the previous position and writes that token's
//                   code into a dedicated residual block;
//   layer 0 head 1: attends to earlier copies of the current token (echo);
//   layer 1 head 0: matches the current token against the previous-token
//                   block and copies the token that followed (induction);
//   remaining heads: weak random attention with no output projection.
// The unembedding reads only the induction head's output block, so the model
// continues any sequence it has seen before.
Model make_induction_fixture(std::uint64_t seed = 7);

inline constexpr HeadId kFixturePrevTokenHead{0, 0};
inline constexpr HeadId kFixtureEchoHead{0, 1};
inline constexpr HeadId kFixtureInductionHead{1, 0};

// Named fixture kinds accepted by make_fixture: "induction", "toy-rope",
// "toy-alibi", "toy-gqa".
Model make_fixture(const std::string& kind, std::uint64_t seed);

}  // namespace razor
