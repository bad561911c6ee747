// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "razor/core_math.hpp"

namespace razor {

enum class EmbeddingKind : std::uint32_t { RoPE = 0, ALiBi = 1 };

const char* embedding_kind_name(EmbeddingKind kind);

struct ModelSpec {
    std::size_t num_layers = 0;
    std::size_t num_heads = 0;
    std::size_t num_kv_heads = 0;  // == num_heads for MHA
    std::size_t head_dim = 0;
    std::size_t hidden_dim = 0;    // == num_heads * head_dim
    std::size_t ffn_dim = 0;
    std::size_t vocab_size = 0;
    std::size_t max_context = 0;
    EmbeddingKind embedding = EmbeddingKind::RoPE;
    NormKind norm = NormKind::RMSNorm;
    double norm_eps = 1e-5;
    double rope_theta = 10000.0;
    // Empty means the standard geometric schedule.
    std::vector<double> alibi_slopes;

    std::size_t group_size() const { return num_heads / num_kv_heads; }
    std::size_t kv_head_of(std::size_t head) const { return head / group_size(); }
    std::size_t q_width() const { return num_heads * head_dim; }
    std::size_t kv_width() const { return num_kv_heads * head_dim; }
    std::vector<double> slopes() const;

    void validate() const;
    bool operator==(const ModelSpec&) const = default;
};

// Weights are row-major with the input dimension first: y = x · W.
struct LayerWeights {
    NormParams<float> attn_norm;
    Matrix<float> wq;      // hidden × (num_heads·head_dim)
    Matrix<float> wk;      // hidden × (num_kv_heads·head_dim)
    Matrix<float> wv;      // hidden × (num_kv_heads·head_dim)
    Matrix<float> wo;      // (num_heads·head_dim) × hidden
    NormParams<float> ffn_norm;
    Matrix<float> w_gate;  // hidden × ffn
    Matrix<float> w_up;    // hidden × ffn
    Matrix<float> w_down;  // ffn × hidden
};

struct ModelWeights {
    Matrix<float> tok_embed;  // vocab × hidden
    std::vector<LayerWeights> layers;
    NormParams<float> final_norm;
    Matrix<float> lm_head;    // hidden × vocab
};

struct Model {
    ModelSpec spec;
    ModelWeights weights;
};

// Named tensor view used by the container format and the checksum listing.
struct NamedTensor {
    std::string name;
    std::vector<std::uint64_t> dims;
    const std::vector<float>* data;
};

std::vector<NamedTensor> list_tensors(const Model& model);

// Container layout (little-endian), version 1:
//   "RZMD" u32 version
//   u32 num_layers, num_heads, num_kv_heads, head_dim, hidden_dim, ffn_dim,
//       vocab_size, max_context, embedding_kind, norm_kind
//   f64 norm_eps, f64 rope_theta
//   u32 slope_count, f64 × slope_count
//   u32 tensor_count, then per tensor:
//       u32 name_len, name bytes, u32 rank, u64 × rank dims, f32 × prod(dims)
std::vector<char> serialize_model(const Model& model);
Model deserialize_model(const std::vector<char>& bytes);

void save_model(const std::filesystem::path& path, const Model& model);
Model load_model(const std::filesystem::path& path);

// FNV-1a 64 over raw bytes.
std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t tensor_checksum(const std::vector<float>& data);
// Stable identifier of a model: hex FNV-1a of its serialized container.
std::string model_id(const Model& model);

void validate_weights(const Model& model);

}  // namespace razor
