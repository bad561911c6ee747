// SPDX-License-Identifier: Apache-2.0
#include "razor/model_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <stdexcept>

#include "razor/embeddings.hpp"
#include "razor/errors.hpp"

namespace razor {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace {

constexpr std::uint32_t kModelVersion = 1;
constexpr std::uint32_t kMaxRank = 4;

template <class U>
void put(std::vector<char>& out, U v) {
    const char* p = reinterpret_cast<const char*>(&v);
    out.insert(out.end(), p, p + sizeof(U));
}

class Reader {
public:
    explicit Reader(const std::vector<char>& bytes) : m_bytes(bytes) {}

    template <class U>
    U get(const char* what) {
        need(sizeof(U), what);
        U v;
        std::memcpy(&v, m_bytes.data() + m_pos, sizeof(U));
        m_pos += sizeof(U);
        return v;
    }

    std::string get_string(std::size_t n, const char* what) {
        need(n, what);
        std::string s(m_bytes.data() + m_pos, n);
        m_pos += n;
        return s;
    }

    void get_floats(std::vector<float>& out, std::size_t n, const char* what) {
        need(n * sizeof(float), what);
        out.resize(n);
        std::memcpy(out.data(), m_bytes.data() + m_pos, n * sizeof(float));
        m_pos += n * sizeof(float);
    }

    bool done() const { return m_pos == m_bytes.size(); }

private:
    void need(std::size_t n, const char* what) {
        if (m_bytes.size() - m_pos < n) {
            throw TruncationError(std::string("model file truncated while reading ") + what);
        }
    }

    const std::vector<char>& m_bytes;
    std::size_t m_pos = 0;
};

void require_shape(const std::string& name, const Matrix<float>& m, std::size_t rows, std::size_t cols) {
    if (m.rows != rows || m.cols != cols) {
        throw ShapeError("tensor " + name + " has shape [" + std::to_string(m.rows) + ", " + std::to_string(m.cols) +
                         "], expected [" + std::to_string(rows) + ", " + std::to_string(cols) + "]");
    }
}

void require_len(const std::string& name, const std::vector<float>& v, std::size_t n) {
    if (v.size() != n) {
        throw ShapeError("tensor " + name + " has length " + std::to_string(v.size()) + ", expected " +
                         std::to_string(n));
    }
}

std::string layer_name(std::size_t i, const char* leaf) { return "layers." + std::to_string(i) + "." + leaf; }

}  // namespace

const char* embedding_kind_name(EmbeddingKind kind) { return kind == EmbeddingKind::RoPE ? "rope" : "alibi"; }

std::vector<double> ModelSpec::slopes() const {
    return alibi_slopes.empty() ? razor::alibi_slopes(num_heads) : alibi_slopes;
}

void ModelSpec::validate() const {
    auto fail = [](const std::string& msg) { throw ShapeError("ModelSpec: " + msg); };
    if (num_layers == 0 || num_heads == 0 || num_kv_heads == 0 || head_dim == 0) fail("zero-sized geometry");
    if (num_heads % num_kv_heads != 0) fail("num_heads must be divisible by num_kv_heads");
    if (hidden_dim != num_heads * head_dim) fail("hidden_dim must equal num_heads * head_dim");
    if (vocab_size == 0 || max_context == 0 || ffn_dim == 0) fail("vocab, ffn and context sizes must be positive");
    if (!(norm_eps > 0.0)) fail("norm epsilon must be positive");
    if (embedding == EmbeddingKind::RoPE) {
        if (head_dim % 2 != 0) fail("RoPE needs an even head_dim");
        if (!(rope_theta > 1.0)) fail("rope_theta must exceed 1");
    }
    if (!alibi_slopes.empty()) {
        if (alibi_slopes.size() != num_heads) fail("one ALiBi slope per head required");
        AlibiConfig check(alibi_slopes);
    }
}

std::vector<NamedTensor> list_tensors(const Model& model) {
    std::vector<NamedTensor> out;
    auto mat = [&](std::string name, const Matrix<float>& m) {
        out.push_back({std::move(name), {m.rows, m.cols}, &m.data});
    };
    auto vec = [&](std::string name, const std::vector<float>& v) { out.push_back({std::move(name), {v.size()}, &v}); };

    const auto& w = model.weights;
    mat("tok_embed", w.tok_embed);
    for (std::size_t i = 0; i < w.layers.size(); ++i) {
        const auto& l = w.layers[i];
        vec(layer_name(i, "attn_norm.gamma"), l.attn_norm.gamma);
        vec(layer_name(i, "attn_norm.bias"), l.attn_norm.bias);
        mat(layer_name(i, "wq"), l.wq);
        mat(layer_name(i, "wk"), l.wk);
        mat(layer_name(i, "wv"), l.wv);
        mat(layer_name(i, "wo"), l.wo);
        vec(layer_name(i, "ffn_norm.gamma"), l.ffn_norm.gamma);
        vec(layer_name(i, "ffn_norm.bias"), l.ffn_norm.bias);
        mat(layer_name(i, "w_gate"), l.w_gate);
        mat(layer_name(i, "w_up"), l.w_up);
        mat(layer_name(i, "w_down"), l.w_down);
    }
    vec("final_norm.gamma", w.final_norm.gamma);
    vec("final_norm.bias", w.final_norm.bias);
    mat("lm_head", w.lm_head);
    return out;
}

void validate_weights(const Model& model) {
    const auto& s = model.spec;
    const auto& w = model.weights;
    s.validate();
    require_shape("tok_embed", w.tok_embed, s.vocab_size, s.hidden_dim);
    if (w.layers.size() != s.num_layers) throw ShapeError("layer count does not match ModelSpec");
    auto check_norm = [&](const std::string& name, const NormParams<float>& p) {
        require_len(name + ".gamma", p.gamma, s.hidden_dim);
        require_len(name + ".bias", p.bias, s.hidden_dim);
        if (p.kind != s.norm) throw ShapeError(name + ": norm kind differs from ModelSpec");
        try {
            p.validate();
        } catch (const std::invalid_argument& e) {
            throw ShapeError(name + ": " + e.what());
        }
    };
    for (std::size_t i = 0; i < s.num_layers; ++i) {
        const auto& l = w.layers[i];
        check_norm(layer_name(i, "attn_norm"), l.attn_norm);
        require_shape(layer_name(i, "wq"), l.wq, s.hidden_dim, s.q_width());
        require_shape(layer_name(i, "wk"), l.wk, s.hidden_dim, s.kv_width());
        require_shape(layer_name(i, "wv"), l.wv, s.hidden_dim, s.kv_width());
        require_shape(layer_name(i, "wo"), l.wo, s.q_width(), s.hidden_dim);
        check_norm(layer_name(i, "ffn_norm"), l.ffn_norm);
        require_shape(layer_name(i, "w_gate"), l.w_gate, s.hidden_dim, s.ffn_dim);
        require_shape(layer_name(i, "w_up"), l.w_up, s.hidden_dim, s.ffn_dim);
        require_shape(layer_name(i, "w_down"), l.w_down, s.ffn_dim, s.hidden_dim);
    }
    check_norm("final_norm", w.final_norm);
    require_shape("lm_head", w.lm_head, s.hidden_dim, s.vocab_size);
}

std::vector<char> serialize_model(const Model& model) {
    validate_weights(model);
    const auto& s = model.spec;
    std::vector<char> out;
    out.insert(out.end(), {'R', 'Z', 'M', 'D'});
    put<std::uint32_t>(out, kModelVersion);
    for (std::size_t v : {s.num_layers, s.num_heads, s.num_kv_heads, s.head_dim, s.hidden_dim, s.ffn_dim,
                          s.vocab_size, s.max_context}) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(v));
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.embedding));
    put<std::uint32_t>(out, s.norm == NormKind::LayerNorm ? 0u : 1u);
    put<double>(out, s.norm_eps);
    put<double>(out, s.rope_theta);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.alibi_slopes.size()));
    for (double l : s.alibi_slopes) put<double>(out, l);

    const auto tensors = list_tensors(model);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
        out.insert(out.end(), t.name.begin(), t.name.end());
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dims.size()));
        for (auto d : t.dims) put<std::uint64_t>(out, d);
        const char* p = reinterpret_cast<const char*>(t.data->data());
        out.insert(out.end(), p, p + t.data->size() * sizeof(float));
    }
    return out;
}

Model deserialize_model(const std::vector<char>& bytes) {
    Reader r(bytes);
    if (bytes.size() < 4) throw TruncationError("model file truncated while reading magic");
    if (std::memcmp(bytes.data(), "RZMD", 4) != 0) throw FormatError("not a model container (bad magic)");
    r.get_string(4, "magic");
    const auto version = r.get<std::uint32_t>("version");
    if (version != kModelVersion) throw FormatError("unsupported model container version " + std::to_string(version));

    Model m;
    auto& s = m.spec;
    std::size_t* fields[] = {&s.num_layers, &s.num_heads, &s.num_kv_heads, &s.head_dim,
                             &s.hidden_dim, &s.ffn_dim,   &s.vocab_size,   &s.max_context};
    for (auto* f : fields) *f = r.get<std::uint32_t>("model header");
    const auto emb = r.get<std::uint32_t>("embedding kind");
    if (emb > 1) throw FormatError("unknown embedding kind " + std::to_string(emb));
    s.embedding = static_cast<EmbeddingKind>(emb);
    const auto norm = r.get<std::uint32_t>("norm kind");
    if (norm > 1) throw FormatError("unknown norm kind " + std::to_string(norm));
    s.norm = norm == 0 ? NormKind::LayerNorm : NormKind::RMSNorm;
    s.norm_eps = r.get<double>("norm epsilon");
    s.rope_theta = r.get<double>("rope theta");
    const auto n_slopes = r.get<std::uint32_t>("slope count");
    if (n_slopes > 1u << 16) throw FormatError("implausible slope count");
    for (std::uint32_t i = 0; i < n_slopes; ++i) s.alibi_slopes.push_back(r.get<double>("slopes"));
    s.validate();

    std::map<std::string, std::pair<std::vector<std::uint64_t>, std::vector<float>>> tensors;
    const auto count = r.get<std::uint32_t>("tensor count");
    for (std::uint32_t t = 0; t < count; ++t) {
        const auto name_len = r.get<std::uint32_t>("tensor name length");
        if (name_len > 4096) throw FormatError("implausible tensor name length");
        std::string name = r.get_string(name_len, "tensor name");
        const auto rank = r.get<std::uint32_t>("tensor rank");
        if (rank == 0 || rank > kMaxRank) throw FormatError("tensor " + name + ": unsupported rank");
        std::vector<std::uint64_t> dims(rank);
        std::uint64_t numel = 1;
        for (auto& d : dims) {
            d = r.get<std::uint64_t>("tensor dims");
            if (d > (1ull << 32)) throw FormatError("tensor " + name + ": implausible dimension");
            numel *= d;
        }
        std::vector<float> data;
        r.get_floats(data, numel, "tensor data");
        if (!tensors.emplace(name, std::make_pair(std::move(dims), std::move(data))).second) {
            throw FormatError("duplicate tensor " + name);
        }
    }
    if (!r.done()) throw FormatError("trailing bytes after last tensor");

    auto take = [&](const std::string& name) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw ShapeError("missing tensor " + name);
        auto v = std::move(it->second);
        tensors.erase(it);
        return v;
    };
    auto take_mat = [&](const std::string& name) {
        auto [dims, data] = take(name);
        if (dims.size() != 2) throw ShapeError("tensor " + name + " must be rank 2");
        return Matrix<float>(dims[0], dims[1], std::move(data));
    };
    auto take_vec = [&](const std::string& name) {
        auto [dims, data] = take(name);
        if (dims.size() != 1) throw ShapeError("tensor " + name + " must be rank 1");
        return std::move(data);
    };
    auto take_norm = [&](const std::string& prefix) {
        NormParams<float> p;
        p.gamma = take_vec(prefix + ".gamma");
        p.bias = take_vec(prefix + ".bias");
        p.kind = s.norm;
        p.epsilon = static_cast<float>(s.norm_eps);
        return p;
    };

    auto& w = m.weights;
    w.tok_embed = take_mat("tok_embed");
    for (std::size_t i = 0; i < s.num_layers; ++i) {
        LayerWeights l;
        l.attn_norm = take_norm(layer_name(i, "attn_norm"));
        l.wq = take_mat(layer_name(i, "wq"));
        l.wk = take_mat(layer_name(i, "wk"));
        l.wv = take_mat(layer_name(i, "wv"));
        l.wo = take_mat(layer_name(i, "wo"));
        l.ffn_norm = take_norm(layer_name(i, "ffn_norm"));
        l.w_gate = take_mat(layer_name(i, "w_gate"));
        l.w_up = take_mat(layer_name(i, "w_up"));
        l.w_down = take_mat(layer_name(i, "w_down"));
        w.layers.push_back(std::move(l));
    }
    w.final_norm = take_norm("final_norm");
    w.lm_head = take_mat("lm_head");
    if (!tensors.empty()) throw ShapeError("unexpected tensor " + tensors.begin()->first);
    validate_weights(m);
    return m;
}

void save_model(const std::filesystem::path& path, const Model& model) {
    const auto bytes = serialize_model(model);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path.string() + " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw Error("failed writing " + path.string());
}

Model load_model(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open model file " + path.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return deserialize_model(bytes);
}

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t tensor_checksum(const std::vector<float>& data) {
    return fnv1a64(data.data(), data.size() * sizeof(float));
}

std::string model_id(const Model& model) {
    const auto bytes = serialize_model(model);
    char buf[32];
    std::snprintf(buf, sizeof buf, "fnv1a64:%016llx",
                  static_cast<unsigned long long>(fnv1a64(bytes.data(), bytes.size())));
    return buf;
}

}  // namespace razor
