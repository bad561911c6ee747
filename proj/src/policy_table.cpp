// SPDX-License-Identifier: Apache-2.0
#include "razor/policy_table.hpp"

#include <algorithm>
#include <sstream>

namespace razor {

const char* policy_kind_name(PolicyKind kind) {
    switch (kind) {
        case PolicyKind::Retrieval: return "retrieval";
        case PolicyKind::Compressed: return "compressed";
        case PolicyKind::Window: return "window";
    }
    return "?";
}

std::string describe_policy(const HeadPolicy& p) {
    std::ostringstream os;
    os << policy_kind_name(p.kind);
    if (p.kind == PolicyKind::Compressed) {
        os << "(sinks=" << p.sink_count << ", C=" << p.compression_ratio << ", S0=";
        if (p.threshold == HeadPolicy::kNever) {
            os << "never";
        } else {
            os << p.threshold;
        }
        os << ")";
    } else if (p.kind == PolicyKind::Window) {
        os << "(sinks=" << p.sink_count << ", window=" << p.window << ")";
    }
    return os.str();
}

PolicyTable::PolicyTable(const ModelSpec& spec, std::vector<HeadPolicy> policies)
    : m_num_layers(spec.num_layers),
      m_num_heads(spec.num_heads),
      m_num_kv_heads(spec.num_kv_heads),
      m_policies(std::move(policies)) {
    spec.validate();
    if (m_policies.size() != m_num_layers * m_num_heads) {
        throw std::invalid_argument("PolicyTable: expected " + std::to_string(m_num_layers * m_num_heads) +
                                    " policies, got " + std::to_string(m_policies.size()));
    }
    for (const auto& p : m_policies) p.validate();

    const std::size_t group = spec.group_size();
    for (std::size_t l = 0; l < m_num_layers; ++l) {
        for (std::size_t h = 0; h < m_num_heads; ++h) {
            const auto& lead = at(l, h - h % group);
            if (!(at(l, h) == lead)) {
                throw std::invalid_argument("PolicyTable: layer " + std::to_string(l) + " head " + std::to_string(h) +
                                            " differs from the other heads sharing its KV head");
            }
        }
        if (spec.embedding == EmbeddingKind::ALiBi) {
            for (std::size_t h = 0; h < m_num_heads; ++h) {
                if (at(l, h).kind == PolicyKind::Compressed) {
                    throw std::invalid_argument(
                        "PolicyTable: compensation tokens are only defined for RoPE models; ALiBi heads take "
                        "Retrieval or Window policies");
                }
            }
        }
    }
}

PolicyTable PolicyTable::all_retrieval(const ModelSpec& spec) {
    return uniform(spec, HeadPolicy::retrieval());
}

PolicyTable PolicyTable::uniform(const ModelSpec& spec, const HeadPolicy& policy) {
    return PolicyTable(spec, std::vector<HeadPolicy>(spec.num_layers * spec.num_heads, policy));
}

PolicyTable PolicyTable::from_head_set(const ModelSpec& spec, const RetrievalHeadSet& set,
                                       const HeadPolicy& compressed) {
    if (set.num_layers != spec.num_layers || set.num_heads != spec.num_heads) {
        throw ShapeError("head set geometry " + std::to_string(set.num_layers) + "x" + std::to_string(set.num_heads) +
                         " does not match model " + std::to_string(spec.num_layers) + "x" +
                         std::to_string(spec.num_heads));
    }
    const RetrievalHeadSet promoted = gqa_promote(set, spec.group_size());
    std::vector<HeadPolicy> policies(spec.num_layers * spec.num_heads, compressed);
    for (const auto& e : promoted.heads) {
        if (e.id.layer >= spec.num_layers || e.id.head >= spec.num_heads) {
            throw ShapeError("head set names layer " + std::to_string(e.id.layer) + " head " +
                             std::to_string(e.id.head) + " outside the model");
        }
        policies[e.id.layer * spec.num_heads + e.id.head] = HeadPolicy::retrieval();
    }
    return PolicyTable(spec, std::move(policies));
}

std::size_t PolicyTable::count(PolicyKind kind) const {
    return static_cast<std::size_t>(
        std::count_if(m_policies.begin(), m_policies.end(), [&](const HeadPolicy& p) { return p.kind == kind; }));
}

}  // namespace razor
