// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "razor/head_id.hpp"
#include "razor/kv_cache.hpp"
#include "razor/model_io.hpp"

namespace razor {

// One HeadPolicy per (layer, query head). Query heads sharing a KV head must
// share a policy; construction rejects tables that break this.
class PolicyTable {
public:
    PolicyTable(const ModelSpec& spec, std::vector<HeadPolicy> policies);

    static PolicyTable all_retrieval(const ModelSpec& spec);
    static PolicyTable uniform(const ModelSpec& spec, const HeadPolicy& policy);

    // Heads in `set` keep full caches; every other head uses `compressed`.
    // The set is promoted to whole GQA groups first.
    static PolicyTable from_head_set(const ModelSpec& spec, const RetrievalHeadSet& set,
                                     const HeadPolicy& compressed);

    std::size_t num_layers() const { return m_num_layers; }
    std::size_t num_heads() const { return m_num_heads; }
    std::size_t num_kv_heads() const { return m_num_kv_heads; }

    const HeadPolicy& at(std::size_t layer, std::size_t head) const { return m_policies[layer * m_num_heads + head]; }
    // Policy of the KV head (shared by its query group).
    const HeadPolicy& kv_policy(std::size_t layer, std::size_t kv_head) const {
        return at(layer, kv_head * (m_num_heads / m_num_kv_heads));
    }

    std::size_t count(PolicyKind kind) const;
    const std::vector<HeadPolicy>& policies() const { return m_policies; }

private:
    std::size_t m_num_layers;
    std::size_t m_num_heads;
    std::size_t m_num_kv_heads;
    std::vector<HeadPolicy> m_policies;
};

std::string describe_policy(const HeadPolicy& p);

}  // namespace razor
