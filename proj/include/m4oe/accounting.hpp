#pragma once

// Parameter counting by registry scan and the closed-form cost of growing
// the expert count.

#include <cstdint>
#include <string>
#include <string_view>

#include "m4oe/model.hpp"

namespace m4oe {

struct ParamBreakdown {
    std::size_t attention = 0;
    std::size_t mlp = 0;  // plain block MLPs
    std::size_t experts = 0;
    std::size_t gating = 0;
    std::size_t heads = 0;
    std::size_t other = 0;

    std::size_t total() const { return attention + mlp + experts + gating + heads + other; }
    friend bool operator==(const ParamBreakdown&, const ParamBreakdown&) = default;
};

inline bool name_has(std::string_view name, std::string_view part) { return name.find(part) != std::string_view::npos; }

inline ParamBreakdown count_params(const std::vector<ParamSpec>& specs) {
    ParamBreakdown b;
    for (const auto& s : specs) {
        const std::size_t n = numel(s.shape);
        if (name_has(s.name, ".attn.")) b.attention += n;
        else if (name_has(s.name, ".moe.gate.")) b.gating += n;
        else if (name_has(s.name, ".moe.expert")) b.experts += n;
        else if (name_has(s.name, ".mlp.")) b.mlp += n;
        else if (s.name.rfind("head.", 0) == 0) b.heads += n;
        else b.other += n;
    }
    return b;
}

inline ParamBreakdown count_params(const ModelConfig& cfg) { return count_params(model_param_specs(cfg)); }

template <typename T>
ParamBreakdown count_params(const ParameterStore<T>& store) {
    std::vector<ParamSpec> specs;
    for (const auto& p : store.params()) specs.push_back({p.name, p.value.shape(), Init::zeros});
    return count_params(specs);
}

/// Parameter delta when only the expert count changes: per MoE site, the
/// expert weights plus one gate row (in_dim + 1) per added expert.
inline std::int64_t count_added_params(const ModelConfig& before, const ModelConfig& after) {
    before.validate();
    after.validate();
    auto probe = after;
    probe.num_experts = before.num_experts;
    if (!(probe == before)) throw ConfigError("count_added_params: configs differ in more than num_experts");

    const auto dn = static_cast<std::int64_t>(after.num_experts) - static_cast<std::int64_t>(before.num_experts);
    std::int64_t per_expert = 0;
    const auto& bb = before.backbone;
    for (bool decoder : {false, true}) {
        for (std::size_t s = 0; s < bb.stages(); ++s) {
            const auto site = ffn_site(before, s, decoder);
            if (!site.moe) continue;
            // The bottleneck stage has no decoder twin.
            if (decoder && s + 1 == bb.stages()) continue;
            const std::int64_t one = static_cast<std::int64_t>(site.cfg.expert_param_count()) +
                                     (site.cfg.gating ? static_cast<std::int64_t>(site.cfg.gate_row_count()) : 0);
            per_expert += one * static_cast<std::int64_t>(bb.depths[s]);
        }
    }
    return dn * per_expert;
}

}  // namespace m4oe
