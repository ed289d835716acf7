#pragma once

// Dense mixture-of-experts feed-forward layer.
//
//   weights = softmax(W_g x + b_g)                 per token (or per sample)
//   expert_i(x) = W_o,i GELU(W_h,i x + b_h,i) + b_o,i
//   out = sum_i weights_i * expert_i(x)
//
// Every expert runs on every token; there is no top-k, no capacity limit and
// no auxiliary loss.

#include <memory>
#include <string>
#include <vector>

#include "m4oe/autodiff.hpp"
#include "m4oe/config.hpp"
#include "m4oe/params.hpp"

namespace m4oe {

struct MoEConfig {
    std::size_t num_experts = 1;
    std::size_t in_dim = 0;
    std::size_t hidden_dim = 0;
    bool gating = true;
    GateGranularity granularity = GateGranularity::token;
    ad::GeluKind gelu = ad::GeluKind::tanh_approx;

    void validate() const {
        if (num_experts < 1) throw ConfigError("moe: num_experts must be >= 1");
        if (in_dim < 1 || hidden_dim < 1) throw ConfigError("moe: in_dim and hidden_dim must be >= 1");
    }

    std::size_t expert_param_count() const { return in_dim * hidden_dim + hidden_dim + hidden_dim * in_dim + in_dim; }
    std::size_t gate_row_count() const { return in_dim + 1; }
};

/// How the mixture weights are obtained for one forward pass.
struct GateOverride {
    enum class Mode { learned, uniform, pinned };
    Mode mode = Mode::learned;
    std::size_t expert = 0;

    static GateOverride uniform() { return {Mode::uniform, 0}; }
    static GateOverride pinned(std::size_t i) { return {Mode::pinned, i}; }
};

inline void append_expert_specs(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t in_dim,
                                std::size_t hidden_dim) {
    out.push_back({prefix + ".w_h", {hidden_dim, in_dim}, Init::trunc_normal});
    out.push_back({prefix + ".b_h", {hidden_dim}, Init::zeros});
    out.push_back({prefix + ".w_o", {in_dim, hidden_dim}, Init::trunc_normal});
    out.push_back({prefix + ".b_o", {in_dim}, Init::zeros});
}

/// Parameters of one MoE site under `prefix` (e.g. "enc.stage0.block1.moe").
/// The gate starts at zero, i.e. uniform routing.
inline std::vector<ParamSpec> moe_param_specs(const std::string& prefix, const MoEConfig& cfg) {
    cfg.validate();
    std::vector<ParamSpec> out;
    if (cfg.gating) {
        out.push_back({prefix + ".gate.w", {cfg.num_experts, cfg.in_dim}, Init::zeros});
        out.push_back({prefix + ".gate.b", {cfg.num_experts}, Init::zeros});
    }
    for (std::size_t i = 0; i < cfg.num_experts; ++i)
        append_expert_specs(out, prefix + ".expert" + std::to_string(i), cfg.in_dim, cfg.hidden_dim);
    return out;
}

/// Two-layer GELU MLP on the last axis, no residual.
template <typename T>
ad::Var<T> expert_forward(const ad::Var<T>& x, const Scope<T>& expert, ad::GeluKind gelu = ad::GeluKind::tanh_approx) {
    auto h = ad::linear(x, expert("w_h"), expert("b_h"));
    h = ad::gelu(h, gelu);
    return ad::linear(h, expert("w_o"), expert("b_o"));
}

/// Mixture weights, shape x.shape()[:-1] + [num_experts]. With sample
/// granularity x must be [B x L x C]; the gate sees the token mean of each
/// sample and its weights are broadcast to all of that sample's tokens.
template <typename T>
ad::Var<T> gate(const ad::Var<T>& x, const Scope<T>& g, GateGranularity granularity = GateGranularity::token) {
    const auto& w = g("w");
    if (x.shape().empty() || x.shape().back() != w.shape()[1])
        throw DimensionError("gate: input " + to_string(x.shape()) + " vs gate weight " + to_string(w.shape()));
    const std::size_t n = w.shape()[0];
    if (granularity == GateGranularity::token) return ad::softmax(ad::linear(x, w, g("b")));

    if (x.shape().size() != 3) throw DimensionError("gate: sample granularity needs [B x L x C], got " + to_string(x.shape()));
    const std::size_t B = x.shape()[0], L = x.shape()[1];
    auto per_sample = ad::softmax(ad::linear(ad::mean_axis1(x), w, g("b")));  // [B x n]
    auto index = std::make_shared<std::vector<std::size_t>>(B * L * n);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t i = 0; i < n; ++i) (*index)[(b * L + l) * n + i] = b * n + i;
    return ad::gather(per_sample, ad::IndexMap(index), Shape{B, L, n});
}

/// Column i of a [..., n] weight tensor, shaped as the leading axes.
template <typename T>
ad::Var<T> expert_column(const ad::Var<T>& weights, std::size_t i) {
    const std::size_t n = weights.shape().back();
    const std::size_t R = weights.size() / n;
    auto index = std::make_shared<std::vector<std::size_t>>(R);
    for (std::size_t r = 0; r < R; ++r) (*index)[r] = r * n + i;
    Shape s = weights.shape();
    s.pop_back();
    if (s.empty()) s.push_back(1);
    return ad::gather(weights, ad::IndexMap(index), s);
}

/// Forward of one MoE site. If `weights_out` is given it receives the mixture
/// weights actually used.
template <typename T>
ad::Var<T> moe_forward(const ad::Var<T>& x, const MoEConfig& cfg, const Scope<T>& moe, GateOverride ov = {},
                       ad::Var<T>* weights_out = nullptr) {
    cfg.validate();
    if (x.shape().empty() || x.shape().back() != cfg.in_dim)
        throw DimensionError("moe: input " + to_string(x.shape()) + " vs in_dim " + std::to_string(cfg.in_dim));
    for (std::size_t i = 0; i < cfg.num_experts; ++i)
        if (!moe.has("expert" + std::to_string(i) + ".w_h"))
            throw ConfigError("moe: expected " + std::to_string(cfg.num_experts) + " experts under '" + moe.prefix() +
                              "', missing expert" + std::to_string(i));
    if (moe.has("expert" + std::to_string(cfg.num_experts) + ".w_h"))
        throw ConfigError("moe: more experts under '" + moe.prefix() + "' than num_experts=" +
                          std::to_string(cfg.num_experts));

    const std::size_t n = cfg.num_experts;
    Shape wshape = x.shape();
    wshape.back() = n;
    ad::Var<T> weights;
    if (ov.mode == GateOverride::Mode::learned && cfg.gating) {
        weights = gate(x, moe.sub("gate"), cfg.granularity);
    } else if (ov.mode == GateOverride::Mode::pinned) {
        if (ov.expert >= n) throw ConfigError("moe: pinned expert out of range");
        Tensor<T> w(wshape);
        for (std::size_t r = 0; r < w.size() / n; ++r) w[r * n + ov.expert] = T{1};
        weights = ad::constant(std::move(w));
    } else {
        weights = ad::constant(Tensor<T>(wshape, static_cast<T>(1.0 / static_cast<double>(n))));
    }
    if (weights_out) *weights_out = weights;

    ad::Var<T> out;
    for (std::size_t i = 0; i < n; ++i) {
        auto e = expert_forward(x, moe.sub("expert" + std::to_string(i)), cfg.gelu);
        auto term = ad::scale_rows(e, expert_column(weights, i));
        out = out ? ad::add(out, term) : term;
    }
    return out;
}

}  // namespace m4oe
