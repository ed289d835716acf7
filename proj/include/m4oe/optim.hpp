#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "m4oe/error.hpp"
#include "m4oe/params.hpp"

namespace m4oe {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

/// AdamW with decoupled weight decay: the decay shrinks the weights directly
/// and never enters the moment estimates.
template <typename T>
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {
        if (!(cfg_.lr >= 0.0) || !(cfg_.weight_decay >= 0.0))
            throw ConfigError("AdamW: lr and weight_decay must be non-negative");
    }

    const AdamWConfig& config() const noexcept { return cfg_; }
    std::uint64_t step_count() const noexcept { return step_; }
    const std::vector<Tensor<T>>& first_moments() const noexcept { return m_; }
    const std::vector<Tensor<T>>& second_moments() const noexcept { return v_; }

    /// Updates every parameter from its gradient. Gradients are left in place.
    void step(ParameterStore<T>& store) {
        auto& ps = store.params();
        for (const auto& p : ps)
            if (p.grad.empty() || p.grad.shape() != p.value.shape())
                throw ConfigError("AdamW: parameter '" + p.name + "' has no gradient");
        if (m_.empty()) {
            for (const auto& p : ps) {
                m_.emplace_back(p.value.shape());
                v_.emplace_back(p.value.shape());
            }
        }
        if (m_.size() != ps.size()) throw ConfigError("AdamW: parameter set changed between steps");

        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (std::size_t k = 0; k < ps.size(); ++k) {
            auto& w = ps[k].value;
            const auto& g = ps[k].grad;
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < w.size(); ++i) {
                double wi = w[i];
                const double gi = g[i];
                wi -= cfg_.lr * cfg_.weight_decay * wi;
                const double mi = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
                const double vi = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
                m[i] = static_cast<T>(mi);
                v[i] = static_cast<T>(vi);
                wi -= cfg_.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps);
                w[i] = static_cast<T>(wi);
            }
        }
    }

private:
    AdamWConfig cfg_;
    std::uint64_t step_ = 0;
    std::vector<Tensor<T>> m_, v_;
};

}  // namespace m4oe
