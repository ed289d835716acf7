#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "m4oe/autodiff.hpp"
#include "m4oe/error.hpp"
#include "m4oe/rng.hpp"
#include "m4oe/tensor.hpp"

namespace m4oe {

enum class Init { trunc_normal, zeros, ones };

/// Declaration of one parameter: hierarchical name, extents, initializer.
struct ParamSpec {
    std::string name;
    Shape shape;
    Init init = Init::trunc_normal;
};

template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
};

/// Ordered registry of named parameters. Names are unique; iteration order is
/// insertion order, which fixes checkpoint layout and optimizer state order.
template <typename T>
class ParameterStore {
public:
    Parameter<T>& add(std::string name, Tensor<T> value) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
        index_.emplace(name, params_.size());
        params_.push_back(Parameter<T>{std::move(name), std::move(value), {}});
        return params_.back();
    }

    static ParameterStore from_specs(const std::vector<ParamSpec>& specs, Rng& rng, double init_std = 0.02) {
        ParameterStore store;
        for (const auto& s : specs) {
            Tensor<T> t(s.shape);
            switch (s.init) {
                case Init::trunc_normal:
                    for (auto& v : t.data()) v = static_cast<T>(rng.truncated_normal(init_std));
                    break;
                case Init::zeros: break;
                case Init::ones: t.fill(T{1}); break;
            }
            store.add(s.name, std::move(t));
        }
        return store;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    Parameter<T>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
        return params_[it->second];
    }
    const Parameter<T>& at(const std::string& name) const { return const_cast<ParameterStore*>(this)->at(name); }

    std::vector<Parameter<T>>& params() noexcept { return params_; }
    const std::vector<Parameter<T>>& params() const noexcept { return params_; }
    std::size_t size() const noexcept { return params_.size(); }

    std::size_t element_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.value.size();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) {
            if (p.grad.empty()) p.grad = Tensor<T>(p.value.shape());
            else p.grad.fill(T{});
        }
    }

    template <typename U>
    ParameterStore<U> cast() const {
        ParameterStore<U> out;
        for (const auto& p : params_) out.add(p.name, p.value.template cast<U>());
        return out;
    }

private:
    std::vector<Parameter<T>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Graph leaves for one forward pass, keyed by parameter name.
///
/// Each binding owns copies of the parameter values and its own gradient
/// buffers, so independent graphs may run on different threads.
template <typename T>
class Binding {
public:
    Binding() = default;

    Binding(const ParameterStore<T>& store, bool requires_grad) {
        vars_.reserve(store.size());
        for (const auto& p : store.params())
            vars_.emplace(p.name, requires_grad ? ad::Var<T>::leaf(p.value) : ad::Var<T>::constant(p.value));
    }

    const ad::Var<T>& operator()(const std::string& name) const {
        auto it = vars_.find(name);
        if (it == vars_.end()) throw ConfigError("parameter '" + name + "' is not bound");
        return it->second;
    }

    bool contains(const std::string& name) const { return vars_.count(name) != 0; }

    /// store.grad += factor * binding gradient, in store order.
    void accumulate_into(ParameterStore<T>& store, T factor = T{1}) const {
        for (auto& p : store.params()) {
            auto it = vars_.find(p.name);
            if (it == vars_.end()) continue;
            const auto& g = it->second.grad();
            if (g.empty()) continue;
            if (p.grad.empty()) p.grad = Tensor<T>(p.value.shape());
            for (std::size_t i = 0; i < g.size(); ++i) p.grad[i] += factor * g[i];
        }
    }

private:
    std::unordered_map<std::string, ad::Var<T>> vars_;
};

/// Name-prefix view used by forward code: scope.sub("attn")("qkv.w").
template <typename T>
class Scope {
public:
    Scope(const Binding<T>& binding, std::string prefix = {}) : binding_(&binding), prefix_(std::move(prefix)) {}

    const ad::Var<T>& operator()(const std::string& leaf) const { return (*binding_)(join(leaf)); }
    bool has(const std::string& leaf) const { return binding_->contains(join(leaf)); }
    Scope sub(const std::string& part) const { return Scope(*binding_, join(part)); }
    const std::string& prefix() const noexcept { return prefix_; }

private:
    std::string join(const std::string& leaf) const { return prefix_.empty() ? leaf : prefix_ + "." + leaf; }

    const Binding<T>* binding_;
    std::string prefix_;
};

}  // namespace m4oe
