#pragma once

// Tape-style reverse-mode differentiation.
//
// Every op allocates a node holding its forward value and, when any input
// requires a gradient, a closure that pushes the node's gradient into its
// parents. Nodes carry a global creation sequence number; since parents are
// always created before children, descending sequence order is a valid
// reverse topological order for backward().

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <string>
#include <unordered_set>
#include <vector>

#include "m4oe/error.hpp"
#include "m4oe/tensor.hpp"

namespace m4oe::ad {

template <typename T>
struct Node;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

inline std::uint64_t next_sequence() {
    static std::atomic<std::uint64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::uint64_t seq = next_sequence();
    std::vector<NodePtr<T>> parents;
    std::function<void(Node&)> backward;

    Tensor<T>& grad_buffer() {
        if (grad.empty()) grad = Tensor<T>(value.shape());
        return grad;
    }
};

/// Handle to a graph node. Copies share the node.
template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(NodePtr<T> node) : node_(std::move(node)) {}

    static Var constant(Tensor<T> value) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(value);
        return Var(std::move(n));
    }

    static Var leaf(Tensor<T> value) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(value);
        n->requires_grad = true;
        return Var(std::move(n));
    }

    const Tensor<T>& value() const { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad; }
    Tensor<T>& mutable_grad() { return node_->grad; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t size() const { return node_->value.size(); }
    bool requires_grad() const { return node_->requires_grad; }
    const NodePtr<T>& ptr() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

private:
    NodePtr<T> node_;
};

enum class GeluKind { tanh_approx, exact_erf };

namespace detail {

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
    if (!t.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
}

template <typename T, typename F>
Var<T> make_op(Tensor<T> value, std::vector<NodePtr<T>> parents, F&& bw, [[maybe_unused]] const char* op) {
#ifndef NDEBUG
    check_finite(value, op);
#endif
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    const bool needs = std::any_of(parents.begin(), parents.end(), [](const NodePtr<T>& p) { return p->requires_grad; });
    if (needs) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward = std::forward<F>(bw);
    }
    return Var<T>(std::move(n));
}

inline std::string shapes_str(const Shape& a, const Shape& b) { return to_string(a) + " and " + to_string(b); }

template <typename T>
void require_same_shape(const char* op, const Var<T>& a, const Var<T>& b) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shapes_str(a.shape(), b.shape()));
}

// C[MxN] += A[MxK] * B[KxN]
template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
    for (std::size_t m = 0; m < M; ++m) {
        T* c = C + m * N;
        for (std::size_t k = 0; k < K; ++k) {
            const T a = A[m * K + k];
            if (a == T{}) continue;
            const T* b = B + k * N;
            for (std::size_t n = 0; n < N; ++n) c[n] += a * b[n];
        }
    }
}

// C[MxN] += A[MxK] * B[NxK]^T
template <typename T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
    for (std::size_t m = 0; m < M; ++m) {
        const T* a = A + m * K;
        for (std::size_t n = 0; n < N; ++n) {
            const T* b = B + n * K;
            T s{};
            for (std::size_t k = 0; k < K; ++k) s += a[k] * b[k];
            C[m * N + n] += s;
        }
    }
}

// C[MxN] += A[KxM]^T * B[KxN]
template <typename T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
    for (std::size_t k = 0; k < K; ++k) {
        const T* b = B + k * N;
        for (std::size_t m = 0; m < M; ++m) {
            const T a = A[k * M + m];
            if (a == T{}) continue;
            T* c = C + m * N;
            for (std::size_t n = 0; n < N; ++n) c[n] += a * b[n];
        }
    }
}

}  // namespace detail

template <typename T>
Var<T> constant(Tensor<T> value) {
    return Var<T>::constant(std::move(value));
}

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape("add", a, b);
    Tensor<T> out(a.shape());
    const auto& x = a.value();
    const auto& y = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return detail::make_op<T>(std::move(out), {a.ptr(), b.ptr()}, [](Node<T>& s) {
        for (auto& p : s.parents) {
            if (!p->requires_grad) continue;
            auto& g = p->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += s.grad[i];
        }
    }, "add");
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape("sub", a, b);
    Tensor<T> out(a.shape());
    const auto& x = a.value();
    const auto& y = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
    return detail::make_op<T>(std::move(out), {a.ptr(), b.ptr()}, [](Node<T>& s) {
        if (s.parents[0]->requires_grad) {
            auto& g = s.parents[0]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += s.grad[i];
        }
        if (s.parents[1]->requires_grad) {
            auto& g = s.parents[1]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= s.grad[i];
        }
    }, "sub");
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape("mul", a, b);
    Tensor<T> out(a.shape());
    const auto& x = a.value();
    const auto& y = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return detail::make_op<T>(std::move(out), {a.ptr(), b.ptr()}, [](Node<T>& s) {
        auto& pa = *s.parents[0];
        auto& pb = *s.parents[1];
        if (pa.requires_grad) {
            auto& g = pa.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += s.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
            auto& g = pb.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += s.grad[i] * pa.value[i];
        }
    }, "mul");
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape("div", a, b);
    Tensor<T> out(a.shape());
    const auto& x = a.value();
    const auto& y = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / y[i];
    return detail::make_op<T>(std::move(out), {a.ptr(), b.ptr()}, [](Node<T>& s) {
        auto& pa = *s.parents[0];
        auto& pb = *s.parents[1];
        if (pa.requires_grad) {
            auto& g = pa.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += s.grad[i] / pb.value[i];
        }
        if (pb.requires_grad) {
            auto& g = pb.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] -= s.grad[i] * pa.value[i] / (pb.value[i] * pb.value[i]);
        }
    }, "div");
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * factor;
    return detail::make_op<T>(std::move(out), {a.ptr()}, [factor](Node<T>& s) {
        auto& g = s.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s.grad[i] * factor;
    }, "scale");
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T c) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + c;
    return detail::make_op<T>(std::move(out), {a.ptr()}, [](Node<T>& s) {
        auto& g = s.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s.grad[i];
    }, "add_scalar");
}

/// y[..., c] = x[..., c] * s[...]: one scale factor per last-axis row.
template <typename T>
Var<T> scale_rows(const Var<T>& x, const Var<T>& s) {
    const std::size_t C = x.shape().back();
    const std::size_t R = x.size() / C;
    if (s.size() != R)
        throw DimensionError("scale_rows: " + std::to_string(s.size()) + " factors for " + std::to_string(R) +
                             " rows of " + to_string(x.shape()));
    Tensor<T> out(x.shape());
    for (std::size_t r = 0; r < R; ++r) {
        const T f = s.value()[r];
        for (std::size_t c = 0; c < C; ++c) out[r * C + c] = x.value()[r * C + c] * f;
    }
    return detail::make_op<T>(std::move(out), {x.ptr(), s.ptr()}, [R, C](Node<T>& n) {
        auto& px = *n.parents[0];
        auto& ps = *n.parents[1];
        if (px.requires_grad) {
            auto& g = px.grad_buffer();
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < C; ++c) g[r * C + c] += n.grad[r * C + c] * ps.value[r];
        }
        if (ps.requires_grad) {
            auto& g = ps.grad_buffer();
            for (std::size_t r = 0; r < R; ++r) {
                T acc{};
                for (std::size_t c = 0; c < C; ++c) acc += n.grad[r * C + c] * px.value[r * C + c];
                g[r] += acc;
            }
        }
    }, "scale_rows");
}

template <typename T>
Var<T> gelu(const Var<T>& x, GeluKind kind = GeluKind::tanh_approx) {
    constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double c = 0.044715;
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x.value()[i];
        if (kind == GeluKind::tanh_approx)
            out[i] = static_cast<T>(0.5 * v * (1.0 + std::tanh(k * (v + c * v * v * v))));
        else
            out[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)));
    }
    return detail::make_op<T>(std::move(out), {x.ptr()}, [kind](Node<T>& s) {
        auto& p = *s.parents[0];
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = p.value[i];
            double d;
            if (kind == GeluKind::tanh_approx) {
                const double t = std::tanh(k * (v + c * v * v * v));
                d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * k * (1.0 + 3.0 * c * v * v);
            } else {
                const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
                const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
                d = cdf + v * pdf;
            }
            g[i] += static_cast<T>(s.grad[i] * d);
        }
    }, "gelu");
}

// ---------------------------------------------------------------- reductions

template <typename T>
Var<T> sum(const Var<T>& a) {
    double acc = 0.0;
    for (auto v : a.value().data()) acc += static_cast<double>(v);
    return detail::make_op<T>(Tensor<T>::scalar(static_cast<T>(acc)), {a.ptr()}, [](Node<T>& s) {
        auto& g = s.parents[0]->grad_buffer();
        const T d = s.grad[0];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += d;
    }, "sum");
}

template <typename T>
Var<T> mean(const Var<T>& a) {
    return scale(sum(a), static_cast<T>(1.0 / static_cast<double>(a.size())));
}

/// Sum over every axis except the last: [..., C] -> [C].
template <typename T>
Var<T> column_sum(const Var<T>& x) {
    const std::size_t C = x.shape().back();
    const std::size_t R = x.size() / C;
    std::vector<double> acc(C, 0.0);
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) acc[c] += static_cast<double>(x.value()[r * C + c]);
    Tensor<T> out(Shape{C});
    for (std::size_t c = 0; c < C; ++c) out[c] = static_cast<T>(acc[c]);
    return detail::make_op<T>(std::move(out), {x.ptr()}, [R, C](Node<T>& s) {
        auto& g = s.parents[0]->grad_buffer();
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c) g[r * C + c] += s.grad[c];
    }, "column_sum");
}

/// Mean over the middle axis of a [G x L x C] tensor -> [G x C].
template <typename T>
Var<T> mean_axis1(const Var<T>& x) {
    if (x.shape().size() != 3) throw DimensionError("mean_axis1 expects rank 3, got " + to_string(x.shape()));
    const std::size_t G = x.shape()[0], L = x.shape()[1], C = x.shape()[2];
    Tensor<T> out(Shape{G, C});
    for (std::size_t g = 0; g < G; ++g)
        for (std::size_t c = 0; c < C; ++c) {
            double acc = 0.0;
            for (std::size_t l = 0; l < L; ++l) acc += static_cast<double>(x.value()[(g * L + l) * C + c]);
            out[g * C + c] = static_cast<T>(acc / static_cast<double>(L));
        }
    return detail::make_op<T>(std::move(out), {x.ptr()}, [G, L, C](Node<T>& s) {
        auto& gr = s.parents[0]->grad_buffer();
        const T inv = static_cast<T>(1.0 / static_cast<double>(L));
        for (std::size_t g = 0; g < G; ++g)
            for (std::size_t l = 0; l < L; ++l)
                for (std::size_t c = 0; c < C; ++c) gr[(g * L + l) * C + c] += s.grad[g * C + c] * inv;
    }, "mean_axis1");
}

// ---------------------------------------------------------------- products

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        throw DimensionError("matmul: incompatible shapes " + detail::shapes_str(a.shape(), b.shape()));
    const std::size_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
    Tensor<T> out(Shape{M, N});
    detail::gemm_nn(M, N, K, a.value().data().data(), b.value().data().data(), out.data().data());
    return detail::make_op<T>(std::move(out), {a.ptr(), b.ptr()}, [M, N, K](Node<T>& s) {
        auto& pa = *s.parents[0];
        auto& pb = *s.parents[1];
        if (pa.requires_grad)
            detail::gemm_nt(M, K, N, s.grad.data().data(), pb.value.data().data(), pa.grad_buffer().data().data());
        if (pb.requires_grad)
            detail::gemm_tn(K, N, M, pa.value.data().data(), s.grad.data().data(), pb.grad_buffer().data().data());
    }, "matmul");
}

/// Affine map over the last axis: y = x * W^T + b with W stored [out x in].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>* b = nullptr) {
    if (w.shape().size() != 2 || x.shape().empty() || x.shape().back() != w.shape()[1])
        throw DimensionError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                             to_string(w.shape()));
    const std::size_t in = w.shape()[1], outd = w.shape()[0];
    if (b && (b->shape().size() != 1 || b->shape()[0] != outd))
        throw DimensionError("linear: bias " + to_string(b->shape()) + " incompatible with weight " +
                             to_string(w.shape()));
    const std::size_t R = x.size() / in;
    Shape oshape = x.shape();
    oshape.back() = outd;
    Tensor<T> out(oshape);
    if (b)
        for (std::size_t r = 0; r < R; ++r)
            std::copy(b->value().data().begin(), b->value().data().end(), out.data().begin() + r * outd);
    detail::gemm_nt(R, outd, in, x.value().data().data(), w.value().data().data(), out.data().data());
    std::vector<NodePtr<T>> parents{x.ptr(), w.ptr()};
    if (b) parents.push_back(b->ptr());
    return detail::make_op<T>(std::move(out), std::move(parents), [R, in, outd](Node<T>& s) {
        auto& px = *s.parents[0];
        auto& pw = *s.parents[1];
        if (px.requires_grad)
            detail::gemm_nn(R, in, outd, s.grad.data().data(), pw.value.data().data(), px.grad_buffer().data().data());
        if (pw.requires_grad)
            detail::gemm_tn(outd, in, R, s.grad.data().data(), px.value.data().data(), pw.grad_buffer().data().data());
        if (s.parents.size() > 2 && s.parents[2]->requires_grad) {
            auto& gb = s.parents[2]->grad_buffer();
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t o = 0; o < outd; ++o) gb[o] += s.grad[r * outd + o];
        }
    }, "linear");
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    return linear(x, w, &b);
}

/// Batched product over leading axis: a[G x M x K] * b[G x K x N], or with
/// transpose_b, a[G x M x K] * b[G x N x K]^T.
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool transpose_b = false) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != (transpose_b ? sb[2] : sb[1]))
        throw DimensionError("bmm: incompatible shapes " + detail::shapes_str(sa, sb));
    const std::size_t G = sa[0], M = sa[1], K = sa[2], N = transpose_b ? sb[1] : sb[2];
    Tensor<T> out(Shape{G, M, N});
    const T* A = a.value().data().data();
    const T* B = b.value().data().data();
    T* C = out.data().data();
    for (std::size_t g = 0; g < G; ++g) {
        if (transpose_b)
            detail::gemm_nt(M, N, K, A + g * M * K, B + g * N * K, C + g * M * N);
        else
            detail::gemm_nn(M, N, K, A + g * M * K, B + g * K * N, C + g * M * N);
    }
    return detail::make_op<T>(std::move(out), {a.ptr(), b.ptr()}, [G, M, N, K, transpose_b](Node<T>& s) {
        auto& pa = *s.parents[0];
        auto& pb = *s.parents[1];
        const T* dC = s.grad.data().data();
        for (std::size_t g = 0; g < G; ++g) {
            const T* dCg = dC + g * M * N;
            if (transpose_b) {
                if (pa.requires_grad)
                    detail::gemm_nn(M, K, N, dCg, pb.value.data().data() + g * N * K,
                                    pa.grad_buffer().data().data() + g * M * K);
                if (pb.requires_grad)
                    detail::gemm_tn(N, K, M, dCg, pa.value.data().data() + g * M * K,
                                    pb.grad_buffer().data().data() + g * N * K);
            } else {
                if (pa.requires_grad)
                    detail::gemm_nt(M, K, N, dCg, pb.value.data().data() + g * K * N,
                                    pa.grad_buffer().data().data() + g * M * K);
                if (pb.requires_grad)
                    detail::gemm_tn(K, N, M, pa.value.data().data() + g * M * K, dCg,
                                    pb.grad_buffer().data().data() + g * K * N);
            }
        }
    }, "bmm");
}

// ---------------------------------------------------------------- normalization

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps = 1e-5) {
    const std::size_t D = x.shape().back();
    if (gamma.shape() != Shape{D} || beta.shape() != Shape{D})
        throw DimensionError("layer_norm: last dim " + std::to_string(D) + " vs gamma " + to_string(gamma.shape()) +
                             ", beta " + to_string(beta.shape()));
    if (!(eps > 0.0)) throw DimensionError("layer_norm: eps must be positive");
    const std::size_t R = x.size() / D;
    std::vector<double> mu(R), rstd(R);
    Tensor<T> out(x.shape());
    const auto& xv = x.value();
    for (std::size_t r = 0; r < R; ++r) {
        const T* row = xv.data().data() + r * D;
        double m = 0.0;
        for (std::size_t d = 0; d < D; ++d) m += row[d];
        m /= static_cast<double>(D);
        double var = 0.0;
        for (std::size_t d = 0; d < D; ++d) var += (row[d] - m) * (row[d] - m);
        var /= static_cast<double>(D);
        mu[r] = m;
        rstd[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t d = 0; d < D; ++d)
            out[r * D + d] = static_cast<T>((row[d] - m) * rstd[r] * gamma.value()[d] + beta.value()[d]);
    }
    return detail::make_op<T>(std::move(out), {x.ptr(), gamma.ptr(), beta.ptr()},
                              [R, D, mu = std::move(mu), rstd = std::move(rstd)](Node<T>& s) {
        auto& px = *s.parents[0];
        auto& pg = *s.parents[1];
        auto& pb = *s.parents[2];
        std::vector<double> xhat(D), dxhat(D);
        for (std::size_t r = 0; r < R; ++r) {
            const T* row = px.value.data().data() + r * D;
            const T* dy = s.grad.data().data() + r * D;
            double mean_dx = 0.0, mean_dxx = 0.0;
            for (std::size_t d = 0; d < D; ++d) {
                xhat[d] = (row[d] - mu[r]) * rstd[r];
                dxhat[d] = static_cast<double>(dy[d]) * pg.value[d];
                mean_dx += dxhat[d];
                mean_dxx += dxhat[d] * xhat[d];
            }
            mean_dx /= static_cast<double>(D);
            mean_dxx /= static_cast<double>(D);
            if (px.requires_grad) {
                auto& g = px.grad_buffer();
                for (std::size_t d = 0; d < D; ++d)
                    g[r * D + d] += static_cast<T>(rstd[r] * (dxhat[d] - mean_dx - xhat[d] * mean_dxx));
            }
            if (pg.requires_grad) {
                auto& g = pg.grad_buffer();
                for (std::size_t d = 0; d < D; ++d) g[d] += static_cast<T>(dy[d] * xhat[d]);
            }
            if (pb.requires_grad) {
                auto& g = pb.grad_buffer();
                for (std::size_t d = 0; d < D; ++d) g[d] += dy[d];
            }
        }
    }, "layer_norm");
}

/// Softmax over the last axis. Where `allowed` is given (same element count
/// as x), disallowed entries receive probability exactly zero.
template <typename T>
Var<T> softmax(const Var<T>& x, std::shared_ptr<const std::vector<std::uint8_t>> allowed = nullptr) {
    const std::size_t N = x.shape().back();
    const std::size_t R = x.size() / N;
    if (allowed && allowed->size() != x.size())
        throw DimensionError("softmax: mask has " + std::to_string(allowed->size()) + " entries for input " +
                             to_string(x.shape()));
    Tensor<T> out(x.shape());
    const auto& xv = x.value();
    for (std::size_t r = 0; r < R; ++r) {
        const T* row = xv.data().data() + r * N;
        const std::uint8_t* ok = allowed ? allowed->data() + r * N : nullptr;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < N; ++j)
            if (!ok || ok[j]) mx = std::max(mx, static_cast<double>(row[j]));
        if (!std::isfinite(mx)) throw NumericError("softmax: row with no admissible entries");
        double denom = 0.0;
        for (std::size_t j = 0; j < N; ++j)
            if (!ok || ok[j]) denom += std::exp(row[j] - mx);
        for (std::size_t j = 0; j < N; ++j)
            out[r * N + j] = (!ok || ok[j]) ? static_cast<T>(std::exp(row[j] - mx) / denom) : T{};
    }
    return detail::make_op<T>(std::move(out), {x.ptr()}, [R, N](Node<T>& s) {
        auto& g = s.parents[0]->grad_buffer();
        const auto& y = s.value;
        for (std::size_t r = 0; r < R; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < N; ++j) dot += static_cast<double>(s.grad[r * N + j]) * y[r * N + j];
            for (std::size_t j = 0; j < N; ++j)
                g[r * N + j] += static_cast<T>(y[r * N + j] * (s.grad[r * N + j] - dot));
        }
    }, "softmax");
}

template <typename T>
Var<T> log_softmax(const Var<T>& x) {
    const std::size_t N = x.shape().back();
    const std::size_t R = x.size() / N;
    Tensor<T> out(x.shape());
    const auto& xv = x.value();
    for (std::size_t r = 0; r < R; ++r) {
        const T* row = xv.data().data() + r * N;
        double mx = row[0];
        for (std::size_t j = 1; j < N; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double denom = 0.0;
        for (std::size_t j = 0; j < N; ++j) denom += std::exp(row[j] - mx);
        const double lse = mx + std::log(denom);
        for (std::size_t j = 0; j < N; ++j) out[r * N + j] = static_cast<T>(row[j] - lse);
    }
    return detail::make_op<T>(std::move(out), {x.ptr()}, [R, N](Node<T>& s) {
        auto& g = s.parents[0]->grad_buffer();
        for (std::size_t r = 0; r < R; ++r) {
            double total = 0.0;
            for (std::size_t j = 0; j < N; ++j) total += s.grad[r * N + j];
            for (std::size_t j = 0; j < N; ++j)
                g[r * N + j] += static_cast<T>(s.grad[r * N + j] - std::exp(static_cast<double>(s.value[r * N + j])) * total);
        }
    }, "log_softmax");
}

// ---------------------------------------------------------------- indexing

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    auto v = x.value().reshaped(std::move(shape));
    return detail::make_op<T>(std::move(v), {x.ptr()}, [](Node<T>& s) {
        auto& g = s.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s.grad[i];
    }, "reshape");
}

using IndexMap = std::shared_ptr<const std::vector<std::size_t>>;

/// out[i] = x[index[i]]; gradients scatter-add back through the same map.
/// Every layout change in the network (windows, shifts, patch merging,
/// pixel shuffles, channel selection) is expressed as one of these.
template <typename T>
Var<T> gather(const Var<T>& x, IndexMap index, Shape shape) {
    if (index->size() != numel(shape))
        throw DimensionError("gather: index map length " + std::to_string(index->size()) + " vs output shape " +
                             to_string(shape));
    Tensor<T> out(std::move(shape));
    const auto& xv = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const std::size_t j = (*index)[i];
        if (j >= xv.size()) throw DimensionError("gather: index out of range");
        out[i] = xv[j];
    }
    return detail::make_op<T>(std::move(out), {x.ptr()}, [index](Node<T>& s) {
        auto& g = s.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < index->size(); ++i) g[(*index)[i]] += s.grad[i];
    }, "gather");
}

/// Concatenate along the last axis; leading extents must agree.
template <typename T>
Var<T> concat_last(const Var<T>& a, const Var<T>& b) {
    Shape la = a.shape(), lb = b.shape();
    const std::size_t ca = la.back(), cb = lb.back();
    la.pop_back();
    lb.pop_back();
    if (la != lb) throw DimensionError("concat_last: leading shapes differ " + detail::shapes_str(a.shape(), b.shape()));
    const std::size_t R = a.size() / ca, C = ca + cb;
    Shape os = a.shape();
    os.back() = C;
    Tensor<T> out(os);
    for (std::size_t r = 0; r < R; ++r) {
        std::copy_n(a.value().data().begin() + r * ca, ca, out.data().begin() + r * C);
        std::copy_n(b.value().data().begin() + r * cb, cb, out.data().begin() + r * C + ca);
    }
    return detail::make_op<T>(std::move(out), {a.ptr(), b.ptr()}, [R, ca, cb](Node<T>& s) {
        const std::size_t C = ca + cb;
        if (s.parents[0]->requires_grad) {
            auto& g = s.parents[0]->grad_buffer();
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < ca; ++c) g[r * ca + c] += s.grad[r * C + c];
        }
        if (s.parents[1]->requires_grad) {
            auto& g = s.parents[1]->grad_buffer();
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < cb; ++c) g[r * cb + c] += s.grad[r * C + ca + c];
        }
    }, "concat_last");
}

// ---------------------------------------------------------------- backward

/// Accumulates d(loss)/d(node) into every reachable node that requires a
/// gradient, then releases the interior graph. Leaves keep their gradients.
template <typename T>
void backward(const Var<T>& loss) {
    if (loss.size() != 1)
        throw DimensionError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
    if (!loss.requires_grad()) return;

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<Node<T>*> stack{loss.ptr().get()};
    while (!stack.empty()) {
        Node<T>* n = stack.back();
        stack.pop_back();
        if (!seen.insert(n).second) continue;
        order.push_back(n);
        for (auto& p : n->parents)
            if (p->requires_grad) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(), [](const Node<T>* a, const Node<T>* b) { return a->seq > b->seq; });

    loss.ptr()->grad_buffer()[0] += T{1};
    for (Node<T>* n : order)
        if (n->backward && !n->grad.empty()) n->backward(*n);

    // Parents are moved out first so no node in `order` dies mid-loop.
    std::vector<std::vector<NodePtr<T>>> released;
    released.reserve(order.size());
    for (Node<T>* n : order) {
        if (n->backward) {
            n->backward = nullptr;
            released.push_back(std::move(n->parents));
            n->parents.clear();
        }
    }
}

}  // namespace m4oe::ad
