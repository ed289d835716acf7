#pragma once

// Windowed-attention building blocks. Token activations are kept as
// [B x (H*W) x C] with the grid geometry carried alongside; every spatial
// rearrangement is a precomputed index map fed to ad::gather.

#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "m4oe/autodiff.hpp"
#include "m4oe/config.hpp"
#include "m4oe/error.hpp"
#include "m4oe/params.hpp"

namespace m4oe {

template <typename T>
struct Activation {
    ad::Var<T> tokens;  // [B x L x C], L = height * width
    std::size_t batch = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;

    static Activation wrap(ad::Var<T> tokens, std::size_t height, std::size_t width) {
        const auto& s = tokens.shape();
        if (s.size() != 3 || s[1] != height * width)
            throw DimensionError("activation tokens " + to_string(s) + " do not match grid " + std::to_string(height) +
                                 "x" + std::to_string(width));
        return {std::move(tokens), s[0], height, width, s[2]};
    }
};

namespace layout {

using Map = std::vector<std::size_t>;

inline ad::IndexMap share(Map m) { return std::make_shared<const Map>(std::move(m)); }

/// [B x C x H x W] image -> [B x (H/p * W/p) x (C*p*p)] patch vectors,
/// each vector ordered (channel, row-in-patch, col-in-patch).
inline ad::IndexMap patches(std::size_t B, std::size_t C, std::size_t H, std::size_t W, std::size_t p) {
    const std::size_t gh = H / p, gw = W / p, F = C * p * p;
    Map m(B * gh * gw * F);
    std::size_t o = 0;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t r = 0; r < gh; ++r)
            for (std::size_t c = 0; c < gw; ++c)
                for (std::size_t ch = 0; ch < C; ++ch)
                    for (std::size_t i = 0; i < p; ++i)
                        for (std::size_t j = 0; j < p; ++j)
                            m[o++] = ((b * C + ch) * H + r * p + i) * W + c * p + j;
    return share(std::move(m));
}

/// Token grid -> windows, after a cyclic roll of the grid by -shift in both
/// axes. Output [B*nW x ws*ws x C], windows ordered batch-major then row-major.
inline Map window_map(std::size_t B, std::size_t H, std::size_t W, std::size_t C, std::size_t ws, std::size_t shift) {
    if (ws == 0 || H % ws != 0 || W % ws != 0)
        throw DimensionError("window partition: grid " + std::to_string(H) + "x" + std::to_string(W) +
                             " not divisible by window " + std::to_string(ws));
    const std::size_t nh = H / ws, nw = W / ws;
    Map m(B * H * W * C);
    std::size_t o = 0;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t wy = 0; wy < nh; ++wy)
            for (std::size_t wx = 0; wx < nw; ++wx)
                for (std::size_t i = 0; i < ws; ++i)
                    for (std::size_t j = 0; j < ws; ++j) {
                        const std::size_t y = (wy * ws + i + shift) % H;
                        const std::size_t x = (wx * ws + j + shift) % W;
                        const std::size_t src = ((b * H + y) * W + x) * C;
                        for (std::size_t c = 0; c < C; ++c) m[o++] = src + c;
                    }
    return m;
}

inline Map invert(const Map& m) {
    Map inv(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) inv[m[i]] = i;
    return inv;
}

/// Region labels of the rolled grid; tokens may only attend within a label.
/// Output [nW x N x N] of 0/1 admissibility flags.
inline std::vector<std::uint8_t> shift_mask(std::size_t H, std::size_t W, std::size_t ws, std::size_t shift) {
    auto region = [&](std::size_t v, std::size_t extent) -> std::size_t {
        if (v < extent - ws) return 0;
        if (v < extent - shift) return 1;
        return 2;
    };
    const std::size_t nh = H / ws, nw = W / ws, N = ws * ws;
    std::vector<std::uint8_t> mask(nh * nw * N * N);
    std::vector<std::size_t> label(N);
    for (std::size_t wy = 0; wy < nh; ++wy)
        for (std::size_t wx = 0; wx < nw; ++wx) {
            for (std::size_t i = 0; i < ws; ++i)
                for (std::size_t j = 0; j < ws; ++j)
                    label[i * ws + j] = region(wy * ws + i, H) * 3 + region(wx * ws + j, W);
            const std::size_t base = (wy * nw + wx) * N * N;
            for (std::size_t a = 0; a < N; ++a)
                for (std::size_t b = 0; b < N; ++b) mask[base + a * N + b] = label[a] == label[b];
        }
    return mask;
}

/// [G x N x 3C] fused projections -> one of q/k/v as [G*heads x N x d].
inline ad::IndexMap split_heads(std::size_t G, std::size_t N, std::size_t C, std::size_t heads, std::size_t which) {
    const std::size_t d = C / heads;
    Map m(G * heads * N * d);
    std::size_t o = 0;
    for (std::size_t g = 0; g < G; ++g)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t e = 0; e < d; ++e) m[o++] = (g * N + n) * 3 * C + which * C + h * d + e;
    return share(std::move(m));
}

/// [G*heads x N x d] -> [G x N x C].
inline ad::IndexMap merge_heads(std::size_t G, std::size_t N, std::size_t C, std::size_t heads) {
    const std::size_t d = C / heads;
    Map m(G * N * C);
    std::size_t o = 0;
    for (std::size_t g = 0; g < G; ++g)
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t e = 0; e < d; ++e) m[o++] = ((g * heads + h) * N + n) * d + e;
    return share(std::move(m));
}

/// 2x2 neighbourhoods concatenated in the order (0,0), (1,0), (0,1), (1,1).
inline ad::IndexMap merge2x2(std::size_t B, std::size_t H, std::size_t W, std::size_t C) {
    const std::size_t h2 = H / 2, w2 = W / 2;
    static constexpr std::size_t dy[4] = {0, 1, 0, 1};
    static constexpr std::size_t dx[4] = {0, 0, 1, 1};
    Map m(B * h2 * w2 * 4 * C);
    std::size_t o = 0;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t y = 0; y < h2; ++y)
            for (std::size_t x = 0; x < w2; ++x)
                for (std::size_t q = 0; q < 4; ++q) {
                    const std::size_t src = ((b * H + 2 * y + dy[q]) * W + 2 * x + dx[q]) * C;
                    for (std::size_t c = 0; c < C; ++c) m[o++] = src + c;
                }
    return share(std::move(m));
}

/// Pixel shuffle: [B x H x W x (f*f*Cout)] -> [B x fH x fW x Cout], channel
/// groups ordered (row offset, col offset, channel).
inline ad::IndexMap shuffle(std::size_t B, std::size_t H, std::size_t W, std::size_t Cout, std::size_t f) {
    Map m(B * H * f * W * f * Cout);
    std::size_t o = 0;
    const std::size_t Cin = f * f * Cout;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t y = 0; y < H * f; ++y)
            for (std::size_t x = 0; x < W * f; ++x) {
                const std::size_t src = ((b * H + y / f) * W + x / f) * Cin + ((y % f) * f + x % f) * Cout;
                for (std::size_t c = 0; c < Cout; ++c) m[o++] = src + c;
            }
    return share(std::move(m));
}

/// [B x (H*W) x K] -> [B x K x H x W].
inline ad::IndexMap to_channels_first(std::size_t B, std::size_t H, std::size_t W, std::size_t K) {
    Map m(B * K * H * W);
    std::size_t o = 0;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < K; ++k)
            for (std::size_t p = 0; p < H * W; ++p) m[o++] = (b * H * W + p) * K + k;
    return share(std::move(m));
}

}  // namespace layout

template <typename T>
Activation<T> patch_embed(const ad::Var<T>& image, const BackboneConfig& cfg, const Scope<T>& s) {
    const auto& sh = image.shape();
    if (sh.size() != 4 || sh[1] != cfg.in_channels || sh[2] != cfg.img_size || sh[3] != cfg.img_size)
        throw DimensionError("patch_embed: image " + to_string(sh) + " does not match configured [B x " +
                             std::to_string(cfg.in_channels) + " x " + std::to_string(cfg.img_size) + " x " +
                             std::to_string(cfg.img_size) + "]");
    const std::size_t B = sh[0], p = cfg.patch_size, g = cfg.img_size / p;
    auto patches = ad::gather(image, layout::patches(B, cfg.in_channels, cfg.img_size, cfg.img_size, p),
                              Shape{B, g * g, cfg.in_channels * p * p});
    auto tokens = ad::linear(patches, s("proj.w"), s("proj.b"));
    tokens = ad::layer_norm(tokens, s("norm.gamma"), s("norm.beta"));
    return Activation<T>::wrap(tokens, g, g);
}

template <typename T>
ad::Var<T> window_partition(const Activation<T>& x, std::size_t window, std::size_t shift = 0) {
    const std::size_t nW = (x.height / window) * (x.width / window);
    auto m = layout::window_map(x.batch, x.height, x.width, x.channels, window, shift);
    return ad::gather(x.tokens, layout::share(std::move(m)), Shape{x.batch * nW, window * window, x.channels});
}

template <typename T>
Activation<T> window_reverse(const ad::Var<T>& windows, std::size_t batch, std::size_t height, std::size_t width,
                             std::size_t window, std::size_t shift = 0) {
    const std::size_t C = windows.shape().back();
    auto m = layout::invert(layout::window_map(batch, height, width, C, window, shift));
    if (m.size() != windows.size()) throw DimensionError("window_reverse: window tensor does not match geometry");
    auto tokens = ad::gather(windows, layout::share(std::move(m)), Shape{batch, height * width, C});
    return Activation<T>::wrap(tokens, height, width);
}

/// Multi-head self-attention inside each window (W-MSA), or inside windows of
/// the grid rolled by `shift` with cross-region pairs masked out (SW-MSA).
/// The residual is left to the caller.
template <typename T>
Activation<T> window_attention(const Activation<T>& x, const Scope<T>& s, std::size_t heads, std::size_t window,
                               std::size_t shift) {
    const std::size_t C = x.channels;
    if (heads == 0 || C % heads != 0)
        throw DimensionError("attention: width " + std::to_string(C) + " not divisible by " + std::to_string(heads) +
                             " heads");
    const std::size_t N = window * window, nW = (x.height / window) * (x.width / window), G = x.batch * nW;
    const std::size_t d = C / heads;

    auto win = window_partition(x, window, shift);
    auto qkv = ad::linear(win, s("qkv.w"), s("qkv.b"));
    const Shape hs{G * heads, N, d};
    auto q = ad::gather(qkv, layout::split_heads(G, N, C, heads, 0), hs);
    auto k = ad::gather(qkv, layout::split_heads(G, N, C, heads, 1), hs);
    auto v = ad::gather(qkv, layout::split_heads(G, N, C, heads, 2), hs);

    auto scores = ad::scale(ad::bmm(q, k, true), static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
    std::shared_ptr<const std::vector<std::uint8_t>> allowed;
    if (shift > 0) {
        const auto regions = layout::shift_mask(x.height, x.width, window, shift);
        auto full = std::make_shared<std::vector<std::uint8_t>>(G * heads * N * N);
        for (std::size_t g = 0; g < G; ++g)
            for (std::size_t h = 0; h < heads; ++h)
                std::copy_n(regions.begin() + (g % nW) * N * N, N * N, full->begin() + (g * heads + h) * N * N);
        allowed = std::move(full);
    }
    auto attn = ad::softmax(scores, allowed);
    auto ctx = ad::gather(ad::bmm(attn, v), layout::merge_heads(G, N, C, heads), Shape{G, N, C});
    auto out = ad::linear(ctx, s("proj.w"), s("proj.b"));
    return window_reverse(out, x.batch, x.height, x.width, window, shift);
}

/// 2x2 downsampling: concat to 4C, LayerNorm, linear reduce to 2C.
template <typename T>
Activation<T> patch_merge(const Activation<T>& x, const Scope<T>& s) {
    if (x.height % 2 != 0 || x.width % 2 != 0)
        throw DimensionError("patch_merge: odd grid " + std::to_string(x.height) + "x" + std::to_string(x.width));
    const std::size_t h2 = x.height / 2, w2 = x.width / 2, C = x.channels;
    auto cat = ad::gather(x.tokens, layout::merge2x2(x.batch, x.height, x.width, C), Shape{x.batch, h2 * w2, 4 * C});
    cat = ad::layer_norm(cat, s("norm.gamma"), s("norm.beta"));
    return Activation<T>::wrap(ad::linear(cat, s("reduce.w")), h2, w2);
}

/// Upsampling by `factor`: linear C -> factor^2 * C/r, pixel shuffle, LayerNorm.
/// patch_expand uses factor 2 and halves the width; the final stage uses the
/// patch size and keeps it.
template <typename T>
Activation<T> expand(const Activation<T>& x, const Scope<T>& s, std::size_t factor, std::size_t out_channels) {
    auto y = ad::linear(x.tokens, s("proj.w"));
    if (y.shape().back() != factor * factor * out_channels)
        throw DimensionError("expand: projection width " + std::to_string(y.shape().back()) + " != " +
                             std::to_string(factor * factor * out_channels));
    const std::size_t H = x.height * factor, W = x.width * factor;
    y = ad::gather(y, layout::shuffle(x.batch, x.height, x.width, out_channels, factor), Shape{x.batch, H * W, out_channels});
    y = ad::layer_norm(y, s("norm.gamma"), s("norm.beta"));
    return Activation<T>::wrap(y, H, W);
}

template <typename T>
Activation<T> patch_expand(const Activation<T>& x, const Scope<T>& s) {
    if (x.channels % 2 != 0) throw DimensionError("patch_expand: channel count " + std::to_string(x.channels) + " is odd");
    return expand(x, s, 2, x.channels / 2);
}

}  // namespace m4oe
