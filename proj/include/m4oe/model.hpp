#pragma once

// U-shaped windowed-attention segmentation network with MoE feed-forward
// sites.
//
// Each block computes
//   z~ = (S)W-MSA(LN(z)) + z
//   z' = FFN(LN(z~)) + z~
// where FFN is either a plain two-layer MLP or a MoE site. Blocks alternate
// unshifted / shifted windows, so every even depth is a sequence of W-MSA +
// SW-MSA pairs.
//
// Parameter naming:
//   embed.{proj.w,proj.b,norm.gamma,norm.beta}
//   enc.stage{s}.block{j}.{norm1,attn,norm2}.*  and  .mlp.* | .moe.*
//   enc.stage{s}.merge.*   enc.norm.*
//   dec.stage{s}.{expand,fuse}.*  dec.stage{s}.block{j}.*
//   final.norm.*  final.expand.*  head.{w,b}
//   mae.{mask_token,head.w,head.b}             (pre-training only)

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "m4oe/autodiff.hpp"
#include "m4oe/backbone.hpp"
#include "m4oe/config.hpp"
#include "m4oe/moe.hpp"
#include "m4oe/params.hpp"

namespace m4oe {

/// Feed-forward flavour at one block position.
struct FfnSite {
    bool moe = false;
    MoEConfig cfg;
};

inline FfnSite ffn_site(const ModelConfig& cfg, std::size_t stage, bool decoder) {
    const bool moe = decoder ? moe_in_decoder(cfg.placement) : moe_in_encoder(cfg.placement);
    MoEConfig m;
    m.num_experts = moe ? cfg.num_experts : 1;
    m.in_dim = cfg.backbone.dim(stage);
    m.hidden_dim = cfg.hidden(stage);
    m.gating = moe && cfg.gating;
    m.granularity = cfg.granularity;
    m.gelu = cfg.gelu;
    return {moe, m};
}

/// Forward-pass switches plus an optional record of every FFN site output.
template <typename T>
struct ForwardOptions {
    GateOverride gate;
    std::map<std::string, Tensor<T>>* trace = nullptr;
};

// ------------------------------------------------------------------ specs

namespace detail {

inline void ln_specs(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t dim) {
    out.push_back({prefix + ".gamma", {dim}, Init::ones});
    out.push_back({prefix + ".beta", {dim}, Init::zeros});
}

inline void linear_specs(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t out_dim,
                         std::size_t in_dim, bool bias = true) {
    out.push_back({prefix + ".w", {out_dim, in_dim}, Init::trunc_normal});
    if (bias) out.push_back({prefix + ".b", {out_dim}, Init::zeros});
}

inline void block_specs(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t dim, const FfnSite& site) {
    ln_specs(out, prefix + ".norm1", dim);
    linear_specs(out, prefix + ".attn.qkv", 3 * dim, dim);
    linear_specs(out, prefix + ".attn.proj", dim, dim);
    ln_specs(out, prefix + ".norm2", dim);
    if (site.moe) {
        auto m = moe_param_specs(prefix + ".moe", site.cfg);
        out.insert(out.end(), m.begin(), m.end());
    } else {
        append_expert_specs(out, prefix + ".mlp", dim, site.cfg.hidden_dim);
    }
}

}  // namespace detail

inline std::string block_name(bool decoder, std::size_t stage, std::size_t block) {
    return std::string(decoder ? "dec" : "enc") + ".stage" + std::to_string(stage) + ".block" + std::to_string(block);
}

/// Patch embedding, encoder stages (with merges) and the bottleneck norm.
inline std::vector<ParamSpec> encoder_param_specs(const ModelConfig& cfg) {
    cfg.validate();
    const auto& bb = cfg.backbone;
    std::vector<ParamSpec> out;
    detail::linear_specs(out, "embed.proj", bb.embed_dim, bb.in_channels * bb.patch_size * bb.patch_size);
    detail::ln_specs(out, "embed.norm", bb.embed_dim);
    const std::size_t S = bb.stages();
    for (std::size_t s = 0; s < S; ++s) {
        const auto site = ffn_site(cfg, s, false);
        for (std::size_t j = 0; j < bb.depths[s]; ++j) detail::block_specs(out, block_name(false, s, j), bb.dim(s), site);
        if (s + 1 < S) {
            const std::string p = "enc.stage" + std::to_string(s) + ".merge";
            detail::ln_specs(out, p + ".norm", 4 * bb.dim(s));
            detail::linear_specs(out, p + ".reduce", 2 * bb.dim(s), 4 * bb.dim(s), false);
        }
    }
    detail::ln_specs(out, "enc.norm", bb.dim(S - 1));
    return out;
}

/// Decoder stages, final upsampling and the padded projection head.
inline std::vector<ParamSpec> decoder_param_specs(const ModelConfig& cfg) {
    cfg.validate();
    const auto& bb = cfg.backbone;
    std::vector<ParamSpec> out;
    const std::size_t S = bb.stages();
    for (std::size_t s = S - 1; s-- > 0;) {
        const std::string p = "dec.stage" + std::to_string(s);
        detail::linear_specs(out, p + ".expand.proj", 2 * bb.dim(s + 1), bb.dim(s + 1), false);
        detail::ln_specs(out, p + ".expand.norm", bb.dim(s));
        detail::linear_specs(out, p + ".fuse", bb.dim(s), 2 * bb.dim(s));
        const auto site = ffn_site(cfg, s, true);
        for (std::size_t j = 0; j < bb.depths[s]; ++j) detail::block_specs(out, block_name(true, s, j), bb.dim(s), site);
    }
    const std::size_t C0 = bb.embed_dim, p = bb.patch_size;
    detail::ln_specs(out, "final.norm", C0);
    detail::linear_specs(out, "final.expand.proj", p * p * C0, C0, false);
    detail::ln_specs(out, "final.expand.norm", C0);
    detail::linear_specs(out, "head", cfg.num_classes, C0);
    return out;
}

inline std::vector<ParamSpec> model_param_specs(const ModelConfig& cfg) {
    auto out = encoder_param_specs(cfg);
    auto dec = decoder_param_specs(cfg);
    out.insert(out.end(), dec.begin(), dec.end());
    return out;
}

/// Pixels covered by one bottleneck token along each axis.
inline std::size_t bottleneck_stride(const BackboneConfig& bb) { return bb.patch_size << (bb.stages() - 1); }

/// Mask token and the linear pixel decoder used for masked-patch
/// reconstruction.
inline std::vector<ParamSpec> mae_param_specs(const ModelConfig& cfg) {
    const auto& bb = cfg.backbone;
    const std::size_t f = bottleneck_stride(bb);
    std::vector<ParamSpec> out;
    out.push_back({"mae.mask_token", {bb.embed_dim}, Init::trunc_normal});
    detail::linear_specs(out, "mae.head", bb.in_channels * f * f, bb.dim(bb.stages() - 1));
    return out;
}

template <typename T>
ParameterStore<T> init_parameters(const std::vector<ParamSpec>& specs, std::uint64_t seed) {
    Rng rng(seed);
    return ParameterStore<T>::from_specs(specs, rng);
}

// ------------------------------------------------------------------ forward

/// Trace keys are "<block path>.ffn" (site output) and "<block path>.ffn.weights"
/// (mixture weights, MoE sites only).
template <typename T>
ad::Var<T> ffn_forward(const ad::Var<T>& x, const FfnSite& site, const Scope<T>& block, const ForwardOptions<T>& opts) {
    ad::Var<T> out;
    if (site.moe) {
        ad::Var<T> weights;
        out = moe_forward(x, site.cfg, block.sub("moe"), opts.gate, &weights);
        if (opts.trace) (*opts.trace)[block.prefix() + ".ffn.weights"] = weights.value();
    } else {
        out = expert_forward(x, block.sub("mlp"), site.cfg.gelu);
    }
    if (opts.trace) (*opts.trace)[block.prefix() + ".ffn"] = out.value();
    return out;
}

/// One block: attention sub-layer then feed-forward sub-layer, each pre-norm
/// with a residual connection.
template <typename T>
Activation<T> swin_block(const Activation<T>& x, const Scope<T>& s, std::size_t heads, std::size_t window,
                         std::size_t shift, const FfnSite& site, const ForwardOptions<T>& opts = {}) {
    try {
        auto h = x;
        h.tokens = ad::layer_norm(x.tokens, s("norm1.gamma"), s("norm1.beta"));
        auto attn = window_attention(h, s.sub("attn"), heads, window, shift);
        auto mid = ad::add(x.tokens, attn.tokens);
        auto f = ffn_forward(ad::layer_norm(mid, s("norm2.gamma"), s("norm2.beta")), site, s, opts);
        return Activation<T>::wrap(ad::add(mid, f), x.height, x.width);
    } catch (const Error&) {
        rethrow_in("block " + s.prefix());
    }
}

/// A W-MSA block followed by an SW-MSA block, both with the given FFN site.
template <typename T>
Activation<T> block_pair(const Activation<T>& x, const Scope<T>& first, const Scope<T>& second, std::size_t heads,
                         std::size_t window, std::size_t shift, const FfnSite& site,
                         const ForwardOptions<T>& opts = {}) {
    auto z = swin_block(x, first, heads, window, 0, site, opts);
    return swin_block(z, second, heads, window, shift, site, opts);
}

template <typename T>
Activation<T> run_stage(Activation<T> x, const ModelConfig& cfg, const Scope<T>& root, std::size_t stage, bool decoder,
                        const ForwardOptions<T>& opts) {
    const auto& bb = cfg.backbone;
    const auto site = ffn_site(cfg, stage, decoder);
    for (std::size_t j = 0; j + 1 < bb.depths[stage]; j += 2)
        x = block_pair(x, root.sub(block_name(decoder, stage, j)), root.sub(block_name(decoder, stage, j + 1)),
                       bb.num_heads[stage], bb.window_size, bb.shift(stage), site, opts);
    return x;
}

template <typename T>
struct EncoderOutput {
    std::vector<Activation<T>> skips;  // stage outputs before each merge
    Activation<T> bottleneck;          // normalized deepest stage
};

/// Encoder on already-embedded tokens.
template <typename T>
EncoderOutput<T> encode(Activation<T> x, const ModelConfig& cfg, const Scope<T>& root, const ForwardOptions<T>& opts = {}) {
    const std::size_t S = cfg.backbone.stages();
    EncoderOutput<T> out;
    for (std::size_t s = 0; s < S; ++s) {
        x = run_stage(x, cfg, root, s, false, opts);
        if (s + 1 < S) {
            out.skips.push_back(x);
            x = patch_merge(x, root.sub("enc.stage" + std::to_string(s) + ".merge"));
        }
    }
    x.tokens = ad::layer_norm(x.tokens, root("enc.norm.gamma"), root("enc.norm.beta"));
    out.bottleneck = x;
    return out;
}

/// Decoder: expand, fuse skip by concat + linear, blocks; then the final
/// patch-size expansion and the padded head. Returns [B x K_pad x H x W].
template <typename T>
ad::Var<T> decode(const EncoderOutput<T>& enc, const ModelConfig& cfg, const Scope<T>& root,
                  const ForwardOptions<T>& opts = {}) {
    const auto& bb = cfg.backbone;
    auto x = enc.bottleneck;
    for (std::size_t s = bb.stages() - 1; s-- > 0;) {
        const auto st = root.sub("dec.stage" + std::to_string(s));
        x = patch_expand(x, st.sub("expand"));
        const auto& skip = enc.skips.at(s);
        auto fused = ad::linear(ad::concat_last(x.tokens, skip.tokens), st("fuse.w"), st("fuse.b"));
        x = Activation<T>::wrap(fused, x.height, x.width);
        x = run_stage(x, cfg, root, s, true, opts);
    }
    x.tokens = ad::layer_norm(x.tokens, root("final.norm.gamma"), root("final.norm.beta"));
    x = expand(x, root.sub("final.expand"), bb.patch_size, bb.embed_dim);
    auto logits = ad::linear(x.tokens, root("head.w"), root("head.b"));  // [B x HW x K]
    const std::size_t K = logits.shape().back();
    return ad::gather(logits, layout::to_channels_first(x.batch, x.height, x.width, K),
                      Shape{x.batch, K, x.height, x.width});
}

template <typename T>
ad::Var<T> unet_forward(const ad::Var<T>& image, const ModelConfig& cfg, const Scope<T>& root,
                        const ForwardOptions<T>& opts = {}) {
    auto tokens = patch_embed(image, cfg.backbone, root.sub("embed"));
    return decode(encode(tokens, cfg, root, opts), cfg, root, opts);
}

/// Masked-autoencoder pass: embedded tokens flagged in `masked` ([B x L], 1 =
/// hidden) are replaced by the learned mask token; the encoder output is
/// decoded linearly back to pixels. Returns [B x C x H x W].
template <typename T>
ad::Var<T> mae_forward(const ad::Var<T>& image, const std::vector<std::uint8_t>& masked, const ModelConfig& cfg,
                       const Scope<T>& root, const ForwardOptions<T>& opts = {}) {
    const auto& bb = cfg.backbone;
    auto x = patch_embed(image, bb, root.sub("embed"));
    const std::size_t B = x.batch, L = x.height * x.width, C = x.channels;
    if (masked.size() != B * L)
        throw DimensionError("mae: mask has " + std::to_string(masked.size()) + " flags for " + std::to_string(B * L) +
                             " tokens");
    if (std::any_of(masked.begin(), masked.end(), [](std::uint8_t m) { return m != 0; })) {
        Tensor<T> keep(Shape{B, L, C}), hide(Shape{B, L, C});
        for (std::size_t t = 0; t < B * L; ++t)
            for (std::size_t c = 0; c < C; ++c) (masked[t] ? hide : keep)[t * C + c] = T{1};
        auto idx = std::make_shared<std::vector<std::size_t>>(B * L * C);
        for (std::size_t i = 0; i < idx->size(); ++i) (*idx)[i] = i % C;
        auto token = ad::gather(root("mae.mask_token"), ad::IndexMap(idx), Shape{B, L, C});
        x.tokens = ad::add(ad::mul(x.tokens, ad::constant(std::move(keep))), ad::mul(token, ad::constant(std::move(hide))));
    }
    auto enc = encode(x, cfg, root, opts);
    const std::size_t f = bottleneck_stride(bb);
    auto pix = ad::linear(enc.bottleneck.tokens, root("mae.head.w"), root("mae.head.b"));  // [B x l x C_in*f*f]
    const std::size_t g = enc.bottleneck.height, Cin = bb.in_channels, H = bb.img_size;
    auto idx = std::make_shared<std::vector<std::size_t>>(B * Cin * H * H);
    std::size_t o = 0;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t ch = 0; ch < Cin; ++ch)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t xx = 0; xx < H; ++xx)
                    (*idx)[o++] = ((b * g + y / f) * g + xx / f) * (Cin * f * f) + (ch * f + y % f) * f + xx % f;
    return ad::gather(pix, ad::IndexMap(idx), Shape{B, Cin, H, H});
}

}  // namespace m4oe
