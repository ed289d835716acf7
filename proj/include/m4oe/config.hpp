#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "m4oe/autodiff.hpp"
#include "m4oe/error.hpp"

namespace m4oe {

enum class MoEPlacement { none, encoder_only, decoder_only, both };
enum class GateGranularity { token, sample };

inline const char* to_string(MoEPlacement p) {
    switch (p) {
        case MoEPlacement::none: return "none";
        case MoEPlacement::encoder_only: return "encoder_only";
        case MoEPlacement::decoder_only: return "decoder_only";
        case MoEPlacement::both: return "both";
    }
    return "?";
}

inline MoEPlacement parse_placement(const std::string& s) {
    if (s == "none") return MoEPlacement::none;
    if (s == "encoder_only" || s == "encoder") return MoEPlacement::encoder_only;
    if (s == "decoder_only" || s == "decoder") return MoEPlacement::decoder_only;
    if (s == "both") return MoEPlacement::both;
    throw ConfigError("unknown moe placement '" + s + "'");
}

inline bool moe_in_encoder(MoEPlacement p) { return p == MoEPlacement::encoder_only || p == MoEPlacement::both; }
inline bool moe_in_decoder(MoEPlacement p) { return p == MoEPlacement::decoder_only || p == MoEPlacement::both; }

struct BackboneConfig {
    std::size_t img_size = 64;
    std::size_t patch_size = 4;
    std::size_t window_size = 4;
    std::size_t embed_dim = 24;
    std::vector<std::size_t> depths{2, 2, 2};
    std::vector<std::size_t> num_heads{2, 4, 8};
    std::size_t in_channels = 1;
    // Reserved; attention is plain scaled dot-product.
    bool relative_position_bias = false;

    std::size_t stages() const noexcept { return depths.size(); }
    std::size_t grid(std::size_t stage) const { return (img_size / patch_size) >> stage; }
    std::size_t dim(std::size_t stage) const { return embed_dim << stage; }

    /// Swin disables the shift when a stage holds a single window.
    std::size_t shift(std::size_t stage) const { return grid(stage) > window_size ? window_size / 2 : 0; }

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError("backbone: " + m); };
        if (img_size == 0 || patch_size == 0 || window_size == 0 || embed_dim == 0 || in_channels == 0)
            fail("sizes must be positive");
        if (img_size % 2 != 0) fail("img_size must be even");
        if (img_size % patch_size != 0) fail("img_size must be divisible by patch_size");
        if (depths.empty()) fail("depths must be non-empty");
        if (num_heads.size() != depths.size()) fail("num_heads must have one entry per stage");
        if (relative_position_bias) fail("relative position bias is not implemented");
        for (std::size_t s = 0; s < depths.size(); ++s) {
            if (depths[s] == 0 || depths[s] % 2 != 0) fail("every depth must be a positive even number");
            const std::size_t g = (img_size / patch_size) >> s;
            if (g == 0 || (g << s) != img_size / patch_size) fail("token grid not divisible down to stage " + std::to_string(s));
            if (g % window_size != 0)
                fail("token grid " + std::to_string(g) + " at stage " + std::to_string(s) +
                     " not divisible by window " + std::to_string(window_size));
            if (num_heads[s] == 0 || dim(s) % num_heads[s] != 0)
                fail("stage " + std::to_string(s) + " width " + std::to_string(dim(s)) + " not divisible by " +
                     std::to_string(num_heads[s]) + " heads");
        }
    }

    friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

/// Architecture of the full segmentation network; the single source of truth
/// for parameter enumeration and counting.
struct ModelConfig {
    BackboneConfig backbone;
    std::size_t num_experts = 3;
    double mlp_ratio = 4.0;
    bool gating = true;
    GateGranularity granularity = GateGranularity::token;
    MoEPlacement placement = MoEPlacement::both;
    ad::GeluKind gelu = ad::GeluKind::tanh_approx;
    std::size_t num_classes = 5;  // padded head width K_pad

    std::size_t hidden(std::size_t stage) const {
        return static_cast<std::size_t>(mlp_ratio * static_cast<double>(backbone.dim(stage)) + 0.5);
    }

    void validate() const {
        backbone.validate();
        if (num_experts == 0) throw ConfigError("num_experts must be >= 1");
        if (!(mlp_ratio > 0.0) || hidden(0) == 0) throw ConfigError("mlp_ratio must give hidden_dim >= 1");
        if (num_classes == 0) throw ConfigError("num_classes must be >= 1");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

}  // namespace m4oe
