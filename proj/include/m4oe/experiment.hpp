#pragma once

// Experiment configuration and its JSON form. Unknown keys are ignored;
// missing keys take the defaults below.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "m4oe/checkpoint.hpp"
#include "m4oe/config.hpp"
#include "m4oe/heads.hpp"
#include "m4oe/synth.hpp"

namespace m4oe {

struct Phase1Config {
    double mask_ratio = 0.75;
    std::size_t epochs = 20;
    double lr = 1e-3;
    double weight_decay = 1e-4;
    std::size_t batch_size = 8;
    bool norm_pix_loss = false;

    friend bool operator==(const Phase1Config&, const Phase1Config&) = default;
};

struct Phase2Config {
    std::size_t epochs = 30;
    double lr = 1e-3;
    std::size_t batch_size = 36;
    double weight_decay = 1e-4;
    MoEPlacement placement = MoEPlacement::both;
    bool gating = true;

    friend bool operator==(const Phase2Config&, const Phase2Config&) = default;
};

enum class SharedMerge { average, take_first };

struct ExperimentConfig {
    std::uint64_t seed = 0;
    BackboneConfig backbone;
    double mlp_ratio = 4.0;
    GateGranularity granularity = GateGranularity::token;
    ad::GeluKind gelu = ad::GeluKind::tanh_approx;
    std::map<std::size_t, std::string> classes{{0, "background"}, {1, "liver"}, {2, "kidney"},
                                               {3, "spleen"},     {4, "pancreas"}, {5, "tumor"}};
    std::vector<ModalityDescriptor> modalities = default_label_space().modalities();
    ChannelAssignment assignment = ChannelAssignment::shared;
    Phase1Config phase1;
    Phase2Config phase2;
    SharedMerge shared_merge = SharedMerge::average;
    LossOptions loss;
    bool eval_include_background = false;
    SynthSpec data = default_synth_spec();
    SynthSpec eval_data = default_synth_spec(64, 16, 1);

    std::size_t num_experts() const { return modalities.size(); }

    LabelSpace label_space() const {
        LabelSpace s(assignment);
        for (const auto& [id, name] : classes) s.add_class(id, name);
        for (const auto& m : modalities) s.add_modality(m);
        return s;
    }

    /// Network description for phase 2 (or any placement/gating override).
    ModelConfig model(MoEPlacement placement, bool gating) const {
        ModelConfig m;
        m.backbone = backbone;
        m.num_experts = num_experts();
        m.mlp_ratio = mlp_ratio;
        m.gating = gating;
        m.granularity = granularity;
        m.placement = placement;
        m.gelu = gelu;
        m.num_classes = label_space().k_pad();
        return m;
    }
    ModelConfig model() const { return model(phase2.placement, phase2.gating); }

    /// Single-expert network trained in phase 1.
    ModelConfig phase1_model() const {
        auto m = model(MoEPlacement::none, false);
        m.num_experts = 1;
        return m;
    }

    void validate() const {
        backbone.validate();
        if (modalities.empty()) throw ConfigError("experiment: no modalities");
        label_space();
        if (!(phase1.mask_ratio >= 0.0 && phase1.mask_ratio < 1.0))
            throw ConfigError("experiment: phase1.mask_ratio must be in [0, 1)");
        if (!(phase1.lr >= 0) || !(phase2.lr >= 0) || phase1.weight_decay < 0 || phase2.weight_decay < 0)
            throw ConfigError("experiment: learning rates and weight decay must be non-negative");
        if (phase1.batch_size == 0 || phase2.batch_size == 0) throw ConfigError("experiment: batch sizes must be positive");
        for (const auto& m : modalities)
            if (m.in_channels != backbone.in_channels)
                throw ConfigError("experiment: modality '" + m.name + "' has " + std::to_string(m.in_channels) +
                                  " channels but the backbone takes " + std::to_string(backbone.in_channels));
        model().validate();
    }
};

// ------------------------------------------------------------------ JSON

inline const char* to_string(GateGranularity g) { return g == GateGranularity::token ? "token" : "sample"; }
inline GateGranularity parse_granularity(const std::string& s) {
    if (s == "token") return GateGranularity::token;
    if (s == "sample") return GateGranularity::sample;
    throw ConfigError("unknown gate granularity '" + s + "'");
}
inline const char* to_string(ad::GeluKind g) { return g == ad::GeluKind::tanh_approx ? "tanh" : "erf"; }
inline ad::GeluKind parse_gelu(const std::string& s) {
    if (s == "tanh") return ad::GeluKind::tanh_approx;
    if (s == "erf") return ad::GeluKind::exact_erf;
    throw ConfigError("unknown gelu kind '" + s + "' (expected tanh|erf)");
}

inline nlohmann::json to_json(const BackboneConfig& b) {
    return {{"img_size", b.img_size},   {"patch_size", b.patch_size}, {"window_size", b.window_size},
            {"embed_dim", b.embed_dim}, {"depths", b.depths},         {"num_heads", b.num_heads},
            {"in_channels", b.in_channels}, {"relative_position_bias", b.relative_position_bias}};
}

inline BackboneConfig backbone_from_json(const nlohmann::json& j) {
    BackboneConfig b;
    b.img_size = j.value("img_size", b.img_size);
    b.patch_size = j.value("patch_size", b.patch_size);
    b.window_size = j.value("window_size", b.window_size);
    b.embed_dim = j.value("embed_dim", b.embed_dim);
    b.depths = j.value("depths", b.depths);
    b.num_heads = j.value("num_heads", b.num_heads);
    b.in_channels = j.value("in_channels", b.in_channels);
    b.relative_position_bias = j.value("relative_position_bias", b.relative_position_bias);
    if (b.relative_position_bias) throw ConfigError("backbone: relative_position_bias is not implemented");
    return b;
}

inline nlohmann::json to_json(const ModelConfig& m) {
    return {{"backbone", to_json(m.backbone)}, {"num_experts", m.num_experts}, {"mlp_ratio", m.mlp_ratio},
            {"gating", m.gating},              {"granularity", to_string(m.granularity)},
            {"placement", to_string(m.placement)}, {"gelu", to_string(m.gelu)}, {"num_classes", m.num_classes}};
}

inline ModelConfig model_from_json(const nlohmann::json& j) {
    try {
        ModelConfig m;
        m.backbone = backbone_from_json(j.at("backbone"));
        m.num_experts = j.at("num_experts").get<std::size_t>();
        m.mlp_ratio = j.value("mlp_ratio", m.mlp_ratio);
        m.gating = j.value("gating", m.gating);
        m.granularity = parse_granularity(j.value("granularity", std::string("token")));
        m.placement = parse_placement(j.value("placement", std::string("both")));
        m.gelu = parse_gelu(j.value("gelu", std::string("tanh")));
        m.num_classes = j.at("num_classes").get<std::size_t>();
        m.validate();
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
}

inline nlohmann::json to_json(const LabelSpace& s) {
    nlohmann::json classes = nlohmann::json::array(), mods = nlohmann::json::array();
    for (const auto& [id, name] : s.classes()) classes.push_back({{"id", id}, {"name", name}});
    for (const auto& m : s.modalities()) {
        auto j = to_json(m);
        j["channels"] = s.selection(m.id);
        mods.push_back(j);
    }
    return {{"assignment", to_string(s.mode())}, {"k_pad", s.k_pad()}, {"classes", classes}, {"modalities", mods}};
}

inline LabelSpace label_space_from_json(const nlohmann::json& j) {
    try {
        LabelSpace s(parse_assignment(j.value("assignment", std::string("shared"))));
        for (const auto& c : j.at("classes")) s.add_class(c.at("id").get<std::size_t>(), c.at("name").get<std::string>());
        for (const auto& m : j.at("modalities")) s.add_modality(modality_from_json(m));
        if (j.contains("k_pad") && j.at("k_pad").get<std::size_t>() != s.k_pad())
            throw FormatError("label space: stored k_pad " + j.at("k_pad").dump() + " != recomputed " +
                              std::to_string(s.k_pad()));
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("label space: ") + e.what());
    }
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
    nlohmann::json classes = nlohmann::json::array(), mods = nlohmann::json::array();
    for (const auto& [id, name] : c.classes) classes.push_back({{"id", id}, {"name", name}});
    for (const auto& m : c.modalities) mods.push_back(to_json(m));
    return {
        {"seed", c.seed},
        {"backbone", to_json(c.backbone)},
        {"moe", {{"mlp_ratio", c.mlp_ratio}, {"granularity", to_string(c.granularity)}, {"gelu", to_string(c.gelu)}}},
        {"classes", classes},
        {"modalities", mods},
        {"assignment", to_string(c.assignment)},
        {"phase1",
         {{"mask_ratio", c.phase1.mask_ratio}, {"epochs", c.phase1.epochs}, {"lr", c.phase1.lr},
          {"weight_decay", c.phase1.weight_decay}, {"batch_size", c.phase1.batch_size},
          {"norm_pix_loss", c.phase1.norm_pix_loss}}},
        {"phase2",
         {{"epochs", c.phase2.epochs}, {"lr", c.phase2.lr}, {"batch_size", c.phase2.batch_size},
          {"weight_decay", c.phase2.weight_decay}, {"placement", to_string(c.phase2.placement)},
          {"gating", c.phase2.gating}}},
        {"shared_merge", c.shared_merge == SharedMerge::average ? "average" : "take_first"},
        {"loss", {{"dice_includes_background", c.loss.dice_includes_background}, {"dice_smooth", c.loss.dice_smooth}}},
        {"eval", {{"include_background", c.eval_include_background}}},
        {"data", to_json(c.data)},
        {"eval_data", to_json(c.eval_data)},
    };
}

inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
    try {
        ExperimentConfig c;
        c.seed = j.value("seed", c.seed);
        if (j.contains("backbone")) c.backbone = backbone_from_json(j.at("backbone"));
        if (j.contains("moe")) {
            const auto& m = j.at("moe");
            if (m.contains("num_experts"))
                throw ConfigError("moe.num_experts is implied by the modality list and must not be set");
            c.mlp_ratio = m.value("mlp_ratio", c.mlp_ratio);
            c.granularity = parse_granularity(m.value("granularity", std::string(to_string(c.granularity))));
            c.gelu = parse_gelu(m.value("gelu", std::string(to_string(c.gelu))));
        }
        if (j.contains("classes")) {
            c.classes.clear();
            for (const auto& e : j.at("classes")) c.classes[e.at("id").get<std::size_t>()] = e.at("name").get<std::string>();
        }
        if (j.contains("modalities")) {
            c.modalities.clear();
            for (const auto& e : j.at("modalities")) c.modalities.push_back(modality_from_json(e));
        }
        c.assignment = parse_assignment(j.value("assignment", std::string(to_string(c.assignment))));
        if (j.contains("phase1")) {
            const auto& p = j.at("phase1");
            c.phase1.mask_ratio = p.value("mask_ratio", c.phase1.mask_ratio);
            c.phase1.epochs = p.value("epochs", c.phase1.epochs);
            c.phase1.lr = p.value("lr", c.phase1.lr);
            c.phase1.weight_decay = p.value("weight_decay", c.phase1.weight_decay);
            c.phase1.batch_size = p.value("batch_size", c.phase1.batch_size);
            c.phase1.norm_pix_loss = p.value("norm_pix_loss", c.phase1.norm_pix_loss);
        }
        if (j.contains("phase2")) {
            const auto& p = j.at("phase2");
            c.phase2.epochs = p.value("epochs", c.phase2.epochs);
            c.phase2.lr = p.value("lr", c.phase2.lr);
            c.phase2.batch_size = p.value("batch_size", c.phase2.batch_size);
            c.phase2.weight_decay = p.value("weight_decay", c.phase2.weight_decay);
            c.phase2.placement = parse_placement(p.value("placement", std::string(to_string(c.phase2.placement))));
            c.phase2.gating = p.value("gating", c.phase2.gating);
        }
        const auto merge = j.value("shared_merge", std::string("average"));
        if (merge == "average") c.shared_merge = SharedMerge::average;
        else if (merge == "take_first") c.shared_merge = SharedMerge::take_first;
        else throw ConfigError("unknown shared_merge '" + merge + "'");
        if (j.contains("loss")) {
            c.loss.dice_includes_background = j.at("loss").value("dice_includes_background", false);
            c.loss.dice_smooth = j.at("loss").value("dice_smooth", 1.0);
        }
        if (j.contains("eval")) c.eval_include_background = j.at("eval").value("include_background", false);
        if (j.contains("data")) c.data = synth_spec_from_json(j.at("data"));
        if (j.contains("eval_data")) c.eval_data = synth_spec_from_json(j.at("eval_data"));
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("experiment config: ") + e.what());
    }
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw IoError("no such file: " + path.string());
    try {
        return nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) { write_file(path, j.dump(2) + "\n"); }

inline ExperimentConfig load_experiment(const std::filesystem::path& path) { return experiment_from_json(read_json(path)); }

}  // namespace m4oe
