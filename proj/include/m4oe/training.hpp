#pragma once

// Two-phase training.
//
// Phase 1: per modality, a single-expert encoder learns masked-patch
// reconstruction; the MLP of every encoder block is that modality's expert.
// Assembly: expert slot i of every encoder MoE site gets modality i's MLP,
// the remaining encoder weights are merged across modalities, gates start at
// zero (uniform routing) and the decoder and head are fresh.
// Phase 2: the whole network is fine-tuned on mixed-modality batches.

#include <chrono>
#include <functional>
#include <numeric>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "m4oe/accounting.hpp"
#include "m4oe/experiment.hpp"
#include "m4oe/heads.hpp"
#include "m4oe/metrics.hpp"
#include "m4oe/model.hpp"
#include "m4oe/optim.hpp"
#include "m4oe/synth.hpp"

namespace m4oe {

using Logger = std::function<void(const std::string&)>;

namespace stream {
// Tags separating the random streams drawn from the experiment seed.
inline constexpr std::uint64_t phase1_init = 101, phase1_order = 102, phase1_mask = 103, probe_mask = 104,
                               assemble_init = 201, phase2_order = 202;
}  // namespace stream

// ------------------------------------------------------------------ phase 1

inline std::vector<ParamSpec> phase1_param_specs(const ExperimentConfig& cfg) {
    const auto m = cfg.phase1_model();
    auto specs = encoder_param_specs(m);
    auto mae = mae_param_specs(m);
    specs.insert(specs.end(), mae.begin(), mae.end());
    return specs;
}

/// Per-sample token masks: exactly round(ratio * L) hidden tokens each.
inline std::vector<std::uint8_t> random_token_mask(std::size_t batch, std::size_t tokens, double ratio, Rng& rng) {
    const auto hidden = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(tokens)));
    std::vector<std::uint8_t> out(batch * tokens, 0);
    std::vector<std::size_t> order(tokens);
    for (std::size_t b = 0; b < batch; ++b) {
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order.begin(), order.end());
        for (std::size_t i = 0; i < hidden; ++i) out[b * tokens + order[i]] = 1;
    }
    return out;
}

/// Mean squared reconstruction error over the pixels of hidden patches.
/// Returns an empty Var when nothing is hidden.
template <typename T>
ad::Var<T> mae_loss(const Tensor<T>& images, const std::vector<std::uint8_t>& masked, const ModelConfig& model,
                    const Scope<T>& root, bool norm_pix) {
    const auto& bb = model.backbone;
    const std::size_t B = images.dim(0), C = images.dim(1), H = bb.img_size, p = bb.patch_size, g = H / p;
    std::size_t hidden = 0;
    for (auto m : masked) hidden += m;
    if (hidden == 0) return {};

    Tensor<T> target = images;
    if (norm_pix) {
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t ty = 0; ty < g; ++ty)
                    for (std::size_t tx = 0; tx < g; ++tx) {
                        double mean = 0, var = 0;
                        auto at = [&](std::size_t i, std::size_t j) -> T& {
                            return target[((b * C + c) * H + ty * p + i) * H + tx * p + j];
                        };
                        for (std::size_t i = 0; i < p; ++i)
                            for (std::size_t j = 0; j < p; ++j) mean += at(i, j);
                        mean /= static_cast<double>(p * p);
                        for (std::size_t i = 0; i < p; ++i)
                            for (std::size_t j = 0; j < p; ++j) var += (at(i, j) - mean) * (at(i, j) - mean);
                        var /= static_cast<double>(p * p);
                        const double inv = 1.0 / std::sqrt(var + 1e-6);
                        for (std::size_t i = 0; i < p; ++i)
                            for (std::size_t j = 0; j < p; ++j) at(i, j) = static_cast<T>((at(i, j) - mean) * inv);
                    }
    }
    Tensor<T> weight(images.shape());
    const T w = static_cast<T>(1.0 / static_cast<double>(hidden * C * p * p));
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < H; ++x)
                    if (masked[b * g * g + (y / p) * g + x / p]) weight[((b * C + c) * H + y) * H + x] = w;

    auto pred = mae_forward(ad::constant(images), masked, model, root);
    auto diff = ad::sub(pred, ad::constant(std::move(target)));
    return ad::sum(ad::mul(ad::mul(diff, diff), ad::constant(std::move(weight))));
}

struct Phase1Result {
    std::size_t modality_id = 0;
    ParameterStore<float> store;
    std::vector<double> losses;  // per-epoch training mean
    double initial_loss = 0.0;   // probe loss before / after training, same masks
    double final_loss = 0.0;
    std::size_t steps = 0;
};

/// Reconstruction loss on every sample of `idx` under fixed probe masks.
inline double mae_probe_loss(const ParameterStore<float>& store, const ExperimentConfig& cfg, const Corpus& corpus,
                             const std::vector<std::size_t>& idx, std::size_t modality_id) {
    const auto model = cfg.phase1_model();
    const std::size_t L = model.backbone.grid(0) * model.backbone.grid(0);
    Binding<float> bind(store, false);
    Rng rng(derive_seed(cfg.seed, stream::probe_mask, modality_id));
    double total = 0;
    std::size_t n = 0;
    for (std::size_t start = 0; start < idx.size(); start += cfg.phase1.batch_size) {
        std::vector<std::size_t> batch(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                       idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), start + cfg.phase1.batch_size)));
        auto masks = random_token_mask(batch.size(), L, cfg.phase1.mask_ratio, rng);
        auto loss = mae_loss(stack_images(corpus, batch), masks, model, Scope<float>(bind), cfg.phase1.norm_pix_loss);
        total += (loss ? loss.value().item() : 0.0) * static_cast<double>(batch.size());
        n += batch.size();
    }
    return n ? total / static_cast<double>(n) : 0.0;
}

inline Phase1Result phase1_pretrain(const ExperimentConfig& cfg, const Corpus& corpus, std::size_t modality_id,
                                    const Logger& log = {}) {
    cfg.validate();
    const auto idx = corpus.indices_of(modality_id);
    if (idx.empty()) throw DataError("phase 1: corpus has no samples of modality " + std::to_string(modality_id));
    const auto model = cfg.phase1_model();
    if (corpus.img_size != model.backbone.img_size)
        throw DataError("phase 1: corpus images are " + std::to_string(corpus.img_size) + " px, model expects " +
                        std::to_string(model.backbone.img_size));
    const std::size_t L = model.backbone.grid(0) * model.backbone.grid(0);

    Phase1Result r;
    r.modality_id = modality_id;
    r.store = init_parameters<float>(phase1_param_specs(cfg), derive_seed(cfg.seed, stream::phase1_init, modality_id));
    r.initial_loss = mae_probe_loss(r.store, cfg, corpus, idx, modality_id);
    AdamW<float> opt({.lr = cfg.phase1.lr, .weight_decay = cfg.phase1.weight_decay});
    Rng mask_rng(derive_seed(cfg.seed, stream::phase1_mask, modality_id));
    for (std::size_t epoch = 0; epoch < cfg.phase1.epochs; ++epoch) {
        auto order = idx;
        Rng(derive_seed(cfg.seed, stream::phase1_order, (modality_id << 32) | epoch)).shuffle(order.begin(), order.end());
        double total = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.phase1.batch_size) {
            std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + cfg.phase1.batch_size)));
            auto masks = random_token_mask(batch.size(), L, cfg.phase1.mask_ratio, mask_rng);
            r.store.zero_grad();
            Binding<float> bind(r.store, true);
            auto loss = mae_loss(stack_images(corpus, batch), masks, model, Scope<float>(bind), cfg.phase1.norm_pix_loss);
            if (!loss) continue;  // nothing hidden: the loss is identically zero
            if (!loss.value().all_finite()) throw NumericError("phase 1: non-finite loss at epoch " + std::to_string(epoch));
            ad::backward(loss);
            bind.accumulate_into(r.store);
            opt.step(r.store);
            ++r.steps;
            total += loss.value().item() * static_cast<double>(batch.size());
        }
        r.losses.push_back(total / static_cast<double>(order.size()));
        if (log) {
            std::ostringstream os;
            os << "phase1 modality " << modality_id << " epoch " << epoch + 1 << "/" << cfg.phase1.epochs
               << " loss " << r.losses.back();
            log(os.str());
        }
    }
    r.final_loss = mae_probe_loss(r.store, cfg, corpus, idx, modality_id);
    return r;
}

// ------------------------------------------------------------------ assembly

/// Throws ConfigError unless `store` holds exactly the tensors in `specs`.
template <typename T>
void require_layout(const ParameterStore<T>& store, const std::vector<ParamSpec>& specs, const std::string& what) {
    if (store.size() != specs.size())
        throw ConfigError(what + " has " + std::to_string(store.size()) + " tensors, expected " +
                          std::to_string(specs.size()));
    for (const auto& s : specs) {
        if (!store.contains(s.name)) throw ConfigError(what + " lacks '" + s.name + "'");
        if (store.at(s.name).value.shape() != s.shape)
            throw ConfigError(what + " '" + s.name + "' has shape " + to_string(store.at(s.name).value.shape()) +
                              ", expected " + to_string(s.shape));
    }
}

/// Builds the phase-2 network from per-modality phase-1 stores (slot i =
/// phase1[i]).
inline ParameterStore<float> assemble_moe(const std::vector<ParameterStore<float>>& phase1, const ExperimentConfig& cfg,
                                          const ModelConfig& model) {
    model.validate();
    if (phase1.size() != model.num_experts)
        throw ConfigError("assemble: " + std::to_string(phase1.size()) + " phase-1 checkpoints for " +
                          std::to_string(model.num_experts) + " experts");
    const auto expected = phase1_param_specs(cfg);
    for (std::size_t i = 0; i < phase1.size(); ++i) require_layout(phase1[i], expected, "assemble: checkpoint " + std::to_string(i));

    auto merged = [&](const std::string& name) {
        if (cfg.shared_merge == SharedMerge::take_first) return phase1[0].at(name).value;
        const auto& first = phase1[0].at(name).value;
        Tensor<float> out(first.shape());
        for (std::size_t k = 0; k < out.size(); ++k) {
            double s = 0;
            for (const auto& p : phase1) s += p.at(name).value[k];
            out[k] = static_cast<float>(s / static_cast<double>(phase1.size()));
        }
        return out;
    };

    static const std::regex expert_re(R"((enc\..*)\.moe\.expert(\d+)\.(w_h|b_h|w_o|b_o))");
    auto fresh = init_parameters<float>(model_param_specs(model), derive_seed(cfg.seed, stream::assemble_init));
    ParameterStore<float> out;
    for (const auto& p : fresh.params()) {
        std::smatch m;
        if (p.name.find(".moe.gate.") != std::string::npos) {
            out.add(p.name, Tensor<float>(p.value.shape(), 0.0f));
        } else if (std::regex_match(p.name, m, expert_re)) {
            const auto slot = std::stoul(m[2].str());
            out.add(p.name, phase1[slot].at(m[1].str() + ".mlp." + m[3].str()).value);
        } else if (p.name.rfind("enc.", 0) == 0 || p.name.rfind("embed.", 0) == 0) {
            out.add(p.name, merged(p.name));
        } else {
            out.add(p.name, p.value);  // decoder, final expansion, head
        }
    }
    return out;
}

// ------------------------------------------------------------------ phase 2

struct Phase2Result {
    ParameterStore<float> store;
    std::vector<double> losses;
    std::vector<std::string> warnings;
    std::size_t steps = 0;
};

/// Mean masked loss of one batch of corpus samples (graph left attached).
inline ad::Var<float> segmentation_loss(const Binding<float>& bind, const ModelConfig& model, const LabelSpace& space,
                                        const Corpus& corpus, const std::vector<std::size_t>& batch,
                                        const LossOptions& opt) {
    std::vector<std::size_t> mods;
    std::vector<std::vector<std::uint8_t>> labels;
    for (auto i : batch) {
        mods.push_back(corpus.samples[i].modality);
        labels.push_back(corpus.samples[i].mask);
    }
    auto logits = pad_logits(unet_forward(ad::constant(stack_images(corpus, batch)), model, Scope<float>(bind)), space);
    return masked_loss(select_logits(logits, mods, space), labels, opt);
}

inline Phase2Result phase2_finetune(ParameterStore<float> store, const ExperimentConfig& cfg, const ModelConfig& model,
                                    const Corpus& corpus, const Logger& log = {}) {
    const auto space = cfg.label_space();
    if (model.num_classes != space.k_pad())
        throw ConfigError("phase 2: head has " + std::to_string(model.num_classes) + " rows but K_pad is " +
                          std::to_string(space.k_pad()));
    if (corpus.img_size != model.backbone.img_size)
        throw DataError("phase 2: corpus images are " + std::to_string(corpus.img_size) + " px, model expects " +
                        std::to_string(model.backbone.img_size));
    if (corpus.samples.empty()) throw DataError("phase 2: empty corpus");
    Phase2Result r;
    for (const auto& m : space.modalities())
        if (corpus.indices_of(m.id).empty()) r.warnings.push_back("corpus has no samples of modality '" + m.name + "'");
    for (const auto& w : r.warnings)
        if (log) log("warning: " + w);

    AdamW<float> opt({.lr = cfg.phase2.lr, .weight_decay = cfg.phase2.weight_decay});
    std::vector<std::size_t> all(corpus.samples.size());
    std::iota(all.begin(), all.end(), 0);
    for (std::size_t epoch = 0; epoch < cfg.phase2.epochs; ++epoch) {
        auto order = all;
        Rng(derive_seed(cfg.seed, stream::phase2_order, epoch)).shuffle(order.begin(), order.end());
        double total = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.phase2.batch_size) {
            std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + cfg.phase2.batch_size)));
            store.zero_grad();
            Binding<float> bind(store, true);
            auto loss = segmentation_loss(bind, model, space, corpus, batch, cfg.loss);
            if (!loss.value().all_finite()) throw NumericError("phase 2: non-finite loss at epoch " + std::to_string(epoch));
            ad::backward(loss);
            bind.accumulate_into(store);
            opt.step(store);
            ++r.steps;
            total += loss.value().item() * static_cast<double>(batch.size());
        }
        r.losses.push_back(total / static_cast<double>(order.size()));
        if (log) {
            std::ostringstream os;
            os << "phase2 epoch " << epoch + 1 << "/" << cfg.phase2.epochs << " loss " << r.losses.back();
            log(os.str());
        }
    }
    r.store = std::move(store);
    return r;
}

// ------------------------------------------------------------------ reports

struct Phase1Summary {
    std::size_t modality_id = 0;
    std::string name;
    std::vector<double> losses;
    double initial_loss = 0.0;
    double final_loss = 0.0;
};

struct TrainReport {
    std::uint64_t seed = 0;
    std::string placement;
    bool gating = true;
    std::vector<Phase1Summary> phase1;
    std::vector<double> phase2_losses;
    EvalResult eval;
    ParamBreakdown params;
    std::vector<std::string> warnings;
    double wall_seconds = 0.0;
};

inline nlohmann::json to_json(const ParamBreakdown& b) {
    return {{"total", b.total()}, {"attention", b.attention}, {"mlp", b.mlp}, {"experts", b.experts},
            {"gating", b.gating}, {"heads", b.heads},         {"other", b.other}};
}

/// `timing` = false drops the wall-clock field, leaving only quantities that
/// are a pure function of the seed.
inline nlohmann::json to_json(const TrainReport& r, bool timing = true) {
    nlohmann::json p1 = nlohmann::json::array();
    for (const auto& s : r.phase1)
        p1.push_back({{"modality_id", s.modality_id}, {"name", s.name}, {"losses", s.losses},
                      {"initial_loss", s.initial_loss}, {"final_loss", s.final_loss}});
    nlohmann::json j{{"seed", r.seed},
                     {"placement", r.placement},
                     {"gating", r.gating},
                     {"phase1", p1},
                     {"phase2_losses", r.phase2_losses},
                     {"eval", to_json(r.eval)},
                     {"params", to_json(r.params)},
                     {"warnings", r.warnings}};
    if (timing) j["wall_seconds"] = r.wall_seconds;
    return j;
}

/// Long-form loss curves: phase,modality,epoch,loss.
inline std::string loss_csv(const TrainReport& r) {
    std::ostringstream os;
    os.precision(17);
    os << "phase,modality,epoch,loss\n";
    for (const auto& s : r.phase1)
        for (std::size_t e = 0; e < s.losses.size(); ++e) os << "1," << s.modality_id << "," << e + 1 << "," << s.losses[e] << "\n";
    for (std::size_t e = 0; e < r.phase2_losses.size(); ++e) os << "2,," << e + 1 << "," << r.phase2_losses[e] << "\n";
    return os.str();
}

// ------------------------------------------------------------------ whole runs

struct PipelineResult {
    std::vector<Phase1Result> phase1;
    ParameterStore<float> assembled;
    Phase2Result phase2;
    TrainReport report;
};

inline std::vector<Phase1Result> pretrain_all(const ExperimentConfig& cfg, const Corpus& corpus, const Logger& log = {}) {
    std::vector<Phase1Result> out;
    for (const auto& m : cfg.modalities) out.push_back(phase1_pretrain(cfg, corpus, m.id, log));
    return out;
}

/// Assembly, fine-tuning and evaluation for one placement/gating variant on
/// top of existing phase-1 results.
inline PipelineResult finish_pipeline(const ExperimentConfig& cfg, const std::vector<Phase1Result>& p1,
                                      const ModelConfig& model, const Corpus& corpus, const Corpus& eval_corpus,
                                      const Logger& log = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    PipelineResult r;
    r.phase1 = p1;
    std::vector<ParameterStore<float>> stores;
    for (const auto& p : p1) stores.push_back(p.store);
    r.assembled = assemble_moe(stores, cfg, model);
    r.phase2 = phase2_finetune(r.assembled, cfg, model, corpus, log);

    auto& rep = r.report;
    rep.seed = cfg.seed;
    rep.placement = to_string(model.placement);
    rep.gating = model.gating;
    for (const auto& p : p1)
        rep.phase1.push_back({p.modality_id, cfg.label_space().modality(p.modality_id).name, p.losses, p.initial_loss,
                              p.final_loss});
    rep.phase2_losses = r.phase2.losses;
    EvalOptions eo;
    eo.include_background = cfg.eval_include_background;
    rep.eval = evaluate(r.phase2.store, model, cfg.label_space(), eval_corpus, eo);
    rep.params = count_params(r.phase2.store);
    rep.warnings = r.phase2.warnings;
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

inline PipelineResult run_pipeline(const ExperimentConfig& cfg, const Corpus& corpus, const Corpus& eval_corpus,
                                   const Logger& log = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    auto p1 = pretrain_all(cfg, corpus, log);
    auto r = finish_pipeline(cfg, p1, cfg.model(), corpus, eval_corpus, log);
    r.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

struct AblationVariant {
    MoEPlacement placement = MoEPlacement::both;
    bool gating = true;
};

inline std::string to_string(const AblationVariant& v) {
    return std::string(to_string(v.placement)) + ":" + (v.gating ? "on" : "off");
}

/// "both:on,none:off,..."; a bare placement means gating on.
inline std::vector<AblationVariant> parse_variants(const std::string& list) {
    std::vector<AblationVariant> out;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        AblationVariant v;
        const auto colon = item.find(':');
        v.placement = parse_placement(item.substr(0, colon));
        if (colon != std::string::npos) {
            const auto g = item.substr(colon + 1);
            if (g == "on") v.gating = true;
            else if (g == "off") v.gating = false;
            else throw ConfigError("variant '" + item + "': gating must be on or off");
        }
        out.push_back(v);
    }
    if (out.empty()) throw ConfigError("no ablation variants given");
    return out;
}

struct AblationRow {
    AblationVariant variant;
    TrainReport report;
};

/// Every variant shares the phase-1 results, seed and batch order.
inline std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg, const Corpus& corpus, const Corpus& eval_corpus,
                                             const std::vector<AblationVariant>& variants, const Logger& log = {}) {
    const auto p1 = pretrain_all(cfg, corpus, log);
    std::vector<AblationRow> rows;
    for (const auto& v : variants) {
        if (log) log("variant " + to_string(v));
        rows.push_back({v, finish_pipeline(cfg, p1, cfg.model(v.placement, v.gating), corpus, eval_corpus, log).report});
    }
    return rows;
}

inline nlohmann::json to_json(const std::vector<AblationRow>& rows, bool timing = true) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : rows)
        out.push_back({{"variant", to_string(r.variant)},
                       {"placement", to_string(r.variant.placement)},
                       {"gating", r.variant.gating},
                       {"mean_dsc", r.report.eval.mean_dsc},
                       {"mean_iou", r.report.eval.mean_iou},
                       {"report", to_json(r.report, timing)}});
    return out;
}

}  // namespace m4oe
