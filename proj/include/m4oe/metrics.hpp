#pragma once

// Overlap metrics and corpus evaluation.
//
// Per-class scores in an EvalResult pool every pixel of a modality before
// dividing (one confusion count per class), rather than averaging per-sample
// ratios; small objects absent from a sample then cannot dominate a mean.

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "m4oe/heads.hpp"
#include "m4oe/model.hpp"
#include "m4oe/synth.hpp"

namespace m4oe {

struct OverlapCounts {
    std::size_t intersection = 0;
    std::size_t pred = 0;
    std::size_t truth = 0;

    void add(const OverlapCounts& o) {
        intersection += o.intersection;
        pred += o.pred;
        truth += o.truth;
    }
};

inline OverlapCounts overlap(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth,
                             std::size_t cls) {
    if (pred.size() != truth.size())
        throw DimensionError("metric: mask sizes " + std::to_string(pred.size()) + " and " + std::to_string(truth.size()));
    OverlapCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] == cls, t = truth[i] == cls;
        c.pred += p;
        c.truth += t;
        c.intersection += p && t;
    }
    return c;
}

/// Value reported when neither mask contains the class.
struct EmptyConvention {
    double value = 1.0;
};

inline double dice(const OverlapCounts& c, EmptyConvention e = {}) {
    if (c.pred + c.truth == 0) return e.value;
    return 2.0 * static_cast<double>(c.intersection) / static_cast<double>(c.pred + c.truth);
}

inline double iou(const OverlapCounts& c, EmptyConvention e = {}) {
    const std::size_t uni = c.pred + c.truth - c.intersection;
    if (uni == 0) return e.value;
    return static_cast<double>(c.intersection) / static_cast<double>(uni);
}

inline double dice(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth, std::size_t cls,
                   EmptyConvention e = {}) {
    return dice(overlap(pred, truth, cls), e);
}

inline double iou(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth, std::size_t cls,
                  EmptyConvention e = {}) {
    return iou(overlap(pred, truth, cls), e);
}

// ------------------------------------------------------------------ reports

struct ClassScore {
    std::size_t class_id = 0;  // global id
    std::string name;
    double dsc = 0.0;
    double iou = 0.0;
    std::size_t truth_pixels = 0;
};

struct ModalityScore {
    std::size_t modality_id = 0;
    std::string name;
    std::size_t samples = 0;
    std::vector<ClassScore> classes;
    double mean_dsc = 0.0;
    double mean_iou = 0.0;
};

struct EvalResult {
    std::vector<ModalityScore> modalities;
    double mean_dsc = 0.0;  // mean of the per-modality means
    double mean_iou = 0.0;
    std::size_t samples = 0;
    bool include_background = false;
};

struct EvalOptions {
    bool include_background = false;
    EmptyConvention empty;
    std::size_t batch_size = 8;
    GateOverride gate;
};

/// Per-modality pooled confusion counts -> scores and means.
inline EvalResult summarize(const std::vector<ModalityDescriptor>& mods,
                            const std::vector<std::vector<OverlapCounts>>& counts,
                            const std::vector<std::size_t>& samples, const LabelSpace* space, const EvalOptions& opt) {
    EvalResult r;
    r.include_background = opt.include_background;
    double dsum = 0, isum = 0;
    std::size_t scored = 0;
    for (std::size_t m = 0; m < mods.size(); ++m) {
        if (samples[m] == 0) continue;
        ModalityScore ms;
        ms.modality_id = mods[m].id;
        ms.name = mods[m].name;
        ms.samples = samples[m];
        double d = 0, u = 0;
        std::size_t n = 0;
        for (std::size_t j = 0; j < mods[m].num_classes(); ++j) {
            ClassScore cs;
            cs.class_id = mods[m].class_ids[j];
            if (space && space->classes().count(cs.class_id)) cs.name = space->classes().at(cs.class_id);
            cs.dsc = dice(counts[m][j], opt.empty);
            cs.iou = iou(counts[m][j], opt.empty);
            cs.truth_pixels = counts[m][j].truth;
            if (j > 0 || opt.include_background) d += cs.dsc, u += cs.iou, ++n;
            ms.classes.push_back(std::move(cs));
        }
        ms.mean_dsc = n ? d / static_cast<double>(n) : 0.0;
        ms.mean_iou = n ? u / static_cast<double>(n) : 0.0;
        dsum += ms.mean_dsc;
        isum += ms.mean_iou;
        ++scored;
        r.samples += ms.samples;
        r.modalities.push_back(std::move(ms));
    }
    r.mean_dsc = scored ? dsum / static_cast<double>(scored) : 0.0;
    r.mean_iou = scored ? isum / static_cast<double>(scored) : 0.0;
    return r;
}

/// Argmax over the selected channels of each sample: [k x H x W] -> H*W.
template <typename T>
std::vector<std::uint8_t> argmax_labels(const Tensor<T>& logits) {
    const std::size_t k = logits.dim(0), P = logits.size() / k;
    std::vector<std::uint8_t> out(P, 0);
    for (std::size_t p = 0; p < P; ++p) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j)
            if (logits[j * P + p] > logits[best * P + p]) best = j;
        out[p] = static_cast<std::uint8_t>(best);
    }
    return out;
}

/// Stacks corpus images [1 x H x W] into a batch tensor.
inline Tensor<float> stack_images(const Corpus& c, const std::vector<std::size_t>& idx) {
    const std::size_t per = c.samples.at(idx.at(0)).image.size();
    Shape s = c.samples[idx[0]].image.shape();
    s.insert(s.begin(), idx.size());
    Tensor<float> out(s);
    for (std::size_t b = 0; b < idx.size(); ++b)
        std::copy(c.samples[idx[b]].image.data().begin(), c.samples[idx[b]].image.data().end(),
                  out.data().begin() + static_cast<std::ptrdiff_t>(b * per));
    return out;
}

/// Segmentation predictions for the given samples, in order.
inline std::vector<std::vector<std::uint8_t>> predict(const ParameterStore<float>& store, const ModelConfig& cfg,
                                                      const LabelSpace& space, const Corpus& corpus,
                                                      const std::vector<std::size_t>& which, const EvalOptions& opt = {}) {
    Binding<float> bind(store, false);
    Scope<float> root(bind);
    ForwardOptions<float> fo;
    fo.gate = opt.gate;
    std::vector<std::vector<std::uint8_t>> out;
    const std::size_t bs = std::max<std::size_t>(1, opt.batch_size);
    for (std::size_t start = 0; start < which.size(); start += bs) {
        std::vector<std::size_t> idx(which.begin() + static_cast<std::ptrdiff_t>(start),
                                     which.begin() + static_cast<std::ptrdiff_t>(std::min(which.size(), start + bs)));
        std::vector<std::size_t> mods;
        for (auto i : idx) mods.push_back(corpus.samples[i].modality);
        auto logits = pad_logits(unet_forward(ad::constant(stack_images(corpus, idx)), cfg, root, fo), space);
        for (const auto& s : select_logits(logits, mods, space)) out.push_back(argmax_labels(s.value()));
    }
    return out;
}

inline EvalResult evaluate(const ParameterStore<float>& store, const ModelConfig& cfg, const LabelSpace& space,
                           const Corpus& corpus, const EvalOptions& opt = {}) {
    std::vector<std::size_t> all(corpus.samples.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const auto preds = predict(store, cfg, space, corpus, all, opt);
    const auto& mods = space.modalities();
    std::vector<std::vector<OverlapCounts>> counts(mods.size());
    std::vector<std::size_t> samples(mods.size(), 0);
    for (std::size_t m = 0; m < mods.size(); ++m) counts[m].resize(mods[m].num_classes());
    for (std::size_t i = 0; i < all.size(); ++i) {
        const auto& s = corpus.samples[i];
        std::size_t m = 0;
        while (m < mods.size() && mods[m].id != s.modality) ++m;
        if (m == mods.size()) throw DataError("eval: sample " + std::to_string(s.id) + " has unregistered modality");
        ++samples[m];
        for (std::size_t j = 0; j < mods[m].num_classes(); ++j) counts[m][j].add(overlap(preds[i], s.mask, j));
    }
    return summarize(mods, counts, samples, &space, opt);
}

inline nlohmann::json to_json(const EvalResult& r) {
    nlohmann::json mods = nlohmann::json::array();
    for (const auto& m : r.modalities) {
        nlohmann::json cls = nlohmann::json::array();
        for (const auto& c : m.classes)
            cls.push_back({{"class_id", c.class_id}, {"name", c.name}, {"dsc", c.dsc}, {"iou", c.iou},
                           {"truth_pixels", c.truth_pixels}});
        mods.push_back({{"modality_id", m.modality_id}, {"name", m.name}, {"samples", m.samples}, {"classes", cls},
                        {"mean_dsc", m.mean_dsc}, {"mean_iou", m.mean_iou}});
    }
    return {{"schema", "m4oe.eval_result.v1"}, {"include_background", r.include_background},
            {"samples", r.samples},           {"mean_dsc", r.mean_dsc},
            {"mean_iou", r.mean_iou},         {"modalities", mods}};
}

}  // namespace m4oe
