#pragma once

// Padded projection head with per-sample channel selection.
//
// The network always emits K_pad logit channels. Each modality owns a subset
// of them (one per class it annotates); a sample only ever sees its own
// modality's channels, so batches may mix modalities freely.

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "m4oe/autodiff.hpp"
#include "m4oe/error.hpp"
#include "m4oe/params.hpp"
#include "m4oe/rng.hpp"

namespace m4oe {

struct ModalityDescriptor {
    std::size_t id = 0;
    std::string name;
    std::vector<std::size_t> class_ids;  // global ids, background (0) first
    std::size_t in_channels = 1;

    std::size_t num_classes() const noexcept { return class_ids.size(); }

    void validate() const {
        const std::string who = "modality '" + name + "'";
        if (class_ids.empty() || class_ids.front() != 0) throw ConfigError(who + ": class_ids must start with 0");
        if (std::set<std::size_t>(class_ids.begin(), class_ids.end()).size() != class_ids.size())
            throw ConfigError(who + ": duplicate class id");
        if (in_channels == 0) throw ConfigError(who + ": in_channels must be positive");
    }

    friend bool operator==(const ModalityDescriptor&, const ModalityDescriptor&) = default;
};

/// How global classes map to padded channels.
///  shared:   a class keeps one channel in every modality that annotates it;
///            channels are reused between classes that never co-occur.
///  disjoint: channel = position in the modality's class list; nothing is
///            shared beyond background.
enum class ChannelAssignment { shared, disjoint };

inline const char* to_string(ChannelAssignment a) { return a == ChannelAssignment::shared ? "shared" : "disjoint"; }

inline ChannelAssignment parse_assignment(const std::string& s) {
    if (s == "shared") return ChannelAssignment::shared;
    if (s == "disjoint") return ChannelAssignment::disjoint;
    throw ConfigError("unknown channel assignment '" + s + "' (expected shared|disjoint)");
}

class LabelSpace {
public:
    explicit LabelSpace(ChannelAssignment mode = ChannelAssignment::shared) : mode_(mode) {}

    void add_class(std::size_t id, std::string name) {
        if (classes_.count(id)) throw ConfigError("class id " + std::to_string(id) + " registered twice");
        classes_[id] = std::move(name);
    }

    /// Registers a modality and recomputes the channel map. Existing
    /// modalities keep their channels whenever possible (they always do in
    /// disjoint mode, and in shared mode unless the new classes force a
    /// re-colouring).
    void add_modality(ModalityDescriptor m) {
        m.validate();
        for (const auto& other : modalities_)
            if (other.id == m.id) throw ConfigError("modality id " + std::to_string(m.id) + " registered twice");
        for (auto c : m.class_ids)
            if (!classes_.count(c))
                throw ConfigError("modality '" + m.name + "' uses unregistered class id " + std::to_string(c));
        modalities_.push_back(std::move(m));
        try {
            assign();
        } catch (const ConfigError&) {
            modalities_.pop_back();
            assign();
            throw;
        }
    }

    ChannelAssignment mode() const noexcept { return mode_; }
    std::size_t k_pad() const noexcept { return k_pad_; }
    const std::map<std::size_t, std::string>& classes() const noexcept { return classes_; }
    const std::vector<ModalityDescriptor>& modalities() const noexcept { return modalities_; }

    const ModalityDescriptor& modality(std::size_t id) const { return modalities_.at(position(id)); }

    /// Padded channels of modality `id`, in class_ids order.
    const std::vector<std::size_t>& selection(std::size_t id) const { return selection_.at(position(id)); }

    /// Channel a global class occupies (shared mode), if any modality has it.
    std::optional<std::size_t> channel_of_class(std::size_t class_id) const {
        auto it = class_channel_.find(class_id);
        if (it == class_channel_.end()) return std::nullopt;
        return it->second;
    }

    friend bool operator==(const LabelSpace& a, const LabelSpace& b) {
        return a.mode_ == b.mode_ && a.classes_ == b.classes_ && a.modalities_ == b.modalities_;
    }

private:
    std::size_t position(std::size_t id) const {
        for (std::size_t i = 0; i < modalities_.size(); ++i)
            if (modalities_[i].id == id) return i;
        throw ConfigError("unknown modality id " + std::to_string(id));
    }

    void assign() {
        selection_.assign(modalities_.size(), {});
        class_channel_.clear();
        std::size_t widest = 0;
        for (const auto& m : modalities_) widest = std::max(widest, m.num_classes());

        if (mode_ == ChannelAssignment::disjoint) {
            for (std::size_t i = 0; i < modalities_.size(); ++i)
                for (std::size_t j = 0; j < modalities_[i].num_classes(); ++j) selection_[i].push_back(j);
            k_pad_ = widest;
            return;
        }

        // Greedy colouring of the co-occurrence graph in ascending class id.
        std::map<std::size_t, std::set<std::size_t>> conflicts;
        for (const auto& m : modalities_)
            for (auto a : m.class_ids)
                for (auto b : m.class_ids)
                    if (a != b) conflicts[a].insert(b);
        std::size_t used = 0;
        for (const auto& [cls, others] : conflicts) {
            std::set<std::size_t> taken;
            for (auto o : others)
                if (auto it = class_channel_.find(o); it != class_channel_.end()) taken.insert(it->second);
            std::size_t ch = 0;
            while (taken.count(ch)) ++ch;
            class_channel_[cls] = ch;
            used = std::max(used, ch + 1);
        }
        for (std::size_t i = 0; i < modalities_.size(); ++i)
            for (auto c : modalities_[i].class_ids) selection_[i].push_back(class_channel_.count(c) ? class_channel_[c] : 0);
        if (used > widest)
            throw ConfigError("shared channel assignment needs " + std::to_string(used) + " channels but the widest "
                              "modality has " + std::to_string(widest) + " classes; use disjoint assignment");
        k_pad_ = widest;
    }

    ChannelAssignment mode_;
    std::map<std::size_t, std::string> classes_;
    std::vector<ModalityDescriptor> modalities_;
    std::vector<std::vector<std::size_t>> selection_;
    std::map<std::size_t, std::size_t> class_channel_;
    std::size_t k_pad_ = 0;
};

/// Contract seam: the head is already sized to K_pad, so padding is the
/// identity once the channel count checks out.
template <typename T>
ad::Var<T> pad_logits(const ad::Var<T>& raw, const LabelSpace& space) {
    const auto& s = raw.shape();
    if (s.size() != 4 || s[1] != space.k_pad())
        throw DimensionError("pad_logits: logits " + to_string(s) + " but K_pad is " + std::to_string(space.k_pad()));
    return raw;
}

/// Per-sample [k_i x H x W] logits for the channels of each sample's modality.
template <typename T>
std::vector<ad::Var<T>> select_logits(const ad::Var<T>& padded, const std::vector<std::size_t>& modality_ids,
                                      const LabelSpace& space) {
    const auto& s = padded.shape();
    if (s.size() != 4 || s[0] != modality_ids.size())
        throw DimensionError("select_logits: logits " + to_string(s) + " for " + std::to_string(modality_ids.size()) +
                             " samples");
    const std::size_t K = s[1], P = s[2] * s[3];
    std::vector<ad::Var<T>> out;
    out.reserve(modality_ids.size());
    for (std::size_t b = 0; b < modality_ids.size(); ++b) {
        const auto& sel = space.selection(modality_ids[b]);
        auto idx = std::make_shared<std::vector<std::size_t>>(sel.size() * P);
        for (std::size_t j = 0; j < sel.size(); ++j) {
            if (sel[j] >= K) throw DimensionError("select_logits: channel " + std::to_string(sel[j]) + " >= " + std::to_string(K));
            for (std::size_t p = 0; p < P; ++p) (*idx)[j * P + p] = (b * K + sel[j]) * P + p;
        }
        out.push_back(ad::gather(padded, ad::IndexMap(idx), Shape{sel.size(), s[2], s[3]}));
    }
    return out;
}

struct LossOptions {
    bool dice_includes_background = false;
    double dice_smooth = 1.0;
};

/// (cross-entropy + soft Dice loss) / 2 for one sample. `logits` is
/// [k x H x W]; `labels` holds H*W local class indices.
template <typename T>
ad::Var<T> sample_loss(const ad::Var<T>& logits, const std::vector<std::uint8_t>& labels, std::size_t sample,
                       const LossOptions& opt = {}) {
    const auto& s = logits.shape();
    if (s.size() != 3) throw DimensionError("loss: logits must be [k x H x W], got " + to_string(s));
    const std::size_t k = s[0], P = s[1] * s[2];
    if (labels.size() != P)
        throw DimensionError("loss: sample " + std::to_string(sample) + " has " + std::to_string(labels.size()) +
                             " labels for " + std::to_string(P) + " pixels");
    const auto bad = static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [k](auto v) { return v >= k; }));
    if (bad)
        throw DataError("loss: sample " + std::to_string(sample) + " has " + std::to_string(bad) +
                        " pixels with label >= " + std::to_string(k));

    auto to_last = std::make_shared<std::vector<std::size_t>>(k * P);
    for (std::size_t p = 0; p < P; ++p)
        for (std::size_t j = 0; j < k; ++j) (*to_last)[p * k + j] = j * P + p;
    auto pix = ad::gather(logits, ad::IndexMap(to_last), Shape{P, k});  // [P x k]

    auto pick = std::make_shared<std::vector<std::size_t>>(P);
    Tensor<T> onehot(Shape{P, k});
    Tensor<T> counts(Shape{k});
    for (std::size_t p = 0; p < P; ++p) {
        (*pick)[p] = p * k + labels[p];
        onehot[p * k + labels[p]] = T{1};
        counts[labels[p]] += T{1};
    }
    auto ce = ad::scale(ad::mean(ad::gather(ad::log_softmax(pix), ad::IndexMap(pick), Shape{P})), T{-1});

    const std::size_t first = opt.dice_includes_background ? 0 : 1;
    if (first >= k) return ad::scale(ce, T{0.5});
    auto prob = ad::softmax(pix);
    const T sm = static_cast<T>(opt.dice_smooth);
    auto inter = ad::column_sum(ad::mul(prob, ad::constant(std::move(onehot))));
    auto num = ad::add_scalar(ad::scale(inter, T{2}), sm);
    auto den = ad::add(ad::add_scalar(ad::column_sum(prob), sm), ad::constant(std::move(counts)));
    auto dice = ad::div(num, den);  // [k]
    auto keep = std::make_shared<std::vector<std::size_t>>();
    for (std::size_t j = first; j < k; ++j) keep->push_back(j);
    const std::size_t n = keep->size();
    auto mean_dice = ad::mean(ad::gather(dice, ad::IndexMap(keep), Shape{n}));
    auto dice_loss = ad::add_scalar(ad::scale(mean_dice, T{-1}), T{1});
    return ad::scale(ad::add(ce, dice_loss), T{0.5});
}

/// Mean of sample_loss over the batch.
template <typename T>
ad::Var<T> masked_loss(const std::vector<ad::Var<T>>& selected, const std::vector<std::vector<std::uint8_t>>& labels,
                       const LossOptions& opt = {}) {
    if (selected.empty() || selected.size() != labels.size())
        throw DimensionError("loss: " + std::to_string(selected.size()) + " logit maps for " +
                             std::to_string(labels.size()) + " label maps");
    ad::Var<T> total;
    for (std::size_t b = 0; b < selected.size(); ++b) {
        auto l = sample_loss(selected[b], labels[b], b, opt);
        total = total ? ad::add(total, l) : l;
    }
    return ad::scale(total, static_cast<T>(1.0 / static_cast<double>(selected.size())));
}

/// Grows the head to `k_new` rows, keeping existing rows bit-exact. Returns
/// the number of parameters added.
template <typename T>
std::size_t extend_head(ParameterStore<T>& store, std::size_t k_new, std::uint64_t seed, const std::string& prefix = "head") {
    auto& w = store.at(prefix + ".w").value;
    auto& b = store.at(prefix + ".b").value;
    const std::size_t k_old = w.dim(0), C = w.dim(1);
    if (k_new <= k_old) return 0;
    Rng rng(seed);
    Tensor<T> w2(Shape{k_new, C}), b2(Shape{k_new});
    std::copy(w.data().begin(), w.data().end(), w2.data().begin());
    std::copy(b.data().begin(), b.data().end(), b2.data().begin());
    for (std::size_t i = k_old * C; i < k_new * C; ++i) w2[i] = static_cast<T>(rng.truncated_normal(0.02));
    w = std::move(w2);
    b = std::move(b2);
    store.at(prefix + ".w").grad = Tensor<T>();
    store.at(prefix + ".b").grad = Tensor<T>();
    return (k_new - k_old) * (C + 1);
}

/// The three synthetic modalities over classes background, liver, kidney,
/// spleen, pancreas and tumour: class counts 4, 5 and 3.
inline LabelSpace default_label_space(ChannelAssignment mode = ChannelAssignment::shared) {
    LabelSpace s(mode);
    s.add_class(0, "background");
    s.add_class(1, "liver");
    s.add_class(2, "kidney");
    s.add_class(3, "spleen");
    s.add_class(4, "pancreas");
    s.add_class(5, "tumor");
    s.add_modality({0, "CT", {0, 1, 2, 3}, 1});
    s.add_modality({1, "MRI", {0, 1, 2, 3, 4}, 1});
    s.add_modality({2, "CE-MRI", {0, 1, 5}, 1});
    return s;
}

}  // namespace m4oe
