// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any
// fails. `acceptance 2 4` runs a subset.

#include <chrono>
#include <cstring>
#include <map>
#include <optional>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>

#include "gradient_cases.hpp"
#include "m4oe/training.hpp"

using namespace m4oe;
using m4oe::testing::random_tensor;

namespace {

using Clock = std::chrono::steady_clock;
template <typename T>
using Trace = std::map<std::string, Tensor<T>>;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    // Records a failed check; keeps the first few messages.
    void fail(const std::string& why) {
        if (pass || failures < 3) detail << (detail.tellp() > 0 ? "; " : "") << why;
        pass = false;
        ++failures;
    }
    void note(const std::string& s) {
        if (pass) detail << (detail.tellp() > 0 ? "; " : "") << s;
    }
    int failures = 0;
};

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) return INFINITY;
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

bool bit_equal(const Tensor<float>& a, const Tensor<float>& b) {
    return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(float)) == 0;
}

// ------------------------------------------------------------------ 1

ModelConfig tiniest(MoEPlacement placement) {
    ModelConfig m;
    m.backbone.img_size = 8;
    m.backbone.patch_size = 2;
    m.backbone.window_size = 2;
    m.backbone.embed_dim = 4;
    m.backbone.depths = {2, 2};
    m.backbone.num_heads = {1, 2};
    m.mlp_ratio = 2.0;
    m.num_experts = 2;
    m.placement = placement;
    m.num_classes = 3;
    return m;
}

void gradients(Outcome& o) {
    const auto t0 = Clock::now();
    double worst_prim = 0;
    std::size_t checked = 0;
    for (const auto& c : m4oe::testing::primitive_cases())
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            Rng rng(derive_seed(seed, 17));
            auto r = m4oe::testing::check_gradients(c.f, c.inputs(rng));
            worst_prim = std::max(worst_prim, r.worst);
            ++checked;
            if (!r.ok(1e-3)) o.fail(std::string(c.name) + " seed " + std::to_string(seed) + ": " + r.where);
        }

    // Full network (encoder, decoder, MoE sites, head) through the masked
    // segmentation loss, every parameter element, double precision.
    double worst_model = 0;
    const auto cfg = tiniest(MoEPlacement::both);
    LabelSpace space(ChannelAssignment::shared);
    for (std::size_t c = 0; c < 3; ++c) space.add_class(c, "c" + std::to_string(c));
    space.add_modality({0, "A", {0, 1, 2}, 1});
    space.add_modality({1, "B", {0, 2}, 1});
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto store = init_parameters<double>(model_param_specs(cfg), derive_seed(seed, 31));
        Rng rng(derive_seed(seed, 32));
        for (auto& p : store.params())
            for (auto& v : p.value.data()) v += rng.uniform(-0.3, 0.3);
        const auto img = random_tensor(Shape{2, 1, 8, 8}, rng);
        std::vector<std::vector<std::uint8_t>> labels(2, std::vector<std::uint8_t>(64));
        for (auto& v : labels[0]) v = static_cast<std::uint8_t>(rng.below(3));
        for (auto& v : labels[1]) v = static_cast<std::uint8_t>(rng.below(2));
        auto r = m4oe::testing::check_parameter_gradients(
            store,
            [&](const Binding<double>& b) {
                auto logits = pad_logits(unet_forward(ad::constant(img), cfg, Scope<double>(b)), space);
                return masked_loss(select_logits(logits, {0, 1}, space), labels, LossOptions{});
            },
            1e-5);
        worst_model = std::max(worst_model, r.worst);
        if (!r.ok(1e-2)) o.fail("model seed " + std::to_string(seed) + ": " + r.where);
    }
    const double t = seconds_since(t0);
    if (t >= 120) o.fail("runtime " + fmt(t) + " s >= 120 s");
    o.note(std::to_string(checked) + " primitive checks, worst rel err " + fmt(worst_prim) + "; model worst " +
           fmt(worst_model) + " over 10 seeds; " + fmt(t) + " s");
}

// ------------------------------------------------------------------ 2

template <typename T>
ParameterStore<T> random_moe(const MoEConfig& cfg, Rng& rng) {
    ParameterStore<T> s;
    for (const auto& spec : moe_param_specs("moe", cfg)) {
        const bool g = spec.name.find(".gate.") != std::string::npos;
        s.add(spec.name, random_tensor<T>(spec.shape, rng, g ? -2.0 : -0.5, g ? 2.0 : 0.5));
    }
    return s;
}

template <typename T>
struct MoERun {
    Tensor<T> out, weights;
};

template <typename T>
MoERun<T> run_moe(const ParameterStore<T>& s, const MoEConfig& cfg, const Tensor<T>& x, GateOverride ov = {}) {
    Binding<T> b(s, false);
    ad::Var<T> w;
    auto y = moe_forward(ad::constant(x), cfg, Scope<T>(b).sub("moe"), ov, &w);
    return {y.value(), w.value()};
}

template <typename T>
Tensor<T> run_expert(const ParameterStore<T>& s, std::size_t i, const Tensor<T>& x, ad::GeluKind g) {
    Binding<T> b(s, false);
    return expert_forward(ad::constant(x), Scope<T>(b).sub("moe.expert" + std::to_string(i)), g).value();
}

template <typename T>
bool same_bits(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(T)) == 0;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) return INFINITY;
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// Value invariants are checked in double so they measure the operator rather
// than float rounding; the n = 1 reduction is checked bit-exactly in both.
void gating(Outcome& o) {
    struct C {
        std::size_t n, dim;
        GateGranularity g;
    };
    const std::vector<C> configs{{2, 4, GateGranularity::token},
                                 {3, 8, GateGranularity::token},
                                 {4, 16, GateGranularity::token},
                                 {5, 6, GateGranularity::sample},
                                 {8, 12, GateGranularity::token}};
    double worst_sum = 0, worst_perm = 0, worst_hull = 0;
    double min_w = 1;
    for (std::size_t k = 0; k < configs.size(); ++k) {
        const auto& c = configs[k];
        MoEConfig cfg{.num_experts = c.n, .in_dim = c.dim, .hidden_dim = 2 * c.dim, .granularity = c.g};
        Rng rng(derive_seed(2, k));
        auto s = random_moe<double>(cfg, rng);
        // 1000 tokens: 10 sequences of 100.
        auto x = random_tensor<double>(Shape{10, 100, c.dim}, rng, -3.0, 3.0);
        auto r = run_moe(s, cfg, x);
        for (std::size_t t = 0; t < 1000; ++t) {
            double sum = 0;
            for (std::size_t i = 0; i < c.n; ++i) {
                const double w = r.weights[t * c.n + i];
                min_w = std::min(min_w, w);
                if (!(w > 0)) o.fail("config " + std::to_string(k) + " token " + std::to_string(t) + ": weight " + fmt(w));
                sum += w;
            }
            worst_sum = std::max(worst_sum, std::abs(sum - 1));
        }

        // Convex hull of the expert outputs, per token per channel.
        std::vector<Tensor<double>> e;
        for (std::size_t i = 0; i < c.n; ++i) e.push_back(run_expert(s, i, x, cfg.gelu));
        for (std::size_t q = 0; q < r.out.size(); ++q) {
            double lo = e[0][q], hi = e[0][q];
            for (const auto& t : e) lo = std::min(lo, t[q]), hi = std::max(hi, t[q]);
            worst_hull = std::max({worst_hull, lo - r.out[q], r.out[q] - hi});
        }

        // Relabel experts (and their gate rows) by a random permutation.
        std::vector<std::size_t> perm(c.n);
        std::iota(perm.begin(), perm.end(), 0);
        rng.shuffle(perm.begin(), perm.end());
        auto p = s;
        for (std::size_t i = 0; i < c.n; ++i) {
            for (const char* leaf : {"w_h", "b_h", "w_o", "b_o"})
                p.at("moe.expert" + std::to_string(i) + "." + leaf).value =
                    s.at("moe.expert" + std::to_string(perm[i]) + "." + leaf).value;
            for (std::size_t d = 0; d < c.dim; ++d)
                p.at("moe.gate.w").value[i * c.dim + d] = s.at("moe.gate.w").value[perm[i] * c.dim + d];
            p.at("moe.gate.b").value[i] = s.at("moe.gate.b").value[perm[i]];
        }
        auto rp = run_moe(p, cfg, x);
        worst_perm = std::max(worst_perm, max_abs_diff(rp.out.data(), r.out.data()));
        for (std::size_t t = 0; t < 1000; ++t)
            for (std::size_t i = 0; i < c.n; ++i)
                worst_perm = std::max(worst_perm, std::abs(rp.weights[t * c.n + i] - r.weights[t * c.n + perm[i]]));

        // n = 1 with the gate active is the bare expert.
        MoEConfig one = cfg;
        one.num_experts = 1;
        auto s1 = random_moe<double>(one, rng);
        const auto s1f = s1.cast<float>();
        const auto xf = x.cast<float>();
        if (!same_bits(run_moe(s1, one, x).out, run_expert(s1, 0, x, one.gelu)) ||
            !same_bits(run_moe(s1f, one, xf).out, run_expert(s1f, 0, xf, one.gelu)))
            o.fail("config " + std::to_string(k) + ": n=1 output differs from the expert");
    }
    if (worst_sum > 1e-6) o.fail("row sum error " + fmt(worst_sum));
    if (worst_perm > 1e-6) o.fail("permutation error " + fmt(worst_perm));
    if (worst_hull > 1e-5) o.fail("hull violation " + fmt(worst_hull));
    o.note("5 configs x 1000 tokens: max |sum-1| " + fmt(worst_sum) + ", min weight " + fmt(min_w) +
           ", n=1 bit-exact, permutation err " + fmt(worst_perm) + ", hull excess " + fmt(std::max(0.0, worst_hull)));
}

// ------------------------------------------------------------------ 3

ModelConfig small(MoEPlacement placement, std::size_t experts) {
    ModelConfig m;
    m.backbone.img_size = 16;
    m.backbone.patch_size = 2;
    m.backbone.window_size = 4;
    m.backbone.embed_dim = 8;
    m.backbone.depths = {2, 2};
    m.backbone.num_heads = {1, 2};
    m.num_experts = experts;
    m.placement = placement;
    return m;
}

Tensor<float> forward(const ParameterStore<float>& s, const ModelConfig& cfg, const Tensor<float>& x,
                      const ForwardOptions<float>& opts = {}) {
    Binding<float> b(s, false);
    return unet_forward(ad::constant(x), cfg, Scope<float>(b), opts).value();
}

void reduction(Outcome& o) {
    // A one-expert network at every site (gate live) carrying the plain
    // network's MLP weights must reproduce the plain network exactly.
    const auto plain_cfg = small(MoEPlacement::none, 1);
    auto plain = init_parameters<float>(model_param_specs(plain_cfg), 41);
    Rng rng(41);
    for (auto& p : plain.params())
        for (auto& v : p.value.data()) v += static_cast<float>(rng.uniform(-0.2, 0.2));
    const auto x = random_tensor<float>(Shape{3, 1, 16, 16}, rng);
    const auto y_plain = forward(plain, plain_cfg, x);
    for (auto pl : {MoEPlacement::encoder_only, MoEPlacement::decoder_only, MoEPlacement::both}) {
        const auto cfg = small(pl, 1);
        ParameterStore<float> moe;
        for (const auto& spec : model_param_specs(cfg)) {
            auto name = spec.name;
            if (auto at = name.find(".moe.expert0."); at != std::string::npos) name.replace(at, 13, ".mlp.");
            moe.add(spec.name, plain.contains(name) ? plain.at(name).value : random_tensor<float>(spec.shape, rng));
        }
        if (!bit_equal(forward(moe, cfg, x), y_plain))
            o.fail(std::string(to_string(pl)) + " with one expert differs from the plain network");
    }

    // Zeroed residual branches: every block is the identity, so the network
    // output equals a network whose blocks are absent.
    for (auto pl : {MoEPlacement::none, MoEPlacement::both}) {
        const auto cfg = small(pl, 3);
        auto s = init_parameters<float>(model_param_specs(cfg), 42);
        for (auto& p : s.params()) {
            if (p.name.ends_with("attn.proj.w") || p.name.ends_with("attn.proj.b") || p.name.ends_with(".w_o") ||
                p.name.ends_with(".b_o"))
                p.value.fill(0.0f);
            else if (p.name.find(".block") != std::string::npos)
                for (auto& v : p.value.data()) v += static_cast<float>(rng.uniform(-0.5, 0.5));
        }
        const auto site = ffn_site(cfg, 0, false);
        Binding<float> b(s, false);
        Scope<float> root(b);
        auto in = Activation<float>::wrap(ad::constant(random_tensor<float>(Shape{2, 64, 8}, rng)), 8, 8);
        auto out = block_pair(in, root.sub(block_name(false, 0, 0)), root.sub(block_name(false, 0, 1)), 1, 4,
                              cfg.backbone.shift(0), site);
        if (!bit_equal(out.tokens.value(), in.tokens.value()))
            o.fail(std::string("zeroed residual branches are not the identity (") + to_string(pl) + ")");
        // Network level: with the branches zeroed, the remaining block weights
        // cannot matter.
        auto redrawn = s;
        for (auto& p : redrawn.params())
            if (p.name.find(".block") != std::string::npos && !p.name.ends_with(".w_o") && !p.name.ends_with(".b_o") &&
                !p.name.ends_with("attn.proj.w") && !p.name.ends_with("attn.proj.b"))
                for (auto& v : p.value.data()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
        if (!bit_equal(forward(s, cfg, x), forward(redrawn, cfg, x)))
            o.fail(std::string("network output depends on zeroed-branch block weights (") + to_string(pl) + ")");
    }
    o.note("one-expert MoE at encoder/decoder/both == plain MLP network bit-exactly; zero-init residual identity holds");
}

// ------------------------------------------------------------------ 4

void shuffle(Outcome& o) {
    for (auto mode : {ChannelAssignment::shared, ChannelAssignment::disjoint}) {
        const auto space = default_label_space(mode);
        ModelConfig cfg = small(MoEPlacement::both, 3);
        cfg.num_classes = space.k_pad();
        auto store = init_parameters<float>(model_param_specs(cfg), 51);
        Rng rng(51);
        for (auto& p : store.params())
            for (auto& v : p.value.data()) v += static_cast<float>(rng.uniform(-0.1, 0.1));

        // Twelve samples, four per modality.
        const std::size_t N = 12;
        std::vector<std::size_t> mods;
        std::vector<Tensor<float>> imgs;
        std::vector<std::vector<std::uint8_t>> labels;
        for (std::size_t s = 0; s < N; ++s) {
            mods.push_back(s % 3);
            imgs.push_back(random_tensor<float>(Shape{1, 16, 16}, rng));
            std::vector<std::uint8_t> l(256);
            for (auto& v : l) v = static_cast<std::uint8_t>(rng.below(space.modality(s % 3).num_classes()));
            labels.push_back(std::move(l));
        }
        std::vector<std::size_t> k_seen;
        for (const auto& m : space.modalities()) k_seen.push_back(m.num_classes());
        if (k_seen != std::vector<std::size_t>{4, 5, 3}) o.fail("class counts are not {4,5,3}");

        // Runs `order` as one batch; returns per-sample logits and losses
        // indexed by original sample id, plus the batch loss.
        struct Result {
            std::vector<Tensor<float>> logits;
            std::vector<double> loss;
            double batch_loss;
        };
        auto run = [&](const std::vector<std::size_t>& order) {
            Tensor<float> x(Shape{order.size(), 1, 16, 16});
            std::vector<std::size_t> bm;
            std::vector<std::vector<std::uint8_t>> bl;
            for (std::size_t j = 0; j < order.size(); ++j) {
                std::copy(imgs[order[j]].data().begin(), imgs[order[j]].data().end(), x.data().begin() + j * 256);
                bm.push_back(mods[order[j]]);
                bl.push_back(labels[order[j]]);
            }
            Binding<float> b(store, false);
            auto sel = select_logits(pad_logits(unet_forward(ad::constant(x), cfg, Scope<float>(b)), space), bm, space);
            Result r{std::vector<Tensor<float>>(N), std::vector<double>(N), masked_loss(sel, bl, {}).value().item()};
            for (std::size_t j = 0; j < order.size(); ++j) {
                r.logits[order[j]] = sel[j].value();
                r.loss[order[j]] = sample_loss(sel[j], bl[j], j, {}).value().item();
            }
            return r;
        };

        std::vector<Tensor<float>> ref_logits(N);
        std::vector<double> ref_loss(N);
        for (std::size_t s = 0; s < N; ++s) {
            auto r = run({s});
            ref_logits[s] = r.logits[s];
            ref_loss[s] = r.loss[s];
        }
        double worst = 0;
        auto compare = [&](const std::vector<std::size_t>& order, const Result& r) {
            double mean = 0;
            for (auto s : order) {
                worst = std::max(worst, max_abs_diff(r.logits[s].data(), ref_logits[s].data()));
                worst = std::max(worst, std::abs(r.loss[s] - ref_loss[s]));
                mean += ref_loss[s] / static_cast<double>(order.size());
            }
            worst = std::max(worst, std::abs(r.batch_loss - mean));
        };
        std::vector<std::size_t> all(N);
        std::iota(all.begin(), all.end(), 0);
        for (int trial = 0; trial < 6; ++trial) {
            auto order = all;
            rng.shuffle(order.begin(), order.end());
            compare(order, run(order));
            // Regroup the same permutation into uneven mini-batches.
            for (std::size_t start = 0, size = 2 + trial % 3; start < N; start += size, size = 1 + (size + 2) % 5) {
                std::vector<std::size_t> part(order.begin() + start, order.begin() + std::min(N, start + size));
                compare(part, run(part));
            }
        }
        if (worst > 1e-6) o.fail(std::string(to_string(mode)) + ": max deviation " + fmt(worst));
        o.note(std::string(to_string(mode)) + " max deviation " + fmt(worst));
    }
}

// ------------------------------------------------------------------ 5

void growth(Outcome& o) {
    struct C {
        ModelConfig cfg;
        const char* name;
    };
    std::vector<C> configs;
    {
        auto a = small(MoEPlacement::both, 1);
        configs.push_back({a, "tiny/both/n=1"});
        auto b = small(MoEPlacement::encoder_only, 3);
        b.backbone.img_size = 32;
        b.backbone.embed_dim = 16;
        b.backbone.num_heads = {2, 4};
        b.granularity = GateGranularity::sample;
        configs.push_back({b, "toy/encoder/n=3"});
        ModelConfig c;  // default network
        c.placement = MoEPlacement::decoder_only;
        c.num_experts = 2;
        c.gating = false;
        configs.push_back({c, "default/decoder/no-gate/n=2"});
    }
    for (const auto& c : configs) {
        auto after = c.cfg;
        after.num_experts += 1;
        const auto diff = static_cast<std::int64_t>(init_parameters<float>(model_param_specs(after), 0).element_count()) -
                          static_cast<std::int64_t>(init_parameters<float>(model_param_specs(c.cfg), 0).element_count());
        const auto closed = count_added_params(c.cfg, after);
        if (diff != closed) o.fail(std::string(c.name) + ": registry diff " + std::to_string(diff) + " != " + std::to_string(closed));
        else o.note(std::string(c.name) + " +1 expert = " + std::to_string(closed));
    }

    // Doubling: totals are affine in n, attention is untouched.
    auto base = small(MoEPlacement::both, 1);
    auto at = [&](std::size_t n) {
        auto m = base;
        m.num_experts = n;
        return count_params(m);
    };
    const auto one = at(1), two = at(2);
    const auto per = static_cast<std::int64_t>(two.total()) - static_cast<std::int64_t>(one.total());
    for (std::size_t n : {2u, 4u, 8u, 16u}) {
        const auto b = at(n), d = at(2 * n);
        auto mn = base, m2 = base;
        mn.num_experts = n;
        m2.num_experts = 2 * n;
        const auto grow = static_cast<std::int64_t>(d.total()) - static_cast<std::int64_t>(b.total());
        if (grow != static_cast<std::int64_t>(n) * per || count_added_params(mn, m2) != grow)
            o.fail("doubling " + std::to_string(n) + "->" + std::to_string(2 * n) + " adds " + std::to_string(grow) +
                   ", expected " + std::to_string(static_cast<std::int64_t>(n) * per));
        if (b.attention != one.attention || d.attention != one.attention) o.fail("attention count changes with n");
        if (b.heads != one.heads || b.other != one.other) o.fail("non-expert groups change with n");
    }
    o.note("doubling n in {2,4,8,16} adds n x " + std::to_string(per) + "; attention fixed at " + std::to_string(one.attention));
}

// ------------------------------------------------------------------ 6, 8, 9: the toy pipeline

// Shared across criteria 6, 8 and 9; each piece is computed on first use.
struct ToyRun {
    ExperimentConfig cfg;
    Corpus train, eval;
    std::vector<Phase1Result> phase1;
    double phase1_seconds = 0;
    std::map<MoEPlacement, PipelineResult> variants;
    std::map<MoEPlacement, double> variant_seconds;

    const PipelineResult& variant(MoEPlacement p) {
        if (!variants.count(p)) {
            const auto t0 = Clock::now();
            variants[p] = finish_pipeline(cfg, phase1, cfg.model(p, true), train, eval);
            variant_seconds[p] = seconds_since(t0);
        }
        return variants[p];
    }
};

ExperimentConfig toy_config() { return load_experiment(M4OE_TOY_CONFIG); }

ToyRun& toy() {
    static std::optional<ToyRun> run;
    if (!run) {
        ToyRun r;
        const auto t0 = Clock::now();
        r.cfg = toy_config();
        r.train = generate(r.cfg.data);
        r.eval = generate(r.cfg.eval_data);
        r.phase1 = pretrain_all(r.cfg, r.train);
        r.phase1_seconds = seconds_since(t0);
        run = std::move(r);
    }
    return *run;
}

void pipeline(Outcome& o) {
    auto& r = toy();
    if (r.cfg.phase1.epochs > 20) o.fail("phase-1 epochs " + std::to_string(r.cfg.phase1.epochs) + " > 20");
    if (r.cfg.phase2.epochs > 30) o.fail("phase-2 epochs " + std::to_string(r.cfg.phase2.epochs) + " > 30");
    std::string p1;
    for (const auto& p : r.phase1) {
        const double ratio = p.final_loss / p.initial_loss;
        p1 += (p1.empty() ? "" : "/") + fmt(ratio);
        if (!(ratio < 0.5))
            o.fail("modality " + std::to_string(p.modality_id) + " reconstruction ratio " + fmt(ratio));
    }
    const auto& vb = r.variant(MoEPlacement::both);
    const auto& vn = r.variant(MoEPlacement::none);
    const double both = vb.report.eval.mean_dsc, none = vn.report.eval.mean_dsc;
    const double seconds = r.phase1_seconds + r.variant_seconds[MoEPlacement::both] + r.variant_seconds[MoEPlacement::none];
    if (vb.report.eval.include_background) o.fail("evaluation includes background");
    if (!(both >= 0.80)) o.fail("mean foreground DSC " + fmt(both) + " < 0.80");
    if (!(both >= none - 0.05)) o.fail("both " + fmt(both) + " < none " + fmt(none) + " - 0.05");
    if (seconds > 1800) o.fail("wall clock " + fmt(seconds) + " s > 1800 s");
    o.note("phase-1 loss ratios " + p1 + "; DSC both:on " + fmt(both) + ", none " + fmt(none) + "; " +
           fmt(seconds) + " s");
}

std::string bytes_of(const ParameterStore<float>& s) {
    std::vector<NamedTensor> records;
    for (const auto& p : s.params()) records.push_back({p.name, p.value});
    return encode_records(records);
}

void determinism(Outcome& o) {
    auto& first = toy();
    const auto& both = first.variant(MoEPlacement::both);
    auto cfg = toy_config();
    auto train = generate(cfg.data);
    auto eval = generate(cfg.eval_data);
    if (train.samples.size() != first.train.samples.size()) o.fail("corpus size differs");
    for (std::size_t i = 0; i < train.samples.size() && i < first.train.samples.size(); ++i)
        if (!bit_equal(train.samples[i].image, first.train.samples[i].image) || train.samples[i].mask != first.train.samples[i].mask) {
            o.fail("corpus sample " + std::to_string(i) + " differs");
            break;
        }
    auto p1 = pretrain_all(cfg, train);
    for (std::size_t i = 0; i < p1.size(); ++i)
        if (bytes_of(p1[i].store) != bytes_of(first.phase1[i].store)) o.fail("phase-1 checkpoint " + std::to_string(i) + " differs");
    auto second = finish_pipeline(cfg, p1, cfg.model(MoEPlacement::both, true), train, eval);
    if (bytes_of(second.assembled) != bytes_of(both.assembled)) o.fail("assembled checkpoint differs");
    if (bytes_of(second.phase2.store) != bytes_of(both.phase2.store)) o.fail("final checkpoint differs");
    const auto a = to_json(both.report, false).dump(), b = to_json(second.report, false).dump();
    if (a != b) o.fail("reports differ");
    if (loss_csv(both.report) != loss_csv(second.report)) o.fail("loss curves differ");
    o.note("phase-1, assembled and final checkpoints (" + std::to_string(bytes_of(second.phase2.store).size()) +
           " bytes) and the " + std::to_string(a.size()) + "-byte report are identical");
}

void assembly(Outcome& o) {
    auto& r = toy();
    const auto& cfg = r.cfg;
    const auto model = cfg.model(MoEPlacement::both, true);
    const std::size_t n = model.num_experts;
    std::vector<ParameterStore<float>> stores;
    for (const auto& p : r.phase1) stores.push_back(p.store);
    const auto assembled = assemble_moe(stores, cfg, model);

    // Gate entropy on a probe batch drawn from every modality.
    std::vector<std::size_t> probe;
    for (std::size_t m = 0; m < n; ++m) {
        auto idx = r.eval.indices_of(m);
        probe.insert(probe.end(), idx.begin(), idx.begin() + std::min<std::size_t>(4, idx.size()));
    }
    Trace<float> trace;
    ForwardOptions<float> fo;
    fo.trace = &trace;
    forward(assembled, model, stack_images(r.eval, probe), fo);
    double worst_h = 0;
    std::size_t rows = 0, sites = 0;
    for (const auto& [key, w] : trace) {
        if (!key.ends_with(".weights")) continue;
        ++sites;
        for (std::size_t t = 0; t < w.size() / n; ++t, ++rows) {
            double h = 0;
            for (std::size_t i = 0; i < n; ++i) h -= double(w[t * n + i]) * std::log(double(w[t * n + i]));
            worst_h = std::max(worst_h, std::abs(h - std::log(double(n))));
        }
    }
    if (sites == 0) o.fail("no MoE sites traced");
    if (worst_h > 1e-6) o.fail("gate entropy off ln(n) by " + fmt(worst_h));

    // Pinned slot i vs the phase-1 network of modality i carrying the same
    // shared weights: every encoder MoE-site output must agree.
    const auto p1_model = cfg.phase1_model();
    double worst = 0;
    std::size_t compared = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ParameterStore<float> single;
        for (const auto& spec : phase1_param_specs(cfg)) {
            auto name = spec.name;
            if (auto at = name.find(".mlp."); at != std::string::npos)
                name.replace(at, 5, ".moe.expert" + std::to_string(i) + ".");
            single.add(spec.name, spec.name.rfind("mae.", 0) == 0 ? stores[i].at(spec.name).value : assembled.at(name).value);
        }
        const auto idx = r.eval.indices_of(i);
        const auto x = stack_images(r.eval, idx);
        Trace<float> a, b;
        ForwardOptions<float> pin;
        pin.gate = GateOverride::pinned(i);
        pin.trace = &a;
        forward(assembled, model, x, pin);
        ForwardOptions<float> plain;
        plain.trace = &b;
        {
            Binding<float> bind(single, false);
            mae_forward(ad::constant(x), std::vector<std::uint8_t>(idx.size() * p1_model.backbone.grid(0) * p1_model.backbone.grid(0), 0),
                        p1_model, Scope<float>(bind), plain);
        }
        for (const auto& [key, t] : b) {
            if (!key.starts_with("enc.") || !key.ends_with(".ffn")) continue;
            ++compared;
            worst = std::max(worst, max_abs_diff(a.at(key).data(), t.data()));
        }
        // With take-first merging, slot 0 reproduces the untouched phase-1
        // checkpoint itself.
        if (i == 0) {
            auto tf = cfg;
            tf.shared_merge = SharedMerge::take_first;
            const auto first = assemble_moe(stores, tf, model);
            Trace<float> c, d;
            ForwardOptions<float> po;
            po.gate = GateOverride::pinned(0);
            po.trace = &c;
            forward(first, model, x, po);
            ForwardOptions<float> raw;
            raw.trace = &d;
            Binding<float> bind(stores[0], false);
            mae_forward(ad::constant(x), std::vector<std::uint8_t>(idx.size() * p1_model.backbone.grid(0) * p1_model.backbone.grid(0), 0),
                        p1_model, Scope<float>(bind), raw);
            for (const auto& [key, t] : d)
                if (key.starts_with("enc.") && key.ends_with(".ffn")) {
                    ++compared;
                    worst = std::max(worst, max_abs_diff(c.at(key).data(), t.data()));
                }
        }
    }
    if (compared == 0) o.fail("no encoder MoE sites compared");
    if (worst > 0) o.fail("pinned outputs deviate by " + fmt(worst));
    o.note(std::to_string(rows) + " gate rows at " + std::to_string(sites) + " sites, max |H-ln n| " + fmt(worst_h) +
           "; pinned site outputs identical at " + std::to_string(compared) + " comparisons");
}

// ------------------------------------------------------------------ 7

void metrics(Outcome& o) {
    Rng rng(71);
    std::size_t pairs = 0;
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t k = 2 + rng.below(5), n = 16 + rng.below(200);
        std::vector<std::uint8_t> p(n), t(n);
        // Mix sparse and dense masks so empty classes occur.
        const double bias = rng.uniform(0, 1);
        for (std::size_t i = 0; i < n; ++i) {
            p[i] = rng.uniform(0, 1) < bias ? 0 : static_cast<std::uint8_t>(rng.below(k));
            t[i] = rng.uniform(0, 1) < bias ? 0 : static_cast<std::uint8_t>(rng.below(k));
        }
        ++pairs;
        for (std::size_t c = 0; c < k; ++c) {
            std::set<std::size_t> P, T, I, U;
            for (std::size_t i = 0; i < n; ++i) {
                if (p[i] == c) P.insert(i);
                if (t[i] == c) T.insert(i);
            }
            std::set_intersection(P.begin(), P.end(), T.begin(), T.end(), std::inserter(I, I.end()));
            std::set_union(P.begin(), P.end(), T.begin(), T.end(), std::inserter(U, U.end()));
            const double bd = U.empty() ? 1.0 : 2.0 * double(I.size()) / double(P.size() + T.size());
            const double bi = U.empty() ? 1.0 : double(I.size()) / double(U.size());
            const double d = dice(p, t, c), j = iou(p, t, c);
            if (d != bd || j != bi) o.fail("pair " + std::to_string(trial) + " class " + std::to_string(c) + " disagrees with oracle");
            worst = std::max(worst, std::abs(j - d / (2 - d)));
        }
    }
    if (worst > 1e-9) o.fail("IoU identity error " + fmt(worst));
    o.note(std::to_string(pairs) + " pairs match the set oracle exactly; max |IoU - DSC/(2-DSC)| " + fmt(worst));
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<const char*, std::function<void(Outcome&)>>> criteria{
        {"finite-difference gradients", gradients},
        {"gating invariants", gating},
        {"single-expert / plain-MLP reduction", reduction},
        {"dynamic-head shuffle invariance", shuffle},
        {"parameter growth law", growth},
        {"two-phase toy pipeline", pipeline},
        {"metric oracle equivalence", metrics},
        {"determinism", determinism},
        {"assembly contract", assembly},
    };
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

    int failed = 0;
    for (std::size_t k = 0; k < criteria.size(); ++k) {
        const int id = static_cast<int>(k) + 1;
        if (!only.empty() && !only.count(id)) continue;
        Outcome o;
        const auto t0 = Clock::now();
        try {
            criteria[k].second(o);
        } catch (const std::exception& e) {
            o.fail(std::string("exception: ") + e.what());
        }
        failed += !o.pass;
        std::cout << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << "  " << criteria[k].first << " ("
                  << fmt(seconds_since(t0)) << " s): " << o.detail.str() << std::endl;
    }
    return failed ? 1 : 0;
}
