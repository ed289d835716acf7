// m4oe: corpus generation, two-phase training, evaluation and accounting.
//
// Every failure prints a single line "error[<category>]: <message>" on stderr
// and exits nonzero (2 for usage errors, 1 otherwise).

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "m4oe/training.hpp"

namespace fs = std::filesystem;
using namespace m4oe;
using nlohmann::json;

namespace {

std::optional<std::uint64_t> env_seed() {
    const char* v = std::getenv("M4OE_SEED");
    if (!v || !*v) return std::nullopt;
    char* end = nullptr;
    errno = 0;
    const auto s = std::strtoull(v, &end, 10);
    if (errno || *end || v[0] == '-') throw ConfigError(std::string("M4OE_SEED='") + v + "' is not a non-negative integer");
    return s;
}

/// --seed, else $M4OE_SEED, else whatever the file says.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, std::uint64_t from_file) {
    if (flag) return *flag;
    if (auto e = env_seed()) return *e;
    return from_file;
}

ExperimentConfig load_config(const std::string& path, const std::optional<std::uint64_t>& seed) {
    auto cfg = load_experiment(path);
    cfg.seed = resolve_seed(seed, cfg.seed);
    return cfg;
}

void log_line(const std::string& s) { std::cerr << s << "\n"; }

fs::path sidecar(const fs::path& ckpt, const std::string& what) { return fs::path(ckpt.string() + "." + what + ".json"); }

void save_model(const fs::path& ckpt, const ParameterStore<float>& store, const ModelConfig& model,
                const LabelSpace& space) {
    if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
    save_checkpoint(ckpt, store);
    write_json(sidecar(ckpt, "model"), to_json(model));
    write_json(sidecar(ckpt, "labels"), to_json(space));
}

struct LoadedModel {
    ParameterStore<float> store;
    ModelConfig model;
    LabelSpace space;
};

LoadedModel load_model(const fs::path& ckpt) {
    if (!fs::exists(ckpt)) throw IoError("no such checkpoint: " + ckpt.string());
    for (const char* s : {"model", "labels"})
        if (!fs::exists(sidecar(ckpt, s))) throw IoError("checkpoint sidecar missing: " + sidecar(ckpt, s).string());
    LoadedModel m{load_checkpoint(ckpt), model_from_json(read_json(sidecar(ckpt, "model"))),
                  label_space_from_json(read_json(sidecar(ckpt, "labels")))};
    if (m.model.num_classes != m.space.k_pad())
        throw ConfigError("checkpoint head has " + std::to_string(m.model.num_classes) + " rows but label space K_pad is " +
                          std::to_string(m.space.k_pad()));
    require_layout(m.store, model_param_specs(m.model), "checkpoint " + ckpt.string());
    return m;
}

std::string timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y%m%dT%H%M%SZ");
    return os.str();
}

std::size_t resolve_modality(const ExperimentConfig& cfg, const std::string& m) {
    for (const auto& d : cfg.modalities)
        if (d.name == m || std::to_string(d.id) == m) return d.id;
    throw ConfigError("unknown modality '" + m + "'");
}

Corpus corpus_or_generated(const std::string& dir, const SynthSpec& spec) {
    return dir.empty() ? generate(spec) : load_corpus(dir);
}

// ------------------------------------------------------------------ commands

int cmd_gen(const std::string& spec_path, const std::string& out, const std::optional<std::uint64_t>& seed) {
    auto j = read_json(spec_path);
    // An experiment config is accepted too; its "data" block is the synthesis spec.
    SynthSpec spec = synth_spec_from_json(j.contains("data") ? j.at("data") : j);
    spec.seed = resolve_seed(seed, spec.seed);
    auto c = generate(spec);
    save_corpus(out, c);
    std::cout << "wrote " << c.samples.size() << " samples to " << out << "\n";
    return 0;
}

int cmd_pretrain(const std::string& config, const std::string& modality, const std::string& corpus_dir,
                 const std::string& out, const std::optional<std::uint64_t>& seed) {
    auto cfg = load_config(config, seed);
    const auto id = resolve_modality(cfg, modality);
    auto corpus = corpus_or_generated(corpus_dir, cfg.data);
    auto r = phase1_pretrain(cfg, corpus, id, log_line);
    save_model(out, r.store, cfg.phase1_model(), cfg.label_space());
    write_json(sidecar(out, "phase1"), json{{"seed", cfg.seed},
                                            {"modality_id", id},
                                            {"name", cfg.label_space().modality(id).name},
                                            {"losses", r.losses},
                                            {"initial_loss", r.initial_loss},
                                            {"final_loss", r.final_loss}});
    std::cout << "modality " << id << " reconstruction loss " << r.initial_loss << " -> " << r.final_loss << "\n";
    return 0;
}

int cmd_assemble(const std::string& config, const std::vector<std::string>& ckpts, const std::string& out,
                 const std::optional<std::uint64_t>& seed) {
    auto cfg = load_config(config, seed);
    const auto expected = to_json(cfg.phase1_model());
    std::vector<ParameterStore<float>> stores;
    json phase1 = json::array();
    for (std::size_t i = 0; i < ckpts.size(); ++i) {
        const fs::path p = ckpts[i];
        if (!fs::exists(p)) throw IoError("no such checkpoint: " + p.string());
        if (fs::exists(sidecar(p, "model")) && read_json(sidecar(p, "model")) != expected)
            throw ConfigError("checkpoint " + p.string() + " was trained with a different model configuration");
        if (fs::exists(sidecar(p, "phase1"))) {
            auto rep = read_json(sidecar(p, "phase1"));
            if (rep.value("modality_id", i) != cfg.modalities.at(std::min(i, cfg.modalities.size() - 1)).id)
                throw ConfigError("checkpoint " + p.string() + " holds modality " + rep["modality_id"].dump() +
                                  " but is listed in expert slot " + std::to_string(i));
            phase1.push_back(rep);
        }
        stores.push_back(load_checkpoint(p));
    }
    auto model = cfg.model();
    auto store = assemble_moe(stores, cfg, model);
    save_model(out, store, model, cfg.label_space());
    write_json(sidecar(out, "phase1"), phase1);
    std::cout << "assembled " << stores.size() << " experts into " << out << "\n";
    return 0;
}

int cmd_finetune(const std::string& config, const std::string& ckpt, const std::string& corpus_dir,
                 const std::string& eval_dir, const std::string& out, const std::optional<std::uint64_t>& seed) {
    const auto t0 = std::chrono::steady_clock::now();
    auto cfg = load_config(config, seed);
    auto in = load_model(ckpt);
    if (to_json(in.model) != to_json(cfg.model()))
        throw ConfigError("checkpoint model configuration differs from " + config);
    auto corpus = load_corpus(corpus_dir);
    auto eval_corpus = corpus_or_generated(eval_dir, cfg.eval_data);

    auto r = phase2_finetune(std::move(in.store), cfg, in.model, corpus, log_line);
    TrainReport rep;
    rep.seed = cfg.seed;
    rep.placement = to_string(in.model.placement);
    rep.gating = in.model.gating;
    if (fs::exists(sidecar(ckpt, "phase1")))
        for (const auto& p : read_json(sidecar(ckpt, "phase1")))
            rep.phase1.push_back({p.at("modality_id"), p.at("name"), p.at("losses"), p.at("initial_loss"), p.at("final_loss")});
    rep.phase2_losses = r.losses;
    EvalOptions eo;
    eo.include_background = cfg.eval_include_background;
    rep.eval = evaluate(r.store, in.model, in.space, eval_corpus, eo);
    rep.params = count_params(r.store);
    rep.warnings = r.warnings;
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    const fs::path run = fs::path(out) / ("run-" + timestamp() + "-s" + std::to_string(cfg.seed));
    fs::create_directories(run);
    save_model(run / "model.ckpt", r.store, in.model, in.space);
    write_json(run / "config.json", to_json(cfg));
    write_json(run / "report.json", to_json(rep));
    write_json(run / "eval.json", to_json(rep.eval));
    write_file(run / "loss.csv", loss_csv(rep));
    std::cout << run.string() << "\nmean DSC " << rep.eval.mean_dsc << "  mean IoU " << rep.eval.mean_iou << "\n";
    return 0;
}

GateOverride parse_gate(const std::string& s) {
    if (s.empty() || s == "learned") return {};
    if (s == "uniform") return GateOverride::uniform();
    if (s.rfind("pinned:", 0) == 0) {
        try {
            return GateOverride::pinned(std::stoul(s.substr(7)));
        } catch (const std::logic_error&) {
        }
    }
    throw ConfigError("--gate must be learned, uniform or pinned:<i>, got '" + s + "'");
}

int cmd_eval(const std::string& ckpt, const std::string& corpus_dir, const std::string& report, bool background,
             const std::string& gate) {
    auto m = load_model(ckpt);
    auto corpus = load_corpus(corpus_dir);
    EvalOptions eo;
    eo.include_background = background;
    eo.gate = parse_gate(gate);
    auto r = evaluate(m.store, m.model, m.space, corpus, eo);
    if (!report.empty()) write_json(report, to_json(r));
    std::cout << std::fixed << std::setprecision(2);
    for (const auto& mod : r.modalities) {
        std::cout << mod.name << ": DSC " << 100 * mod.mean_dsc << "%  mIoU " << 100 * mod.mean_iou << "%\n";
        for (const auto& c : mod.classes)
            std::cout << "  " << std::left << std::setw(12) << c.name << std::right << " DSC " << std::setw(6)
                      << 100 * c.dsc << "%  IoU " << std::setw(6) << 100 * c.iou << "%\n";
    }
    std::cout << "mean: DSC " << 100 * r.mean_dsc << "%  mIoU " << 100 * r.mean_iou << "% over " << r.samples
              << " samples\n";
    return 0;
}

int cmd_ablate(const std::string& config, const std::string& corpus_dir, const std::string& eval_dir,
               const std::string& variants, const std::string& report, const std::optional<std::uint64_t>& seed) {
    auto cfg = load_config(config, seed);
    auto corpus = corpus_or_generated(corpus_dir, cfg.data);
    auto eval_corpus = corpus_or_generated(eval_dir, cfg.eval_data);
    auto rows = run_ablation(cfg, corpus, eval_corpus, parse_variants(variants), log_line);
    if (!report.empty()) write_json(report, to_json(rows));
    std::cout << std::fixed << std::setprecision(2) << std::left << std::setw(18) << "variant" << std::right
              << std::setw(10) << "params" << std::setw(9) << "DSC%" << std::setw(9) << "mIoU%" << "\n";
    for (const auto& r : rows)
        std::cout << std::left << std::setw(18) << to_string(r.variant) << std::right << std::setw(10)
                  << r.report.params.total() << std::setw(9) << 100 * r.report.eval.mean_dsc << std::setw(9)
                  << 100 * r.report.eval.mean_iou << "\n";
    return 0;
}

int cmd_params(const std::string& config, const std::string& placement, const std::string& gating) {
    auto cfg = load_experiment(config);
    auto p = placement.empty() ? cfg.phase2.placement : parse_placement(placement);
    bool g = cfg.phase2.gating;
    if (gating == "on") g = true;
    else if (gating == "off") g = false;
    else if (!gating.empty()) throw ConfigError("--gating must be on or off");
    const auto model = cfg.model(p, g);
    auto j = to_json(count_params(model));
    j["num_experts"] = model.num_experts;
    j["placement"] = to_string(model.placement);
    j["gate_enabled"] = model.gating;
    std::cout << j.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Modality-expert segmentation: data, training, evaluation"};
    app.require_subcommand(1);
    std::optional<std::uint64_t> seed;
    std::string config, spec, out, modality, corpus, eval_corpus, ckpt, report, variants, placement, gating, gate;
    std::vector<std::string> ckpts;
    bool background = false;

    auto add_seed = [&](CLI::App* c) { c->add_option("--seed", seed, "RNG seed (fallback: $M4OE_SEED, then the file)"); };

    auto* gen = app.add_subcommand("gen", "generate a synthetic corpus");
    gen->add_option("--spec", spec, "synthesis spec (or experiment config) JSON")->required();
    gen->add_option("--out", out, "output directory")->required();
    add_seed(gen);

    auto* pre = app.add_subcommand("pretrain", "phase 1: masked reconstruction for one modality");
    pre->add_option("--config", config)->required();
    pre->add_option("--modality", modality, "modality id or name")->required();
    pre->add_option("--corpus", corpus, "corpus directory (default: generate from the config)");
    pre->add_option("--out", out, "checkpoint path")->required();
    add_seed(pre);

    auto* asm_ = app.add_subcommand("assemble", "merge phase-1 checkpoints into one expert network");
    asm_->add_option("--config", config)->required();
    asm_->add_option("--ckpts", ckpts, "phase-1 checkpoints in modality order")->required()->delimiter(',');
    asm_->add_option("--out", out)->required();
    add_seed(asm_);

    auto* fin = app.add_subcommand("finetune", "phase 2: joint segmentation training");
    fin->add_option("--config", config)->required();
    fin->add_option("--ckpt", ckpt, "assembled checkpoint")->required();
    fin->add_option("--corpus", corpus)->required();
    fin->add_option("--eval-corpus", eval_corpus, "held-out corpus (default: generate from the config)");
    fin->add_option("--out", out, "directory receiving the run folder")->required();
    add_seed(fin);

    auto* ev = app.add_subcommand("eval", "score a checkpoint on a corpus");
    ev->add_option("--ckpt", ckpt)->required();
    ev->add_option("--corpus", corpus)->required();
    ev->add_option("--report", report, "JSON report path");
    ev->add_flag("--include-background", background);
    ev->add_option("--gate", gate, "learned | uniform | pinned:<i>");

    auto* abl = app.add_subcommand("ablate", "train and score several placement/gating variants");
    abl->add_option("--config", config)->required();
    abl->add_option("--corpus", corpus, "training corpus (default: generate from the config)");
    abl->add_option("--eval-corpus", eval_corpus);
    abl->add_option("--variants", variants, "e.g. both:on,both:off,none")->required();
    abl->add_option("--report", report);
    add_seed(abl);

    auto* par = app.add_subcommand("params", "parameter breakdown of the configured network");
    par->add_option("--config", config)->required();
    par->add_option("--placement", placement);
    par->add_option("--gating", gating, "on | off");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error[usage]: " << e.what() << "\n";
        return 2;
    }

    try {
        if (*gen) return cmd_gen(spec, out, seed);
        if (*pre) return cmd_pretrain(config, modality, corpus, out, seed);
        if (*asm_) return cmd_assemble(config, ckpts, out, seed);
        if (*fin) return cmd_finetune(config, ckpt, corpus, eval_corpus, out, seed);
        if (*ev) return cmd_eval(ckpt, corpus, report, background, gate);
        if (*abl) return cmd_ablate(config, corpus, eval_corpus, variants, report, seed);
        if (*par) return cmd_params(config, placement, gating);
    } catch (const Error& e) {
        std::cerr << "error[" << e.category() << "]: " << e.what() << "\n";
        return 1;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error[io]: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error[internal]: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
