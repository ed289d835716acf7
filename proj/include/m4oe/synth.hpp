#pragma once

// Synthetic three-modality segmentation corpus.
//
// Geometry is integer-only (disks, rectangles, rings on the pixel grid) and
// intensity noise comes from a hash of integer lattice coordinates, so a
// corpus is a pure function of its spec. Each sample keeps the shapes that
// produced it; rasterising them again reproduces the mask exactly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "m4oe/checkpoint.hpp"
#include "m4oe/error.hpp"
#include "m4oe/heads.hpp"
#include "m4oe/rng.hpp"
#include "m4oe/tensor.hpp"

namespace m4oe {

enum class ShapeKind : std::uint8_t { disk = 0, rect = 1, ring = 2 };

inline const char* to_string(ShapeKind k) {
    switch (k) {
        case ShapeKind::disk: return "disk";
        case ShapeKind::rect: return "rect";
        case ShapeKind::ring: return "ring";
    }
    return "?";
}

inline ShapeKind parse_shape(const std::string& s) {
    if (s == "disk") return ShapeKind::disk;
    if (s == "rect") return ShapeKind::rect;
    if (s == "ring") return ShapeKind::ring;
    throw ConfigError("unknown shape kind '" + s + "'");
}

struct ModalityStyle {
    ModalityDescriptor modality;
    double gamma = 1.0;
    double noise = 0.05;
    bool invert = false;
    bool ring_enhancement = false;  // enhancing rim on the last class (tumour-like)
    std::vector<ShapeKind> shapes{ShapeKind::disk, ShapeKind::rect};
    std::size_t samples = 0;

    friend bool operator==(const ModalityStyle&, const ModalityStyle&) = default;
};

struct SynthSpec {
    std::size_t img_size = 64;
    std::uint64_t seed = 0;
    std::size_t min_shapes = 1;
    std::size_t max_shapes = 4;
    std::size_t min_extent = 6;  // pixels across, every shape
    std::size_t max_extent = 0;  // 0: img_size / 3
    std::vector<ModalityStyle> modalities;
    std::map<std::size_t, double> class_intensity;  // global class id -> base level

    std::size_t extent_cap() const { return max_extent ? max_extent : img_size / 3; }

    void validate() const {
        if (img_size < 8) throw ConfigError("synth: img_size must be >= 8");
        if (min_shapes > max_shapes) throw ConfigError("synth: min_shapes > max_shapes");
        if (min_extent < 1 || min_extent > extent_cap()) throw ConfigError("synth: bad shape extent range");
        if (modalities.empty()) throw ConfigError("synth: no modalities");
        for (const auto& m : modalities) {
            m.modality.validate();
            if (m.modality.in_channels != 1) throw ConfigError("synth: only single-channel modalities are generated");
            if (m.shapes.empty()) throw ConfigError("synth: modality '" + m.modality.name + "' has no shape kinds");
            if (!(m.gamma > 0) || m.noise < 0) throw ConfigError("synth: modality '" + m.modality.name + "' bad intensity");
            for (auto c : m.modality.class_ids)
                if (!class_intensity.count(c)) throw ConfigError("synth: class " + std::to_string(c) + " has no intensity");
        }
    }

    friend bool operator==(const SynthSpec&, const SynthSpec&) = default;
};

/// Generating geometry of one object. For disks and rings (cy, cx) is the
/// centre and a/b the outer/inner radius; for rectangles (cy, cx) is the top
/// left corner and a/b the height/width.
struct ShapeRecord {
    ShapeKind kind = ShapeKind::disk;
    std::size_t label = 0;  // local class index within the modality
    std::int64_t cy = 0, cx = 0, a = 0, b = 0;

    bool covers(std::int64_t y, std::int64_t x) const {
        if (kind == ShapeKind::rect) return y >= cy && y < cy + a && x >= cx && x < cx + b;
        const std::int64_t d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
        if (d2 > a * a) return false;
        return kind == ShapeKind::disk || d2 > b * b;
    }

    /// Distance-squared band from the outer edge, used for rim enhancement.
    bool on_rim(std::int64_t y, std::int64_t x, std::int64_t width) const {
        if (kind == ShapeKind::rect)
            return y < cy + width || y >= cy + a - width || x < cx + width || x >= cx + b - width;
        const std::int64_t d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
        return d2 > (a - width) * (a - width);
    }

    friend bool operator==(const ShapeRecord&, const ShapeRecord&) = default;
};

struct Sample {
    std::size_t id = 0;
    std::size_t modality = 0;
    Tensor<float> image;               // [1 x H x W] in [0, 1]
    std::vector<std::uint8_t> mask;    // H*W local class indices
    std::vector<ShapeRecord> shapes;

    friend bool operator==(const Sample&, const Sample&) = default;
};

struct Corpus {
    std::size_t img_size = 0;
    std::uint64_t seed = 0;
    std::vector<ModalityDescriptor> modalities;
    std::vector<Sample> samples;

    std::vector<std::size_t> indices_of(std::size_t modality) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < samples.size(); ++i)
            if (samples[i].modality == modality) out.push_back(i);
        return out;
    }

    friend bool operator==(const Corpus&, const Corpus&) = default;
};

inline std::vector<std::uint8_t> rasterize(const std::vector<ShapeRecord>& shapes, std::size_t size) {
    std::vector<std::uint8_t> mask(size * size, 0);
    for (const auto& s : shapes)
        for (std::size_t y = 0; y < size; ++y)
            for (std::size_t x = 0; x < size; ++x)
                if (s.covers(static_cast<std::int64_t>(y), static_cast<std::int64_t>(x)))
                    mask[y * size + x] = static_cast<std::uint8_t>(s.label);
    return mask;
}

namespace synth_detail {

/// Zero-mean, unit-variance noise from four hashed uniforms (Irwin-Hall).
inline double lattice_noise(std::uint64_t stream, std::size_t y, std::size_t x) {
    double s = 0.0;
    for (std::uint64_t k = 0; k < 4; ++k) {
        const std::uint64_t h = mix64(stream ^ mix64((static_cast<std::uint64_t>(y) << 32) ^ (x << 2) ^ k));
        s += static_cast<double>(h >> 11) * 0x1.0p-53;
    }
    return (s - 2.0) * std::sqrt(3.0);
}

inline ShapeRecord random_shape(Rng& rng, ShapeKind kind, std::size_t size, std::size_t lo, std::size_t hi) {
    ShapeRecord s;
    s.kind = kind;
    const auto extent = rng.range(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi));
    const auto n = static_cast<std::int64_t>(size);
    if (kind == ShapeKind::rect) {
        s.a = extent;
        s.b = rng.range(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi));
        s.cy = rng.range(0, n - s.a);
        s.cx = rng.range(0, n - s.b);
    } else {
        s.a = (extent + 1) / 2;  // outer radius; diameter 2a+1 >= extent
        s.b = kind == ShapeKind::ring ? std::max<std::int64_t>(1, s.a - 3) : 0;
        if (kind == ShapeKind::ring && s.a < 5) s.a = 5, s.b = 2;
        s.cy = rng.range(s.a, n - 1 - s.a);
        s.cx = rng.range(s.a, n - 1 - s.a);
    }
    return s;
}

/// Pixels of `s` plus a one-pixel halo, so objects never touch.
inline bool fits(const ShapeRecord& s, const std::vector<std::uint8_t>& taken, std::size_t size) {
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            if (!taken[y * size + x]) continue;
            for (std::int64_t dy = -1; dy <= 1; ++dy)
                for (std::int64_t dx = -1; dx <= 1; ++dx) {
                    // A ring's hole is part of its footprint for packing.
                    auto solid = s;
                    if (solid.kind == ShapeKind::ring) solid.kind = ShapeKind::disk;
                    if (solid.covers(static_cast<std::int64_t>(y) + dy, static_cast<std::int64_t>(x) + dx)) return false;
                }
        }
    return true;
}

inline void occupy(const ShapeRecord& s, std::vector<std::uint8_t>& taken, std::size_t size) {
    auto solid = s;
    if (solid.kind == ShapeKind::ring) solid.kind = ShapeKind::disk;
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x)
            if (solid.covers(static_cast<std::int64_t>(y), static_cast<std::int64_t>(x))) taken[y * size + x] = 1;
}

}  // namespace synth_detail

/// One sample of modality `style`, fully determined by (spec.seed, modality
/// position, index).
inline Sample generate_sample(const SynthSpec& spec, std::size_t modality_pos, std::size_t index, std::size_t id) {
    const auto& style = spec.modalities.at(modality_pos);
    const std::size_t N = spec.img_size, k = style.modality.num_classes();
    const std::uint64_t stream = derive_seed(spec.seed, style.modality.id + 1, index);
    Rng rng(stream);

    Sample out;
    out.id = id;
    out.modality = style.modality.id;
    std::size_t want = static_cast<std::size_t>(rng.range(static_cast<std::int64_t>(spec.min_shapes),
                                                          static_cast<std::int64_t>(spec.max_shapes)));
    if (k < 2) want = 0;
    // Bounded retries per object; on failure start over with one object fewer.
    for (;;) {
        std::vector<std::uint8_t> taken(N * N, 0);
        out.shapes.clear();
        bool ok = true;
        for (std::size_t s = 0; s < want && ok; ++s) {
            const auto kind = style.shapes[rng.below(style.shapes.size())];
            const auto label = 1 + rng.below(k - 1);
            ok = false;
            for (int attempt = 0; attempt < 64; ++attempt) {
                auto shape = synth_detail::random_shape(rng, kind, N, spec.min_extent, spec.extent_cap());
                shape.label = label;
                if (synth_detail::fits(shape, taken, N)) {
                    synth_detail::occupy(shape, taken, N);
                    out.shapes.push_back(shape);
                    ok = true;
                    break;
                }
            }
        }
        if (ok) break;
        --want;
    }

    out.mask = rasterize(out.shapes, N);
    std::vector<double> level(k);
    for (std::size_t j = 0; j < k; ++j) level[j] = spec.class_intensity.at(style.modality.class_ids[j]);
    out.image = Tensor<float>(Shape{1, N, N});
    const std::size_t enhanced = k - 1;
    for (std::size_t y = 0; y < N; ++y)
        for (std::size_t x = 0; x < N; ++x) {
            const std::uint8_t lab = out.mask[y * N + x];
            double v = level[lab];
            if (style.ring_enhancement && lab == enhanced && lab > 0) {
                // Bright rim, slightly darker core.
                bool rim = false;
                for (const auto& s : out.shapes)
                    if (s.label == enhanced && s.covers(static_cast<std::int64_t>(y), static_cast<std::int64_t>(x)))
                        rim = s.on_rim(static_cast<std::int64_t>(y), static_cast<std::int64_t>(x), 2);
                v = rim ? std::min(1.0, v + 0.2) : v - 0.05;
            }
            if (style.invert) v = 1.0 - v;
            v = std::pow(v, style.gamma);
            v += style.noise * synth_detail::lattice_noise(stream, y, x);
            out.image[y * N + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    return out;
}

inline Corpus generate(const SynthSpec& spec) {
    spec.validate();
    Corpus c;
    c.img_size = spec.img_size;
    c.seed = spec.seed;
    std::size_t id = 0;
    for (std::size_t m = 0; m < spec.modalities.size(); ++m) {
        c.modalities.push_back(spec.modalities[m].modality);
        for (std::size_t i = 0; i < spec.modalities[m].samples; ++i) c.samples.push_back(generate_sample(spec, m, i, id++));
    }
    return c;
}

/// CT-, MRI- and CE-MRI-like styles over the default label space.
inline SynthSpec default_synth_spec(std::size_t img_size = 64, std::size_t samples_per_modality = 64,
                                    std::uint64_t seed = 0) {
    SynthSpec s;
    s.img_size = img_size;
    s.seed = seed;
    s.class_intensity = {{0, 0.10}, {1, 0.46}, {2, 0.64}, {3, 0.82}, {4, 0.28}, {5, 0.68}};
    const auto space = default_label_space();
    const auto& m = space.modalities();
    s.modalities.push_back({m[0], 1.0, 0.05, false, false, {ShapeKind::disk, ShapeKind::rect}, samples_per_modality});
    s.modalities.push_back(
        {m[1], 0.8, 0.05, true, false, {ShapeKind::disk, ShapeKind::rect, ShapeKind::ring}, samples_per_modality});
    s.modalities.push_back({m[2], 1.0, 0.05, false, true, {ShapeKind::disk, ShapeKind::ring}, samples_per_modality});
    return s;
}

// ------------------------------------------------------------------ JSON

inline nlohmann::json to_json(const ModalityDescriptor& m) {
    return {{"id", m.id}, {"name", m.name}, {"class_ids", m.class_ids}, {"in_channels", m.in_channels}};
}

inline ModalityDescriptor modality_from_json(const nlohmann::json& j) {
    ModalityDescriptor m;
    m.id = j.at("id").get<std::size_t>();
    m.name = j.at("name").get<std::string>();
    m.class_ids = j.at("class_ids").get<std::vector<std::size_t>>();
    m.in_channels = j.value("in_channels", std::size_t{1});
    m.validate();
    return m;
}

inline nlohmann::json to_json(const SynthSpec& s) {
    nlohmann::json mods = nlohmann::json::array();
    for (const auto& m : s.modalities) {
        std::vector<std::string> shapes;
        for (auto k : m.shapes) shapes.emplace_back(to_string(k));
        mods.push_back({{"modality", to_json(m.modality)},
                        {"gamma", m.gamma},
                        {"noise", m.noise},
                        {"invert", m.invert},
                        {"ring_enhancement", m.ring_enhancement},
                        {"shapes", shapes},
                        {"samples", m.samples}});
    }
    nlohmann::json levels = nlohmann::json::object();
    for (const auto& [c, v] : s.class_intensity) levels[std::to_string(c)] = v;
    return {{"img_size", s.img_size},   {"seed", s.seed},           {"min_shapes", s.min_shapes},
            {"max_shapes", s.max_shapes}, {"min_extent", s.min_extent}, {"max_extent", s.max_extent},
            {"class_intensity", levels}, {"modalities", mods}};
}

inline SynthSpec synth_spec_from_json(const nlohmann::json& j) {
    try {
        // Without a "modalities" list the three default styles are used, with
        // "samples_per_modality" each.
        const bool styled = j.contains("modalities");
        SynthSpec s = styled ? SynthSpec{}
                             : default_synth_spec(j.value("img_size", std::size_t{64}),
                                                  j.value("samples_per_modality", std::size_t{64}));
        s.img_size = j.value("img_size", s.img_size);
        s.seed = j.value("seed", s.seed);
        s.min_shapes = j.value("min_shapes", s.min_shapes);
        s.max_shapes = j.value("max_shapes", s.max_shapes);
        s.min_extent = j.value("min_extent", s.min_extent);
        s.max_extent = j.value("max_extent", s.max_extent);
        if (styled || j.contains("class_intensity"))
            for (const auto& [k, v] : j.at("class_intensity").items()) s.class_intensity[std::stoul(k)] = v.get<double>();
        for (const auto& m : styled ? j.at("modalities") : nlohmann::json::array()) {
            ModalityStyle st;
            st.modality = modality_from_json(m.at("modality"));
            st.gamma = m.value("gamma", st.gamma);
            st.noise = m.value("noise", st.noise);
            st.invert = m.value("invert", st.invert);
            st.ring_enhancement = m.value("ring_enhancement", st.ring_enhancement);
            if (m.contains("shapes")) {
                st.shapes.clear();
                for (const auto& k : m.at("shapes")) st.shapes.push_back(parse_shape(k.get<std::string>()));
            }
            st.samples = m.at("samples").get<std::size_t>();
            s.modalities.push_back(std::move(st));
        }
        s.validate();
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("synth spec: ") + e.what());
    }
}

// ------------------------------------------------------------------ on disk

inline constexpr int kCorpusVersion = 1;

inline void save_corpus(const std::filesystem::path& dir, const Corpus& c) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "samples");
    nlohmann::json idx;
    idx["format"] = "m4oe-corpus";
    idx["version"] = kCorpusVersion;
    idx["img_size"] = c.img_size;
    idx["seed"] = c.seed;
    idx["modalities"] = nlohmann::json::array();
    for (const auto& m : c.modalities) idx["modalities"].push_back(to_json(m));
    idx["samples"] = nlohmann::json::array();
    for (const auto& s : c.samples) {
        const std::string file = "samples/" + std::to_string(s.id) + ".bin";
        std::vector<NamedTensor> rec;
        rec.push_back({"image", s.image});
        Tensor<float> mask(Shape{c.img_size, c.img_size});
        for (std::size_t i = 0; i < s.mask.size(); ++i) mask[i] = static_cast<float>(s.mask[i]);
        rec.push_back({"mask", mask});
        if (!s.shapes.empty()) {
            Tensor<float> g(Shape{s.shapes.size(), 6});
            for (std::size_t i = 0; i < s.shapes.size(); ++i) {
                const auto& sh = s.shapes[i];
                const float row[6] = {static_cast<float>(sh.kind), static_cast<float>(sh.label), static_cast<float>(sh.cy),
                                      static_cast<float>(sh.cx),   static_cast<float>(sh.a),     static_cast<float>(sh.b)};
                std::copy(row, row + 6, g.data().begin() + static_cast<std::ptrdiff_t>(i * 6));
            }
            rec.push_back({"shapes", g});
        }
        save_records(dir / file, rec);
        idx["samples"].push_back({{"id", s.id}, {"modality", s.modality}, {"file", file}});
    }
    write_file(dir / "index.json", idx.dump(2) + "\n");
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (!fs::exists(dir / "index.json")) throw IoError("corpus: no index.json in " + dir.string());
    nlohmann::json idx;
    try {
        idx = nlohmann::json::parse(read_file(dir / "index.json"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("corpus index: ") + e.what());
    }
    if (idx.value("version", -1) != kCorpusVersion)
        throw FormatError("corpus: unsupported version " + idx.value("version", nlohmann::json()).dump());
    Corpus c;
    try {
        c.img_size = idx.at("img_size").get<std::size_t>();
        c.seed = idx.value("seed", std::uint64_t{0});
        for (const auto& m : idx.at("modalities")) c.modalities.push_back(modality_from_json(m));
        std::size_t on_disk = 0;
        if (fs::exists(dir / "samples"))
            for (const auto& e : fs::directory_iterator(dir / "samples"))
                if (e.path().extension() == ".bin") ++on_disk;
        if (on_disk != idx.at("samples").size())
            throw FormatError("corpus: index lists " + std::to_string(idx.at("samples").size()) + " samples but " +
                              std::to_string(on_disk) + " files are present");
        for (const auto& e : idx.at("samples")) {
            Sample s;
            s.id = e.at("id").get<std::size_t>();
            s.modality = e.at("modality").get<std::size_t>();
            std::size_t k = 0;
            for (const auto& m : c.modalities)
                if (m.id == s.modality) k = m.num_classes();
            if (k == 0) throw FormatError("corpus: sample " + std::to_string(s.id) + " has unknown modality");
            const auto rec = load_records(dir / e.at("file").get<std::string>());
            for (const auto& r : rec) {
                if (r.name == "image") s.image = r.tensor;
                else if (r.name == "mask") {
                    s.mask.resize(r.tensor.size());
                    for (std::size_t i = 0; i < r.tensor.size(); ++i) {
                        const float v = r.tensor[i];
                        if (!(v >= 0) || v >= static_cast<float>(k) || v != std::floor(v))
                            throw DataError("corpus: sample " + std::to_string(s.id) + " mask value out of range");
                        s.mask[i] = static_cast<std::uint8_t>(v);
                    }
                } else if (r.name == "shapes") {
                    for (std::size_t i = 0; i < r.tensor.dim(0); ++i) {
                        const float* row = r.tensor.data().data() + i * 6;
                        s.shapes.push_back({static_cast<ShapeKind>(row[0]), static_cast<std::size_t>(row[1]),
                                            static_cast<std::int64_t>(row[2]), static_cast<std::int64_t>(row[3]),
                                            static_cast<std::int64_t>(row[4]), static_cast<std::int64_t>(row[5])});
                    }
                }
            }
            if (s.image.shape() != Shape{1, c.img_size, c.img_size} || s.mask.size() != c.img_size * c.img_size)
                throw FormatError("corpus: sample " + std::to_string(s.id) + " has wrong geometry");
            c.samples.push_back(std::move(s));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("corpus index: ") + e.what());
    }
    return c;
}

}  // namespace m4oe
