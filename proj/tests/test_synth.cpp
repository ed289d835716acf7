#include <gtest/gtest.h>

#include <filesystem>

#include "m4oe/synth.hpp"

using namespace m4oe;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("m4oe_synth_" + name);
    fs::remove_all(p);
    return p;
}

}  // namespace

TEST(Synth, ZeroShapesGiveBackgroundOnly) {
    auto spec = default_synth_spec(32, 5, 1);
    spec.min_shapes = spec.max_shapes = 0;
    for (const auto& s : generate(spec).samples) {
        EXPECT_TRUE(s.shapes.empty());
        for (auto v : s.mask) EXPECT_EQ(v, 0);
    }
}

TEST(Synth, SameSeedSameBytes) {
    auto spec = default_synth_spec(32, 6, 7);
    auto a = scratch("a"), b = scratch("b");
    save_corpus(a, generate(spec));
    save_corpus(b, generate(spec));
    EXPECT_EQ(read_file(a / "index.json"), read_file(b / "index.json"));
    for (const auto& e : fs::directory_iterator(a / "samples"))
        EXPECT_EQ(read_file(e.path()), read_file(b / "samples" / e.path().filename()));
    spec.seed = 8;
    EXPECT_NE(generate(spec), generate(default_synth_spec(32, 6, 7)));
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST(Synth, InvariantsAndGeometryOracle) {
    const auto spec = default_synth_spec(32, 40, 3);
    const auto c = generate(spec);
    ASSERT_EQ(c.samples.size(), 120u);
    for (const auto& s : c.samples) {
        const auto& mod = c.modalities.at(s.modality);
        EXPECT_TRUE(s.image.all_finite());
        for (float v : s.image.data()) {
            EXPECT_GE(v, 0.f);
            EXPECT_LE(v, 1.f);
        }
        for (auto v : s.mask) EXPECT_LT(v, mod.num_classes());
        EXPECT_GE(s.shapes.size(), 1u);
        EXPECT_LE(s.shapes.size(), 4u);
        EXPECT_EQ(rasterize(s.shapes, 32), s.mask);  // the retained geometry is a perfect predictor
        for (const auto& sh : s.shapes) {
            const auto extent = sh.kind == ShapeKind::rect ? std::min(sh.a, sh.b) : 2 * sh.a + 1;
            EXPECT_GE(extent, 6);
        }
    }
}

TEST(Synth, ShapesDoNotOverlap) {
    const auto c = generate(default_synth_spec(32, 30, 4));
    for (const auto& s : c.samples)
        for (std::size_t i = 0; i < s.shapes.size(); ++i)
            for (std::size_t j = i + 1; j < s.shapes.size(); ++j)
                for (std::int64_t y = 0; y < 32; ++y)
                    for (std::int64_t x = 0; x < 32; ++x)
                        EXPECT_FALSE(s.shapes[i].covers(y, x) && s.shapes[j].covers(y, x));
}

TEST(Synth, EveryClassAppearsOften) {
    const auto c = generate(default_synth_spec(32, 1000, 5));
    for (const auto& m : c.modalities) {
        std::vector<std::size_t> seen(m.num_classes(), 0);
        std::size_t n = 0;
        for (auto i : c.indices_of(m.id)) {
            ++n;
            std::vector<bool> here(m.num_classes(), false);
            for (auto v : c.samples[i].mask) here[v] = true;
            for (std::size_t k = 0; k < here.size(); ++k) seen[k] += here[k];
        }
        ASSERT_EQ(n, 1000u);
        for (std::size_t k = 0; k < seen.size(); ++k) EXPECT_GE(seen[k], 50u) << m.name << " class " << k;
    }
}

TEST(Synth, ModalityIntensityStyles) {
    // MRI inverts contrast: its background is bright, CT's is dark.
    const auto c = generate(default_synth_spec(32, 20, 6));
    auto bg_mean = [&](std::size_t mod) {
        double s = 0;
        std::size_t n = 0;
        for (auto i : c.indices_of(mod))
            for (std::size_t p = 0; p < c.samples[i].mask.size(); ++p)
                if (c.samples[i].mask[p] == 0) s += c.samples[i].image[p], ++n;
        return s / static_cast<double>(n);
    };
    EXPECT_LT(bg_mean(0), 0.2);
    EXPECT_GT(bg_mean(1), 0.8);
}

TEST(Synth, SpecValidation) {
    auto spec = default_synth_spec(32, 2, 0);
    spec.min_shapes = 5;
    EXPECT_THROW(generate(spec), ConfigError);
    spec = default_synth_spec(32, 2, 0);
    spec.class_intensity.erase(5);
    EXPECT_THROW(generate(spec), ConfigError);
    spec = default_synth_spec(32, 2, 0);
    EXPECT_EQ(synth_spec_from_json(to_json(spec)), spec);
}

TEST(Corpus, RoundTripIsBitExact) {
    const auto c = generate(default_synth_spec(32, 4, 9));  // 12 samples
    auto dir = scratch("rt");
    save_corpus(dir, c);
    EXPECT_EQ(load_corpus(dir), c);
    fs::remove_all(dir);
}

TEST(Corpus, EmptySceneRoundTrips) {
    auto spec = default_synth_spec(16, 2, 1);
    spec.min_shapes = spec.max_shapes = 0;
    spec.max_extent = 5;
    spec.min_extent = 5;
    const auto c = generate(spec);
    auto dir = scratch("empty");
    save_corpus(dir, c);
    EXPECT_EQ(load_corpus(dir), c);
    fs::remove_all(dir);
}

TEST(Corpus, CorruptionGuards) {
    const auto c = generate(default_synth_spec(32, 4, 10));
    auto dir = scratch("bad");
    save_corpus(dir, c);

    fs::remove(dir / "samples" / "3.bin");
    EXPECT_THROW(load_corpus(dir), FormatError);
    save_corpus(dir, c);

    auto bytes = read_file(dir / "samples" / "2.bin");
    write_file(dir / "samples" / "2.bin", bytes.substr(0, bytes.size() / 2));
    EXPECT_THROW(load_corpus(dir), FormatError);
    save_corpus(dir, c);

    auto idx = nlohmann::json::parse(read_file(dir / "index.json"));
    idx["version"] = 2;
    write_file(dir / "index.json", idx.dump());
    EXPECT_THROW(load_corpus(dir), FormatError);

    idx["version"] = 1;
    idx["future_field"] = {{"x", 1}};
    idx["samples"][0]["checksum"] = "abc";
    write_file(dir / "index.json", idx.dump());
    EXPECT_EQ(load_corpus(dir), c);

    EXPECT_THROW(load_corpus(dir / "nope"), IoError);
    fs::remove_all(dir);
}
