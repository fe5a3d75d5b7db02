#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <filesystem>

#include "ddl/scenegen.hpp"

using namespace ddl;

namespace {

// Brute-force painter's-order reference: sort primitives far-to-near and
// paint over the ground ramp; nearer pixels must win.
struct PainterOracle {
    DepthMap depth;
};

} // namespace

TEST_CASE("generate_scene is deterministic in the seed") {
    SceneSpec spec;
    Scene a = generate_scene(991, spec);
    Scene b = generate_scene(991, spec);
    REQUIRE(a.depth.values == b.depth.values);
    REQUIRE(a.easy_image.data == b.easy_image.data);
    REQUIRE(a.object_mask.values == b.object_mask.values);
    REQUIRE(a.material_mask.values == b.material_mask.values);
    Scene c = generate_scene(992, spec);
    REQUIRE(a.depth.values != c.depth.values);
}

TEST_CASE("empty scene is the bare ground ramp") {
    SceneSpec spec;
    spec.min_objects = 0;
    spec.max_objects = 0;
    Scene s = generate_scene(5, spec);
    for (auto v : s.object_mask.values) REQUIRE(v == 0);
    for (i64 y = 0; y < spec.height; ++y) {
        real expect = spec.d_max + (static_cast<real>(y) / static_cast<real>(spec.height - 1)) * (spec.d_min - spec.d_max);
        for (i64 x = 0; x < spec.width; ++x) REQUIRE(s.depth.at(y, x) == expect);
    }
}

TEST_CASE("scene spec validation") {
    SceneSpec bad;
    bad.d_min = 0.0;
    REQUIRE_THROWS_AS(generate_scene(1, bad), value_error);
    SceneSpec empty;
    empty.width = 0;
    REQUIRE_THROWS_AS(generate_scene(1, empty), value_error);
}

TEST_CASE("depth range and occlusion consistency over many scenes") {
    SceneSpec spec;
    for (u64 seed = 0; seed < 1000; ++seed) {
        Scene s = generate_scene(seed, spec);
        for (real d : s.depth.values) {
            REQUIRE(d >= spec.d_min);
            REQUIRE(d <= spec.d_max);
        }
        // occlusion: pixel depth is the minimum over ground and every
        // covering primitive (the painter's-order result)
        Rng rng(mix_seed(seed, 0x5ce9e));
        real ground_albedo[3];
        for (auto& a : ground_albedo) a = rng.uniform(0.35, 0.65);
        auto prims = ddl::detail::sample_primitives(rng, spec);
        std::vector<ddl::detail::ScenePrimitive> sorted(prims);
        std::stable_sort(sorted.begin(), sorted.end(),
                         [](const auto& a, const auto& b) { return a.depth > b.depth; });
        for (i64 y = 0; y < spec.height; ++y)
            for (i64 x = 0; x < spec.width; ++x) {
                real d = ddl::detail::ground_depth(spec, y);
                for (const auto& p : sorted)
                    if (p.covers(x, y) && p.depth < d) d = p.depth;
                REQUIRE(s.depth.at(y, x) == d);
            }
    }
}

TEST_CASE("zero-strength oracle is the identity for every tag") {
    Scene s = generate_scene(17, SceneSpec{});
    for (auto tag : {ConditionTag::night, ConditionTag::rain, ConditionTag::tom}) {
        Image out = apply_condition_oracle(s, Condition::identity(tag), 3);
        REQUIRE(out.data == s.easy_image.data);
    }
}

TEST_CASE("night gamma obeys the closed form") {
    Scene s = generate_scene(21, SceneSpec{});
    for (auto& v : s.easy_image.data) v = 0.5;
    Condition c = Condition::identity(ConditionTag::night);
    c.gamma = 2.0;
    Image out = apply_condition_oracle(s, c, 0);
    for (real v : out.data) REQUIRE(v == Catch::Approx(0.25).margin(1e-12));
}

TEST_CASE("tom oracle leaves non-ToM pixels bitwise unchanged") {
    SceneSpec spec;
    spec.tom_fraction = 1.0;
    Scene s = generate_scene(33, spec);
    Image out = apply_condition_oracle(s, Condition::defaults(ConditionTag::tom), 9);
    bool any_tom = false;
    for (i64 y = 0; y < s.easy_image.height; ++y)
        for (i64 x = 0; x < s.easy_image.width; ++x) {
            if (s.material_mask.at(y, x) == kMaterialToM) {
                any_tom = true;
                continue;
            }
            for (i64 ch = 0; ch < 3; ++ch) REQUIRE(out.at(ch, y, x) == s.easy_image.at(ch, y, x));
        }
    REQUIRE(any_tom);
}

TEST_CASE("condition oracles never touch depth and are deterministic") {
    Scene s = generate_scene(55, SceneSpec{});
    auto depth_before = s.depth.values;
    for (auto tag : {ConditionTag::night, ConditionTag::rain, ConditionTag::tom}) {
        Condition c = Condition::defaults(tag);
        Image a = apply_condition_oracle(s, c, 7);
        Image b = apply_condition_oracle(s, c, 7);
        REQUIRE(a.data == b.data);
        Image d = apply_condition_oracle(s, c, 8);
        if (tag != ConditionTag::tom) REQUIRE(a.data != d.data); // tom draws no randomness
        REQUIRE(s.depth.values == depth_before);
    }
}

TEST_CASE("default conditions shift the image photometrically") {
    SceneSpec spec;
    for (auto tag : {ConditionTag::night, ConditionTag::rain, ConditionTag::tom}) {
        real total = 0;
        i64 count = 0;
        for (u64 seed = 100; seed < 140; ++seed) {
            Scene s = generate_scene(seed, spec);
            Image hard = apply_condition_oracle(s, Condition::defaults(tag), 1);
            for (std::size_t i = 0; i < hard.data.size(); ++i) total += std::fabs(hard.data[i] - s.easy_image.data[i]);
            count += static_cast<i64>(hard.data.size());
        }
        real mean_shift = total / static_cast<real>(count);
        INFO(to_string(tag));
        REQUIRE(mean_shift > 0.02);
    }
}

TEST_CASE("every scene keeps at least one ToM candidate") {
    SceneSpec spec;
    spec.tom_fraction = 0.0; // would otherwise produce none
    Scene s = generate_scene(3, spec);
    i64 tom_pixels = 0;
    for (auto v : s.material_mask.values)
        if (v == kMaterialToM) ++tom_pixels;
    REQUIRE(tom_pixels > 0);
}

TEST_CASE("image files round-trip through PPM/PGM/PFM") {
    Scene s = generate_scene(71, SceneSpec{});
    auto dir = std::filesystem::temp_directory_path();
    auto ppm = (dir / "ddl_t.ppm").string();
    auto pgm = (dir / "ddl_t.pgm").string();
    auto pfm = (dir / "ddl_t.pfm").string();

    write_ppm(ppm, s.easy_image);
    Image img = read_ppm(ppm);
    REQUIRE(img.width == s.easy_image.width);
    // 8-bit quantization: at most half a step of error, stable thereafter
    for (std::size_t i = 0; i < img.data.size(); ++i)
        REQUIRE(std::fabs(img.data[i] - s.easy_image.data[i]) <= 0.5 / 255.0 + 1e-12);
    write_ppm(ppm, img);
    Image img2 = read_ppm(ppm);
    REQUIRE(img2.data == img.data);

    write_pgm(pgm, s.object_mask);
    PixelMask m = read_pgm(pgm);
    REQUIRE(m.values == s.object_mask.values);

    write_pfm(pfm, s.depth);
    DepthMap d = read_depth_pfm(pfm);
    REQUIRE(d.width == s.depth.width);
    for (std::size_t i = 0; i < d.values.size(); ++i)
        REQUIRE(d.values[i] == Catch::Approx(s.depth.values[i]).epsilon(1e-6));
    // float32 payload: second pass is exact
    write_pfm(pfm, d);
    DepthMap d2 = read_depth_pfm(pfm);
    REQUIRE(d2.values == d.values);

    std::filesystem::remove(ppm);
    std::filesystem::remove(pgm);
    std::filesystem::remove(pfm);
}

TEST_CASE("normalized inverse depth spans [0,1]") {
    Scene s = generate_scene(81, SceneSpec{});
    auto inv = normalized_inverse_depth(s.depth);
    real lo = 1e9, hi = -1e9;
    for (real v : inv) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    REQUIRE(lo == 0.0);
    REQUIRE(hi == 1.0);
}
