#pragma once

#include <cmath>
#include <cstdlib>
#include <limits>
#include <string>
#include <vector>

#include "ddl/image.hpp"
#include "ddl/rng.hpp"

namespace ddl {

enum class ConditionTag { night, rain, tom };

inline const char* to_string(ConditionTag t) {
    switch (t) {
        case ConditionTag::night: return "night";
        case ConditionTag::rain: return "rain";
        case ConditionTag::tom: return "tom";
    }
    throw value_error("unknown condition tag");
}

inline ConditionTag parse_condition_tag(const std::string& s) {
    if (s == "night") return ConditionTag::night;
    if (s == "rain") return ConditionTag::rain;
    if (s == "tom") return ConditionTag::tom;
    throw value_error("unknown condition tag: " + s);
}

// A condition and its oracle strengths. Zeroed strengths (gamma = 1) make
// the oracle an exact identity.
struct Condition {
    ConditionTag tag = ConditionTag::night;
    std::string name = "night";
    // night
    real gamma = 1.0;
    real blue_bias = 0.0;
    real noise_sigma = 0.0;
    // rain
    real streak_density = 0.0;
    real blur_mix = 0.0;
    real contrast_drop = 0.0;
    // tom
    real reflect_strength = 0.0;

    static Condition defaults(ConditionTag t) {
        Condition c;
        c.tag = t;
        c.name = to_string(t);
        switch (t) {
            case ConditionTag::night:
                c.gamma = 2.4;
                c.blue_bias = 0.05;
                c.noise_sigma = 0.04;
                break;
            case ConditionTag::rain:
                c.streak_density = 0.10;
                c.blur_mix = 0.6;
                c.contrast_drop = 0.35;
                break;
            case ConditionTag::tom:
                c.reflect_strength = 0.9;
                break;
        }
        return c;
    }

    static Condition identity(ConditionTag t, std::string name = "identity") {
        Condition c;
        c.tag = t;
        c.name = std::move(name);
        c.gamma = 1.0;
        return c;
    }
};

struct SceneSpec {
    i64 width = 32;
    i64 height = 32;
    i64 min_objects = 2;
    i64 max_objects = 6;
    real d_min = 2.0;
    real d_max = 10.0;
    real tom_fraction = 0.5; // fraction of objects flagged as ToM candidates
    i64 half_extent_min = 3;
    i64 half_extent_max = 9;
};

// Procedural ground truth: metric depth, the easy rendering and per-pixel
// object/material masks. Fully determined by (seed, spec).
struct Scene {
    std::string id;
    u64 seed = 0;
    real d_min = 0;
    real d_max = 0;
    DepthMap depth;
    Image easy_image;
    PixelMask object_mask;   // 0 background, k>=1 object instance k
    PixelMask material_mask; // kMaterialLambertian | kMaterialToM
};

namespace detail {

struct ScenePrimitive {
    bool ellipse = false;
    i64 cx = 0, cy = 0, hx = 0, hy = 0;
    real depth = 0;
    real albedo[3] = {0, 0, 0};
    bool tom = false;

    bool covers(i64 x, i64 y) const {
        if (!ellipse) return std::llabs(x - cx) <= hx && std::llabs(y - cy) <= hy;
        real dx = static_cast<real>(x - cx) / static_cast<real>(hx);
        real dy = static_cast<real>(y - cy) / static_cast<real>(hy);
        return dx * dx + dy * dy <= real{1};
    }
};

inline std::vector<ScenePrimitive> sample_primitives(Rng& rng, const SceneSpec& spec) {
    i64 count = rng.uniform_int(spec.min_objects, spec.max_objects);
    std::vector<ScenePrimitive> prims(static_cast<std::size_t>(count));
    for (auto& p : prims) {
        p.ellipse = rng.bernoulli(0.5);
        p.cx = rng.uniform_int(0, spec.width - 1);
        p.cy = rng.uniform_int(0, spec.height - 1);
        p.hx = rng.uniform_int(spec.half_extent_min, spec.half_extent_max);
        p.hy = rng.uniform_int(spec.half_extent_min, spec.half_extent_max);
        p.depth = rng.uniform(spec.d_min, spec.d_min + real{0.85} * (spec.d_max - spec.d_min));
        for (auto& a : p.albedo) a = rng.uniform(0.15, 0.95);
        p.tom = rng.bernoulli(spec.tom_fraction);
    }
    // Every scene keeps at least one ToM candidate so the tom oracle and the
    // ToM evaluation category are never vacuous.
    if (!prims.empty()) {
        bool any = false;
        for (const auto& p : prims) any = any || p.tom;
        if (!any) prims[static_cast<std::size_t>(rng.uniform_int(0, count - 1))].tom = true;
    }
    return prims;
}

inline real ground_depth(const SceneSpec& spec, i64 y) {
    real frac = spec.height > 1 ? static_cast<real>(y) / static_cast<real>(spec.height - 1) : real{0};
    return spec.d_max + frac * (spec.d_min - spec.d_max); // far at the top, near at the bottom
}

inline real depth_shade(real d, real d_min, real d_max) {
    real t = (d - d_min) / (d_max - d_min);
    return real{0.3} + real{0.7} * (real{1} - t);
}

} // namespace detail

inline Scene generate_scene(u64 seed, const SceneSpec& spec, std::string id = "") {
    check(spec.d_min > 0, "scene spec: d_min must be positive");
    check(spec.d_max > spec.d_min, "scene spec: d_max must exceed d_min");
    check(spec.width > 0 && spec.height > 0, "scene spec: empty resolution");
    check(spec.min_objects >= 0 && spec.max_objects >= spec.min_objects, "scene spec: bad object count range");

    Rng rng(mix_seed(seed, 0x5ce9e));
    Scene s;
    s.id = std::move(id);
    s.seed = seed;
    s.d_min = spec.d_min;
    s.d_max = spec.d_max;
    s.depth = DepthMap(spec.width, spec.height);
    s.easy_image = Image(spec.width, spec.height);
    s.object_mask = PixelMask(spec.width, spec.height, 0);
    s.material_mask = PixelMask(spec.width, spec.height, kMaterialLambertian);

    real ground_albedo[3];
    for (auto& a : ground_albedo) a = rng.uniform(0.35, 0.65);
    auto prims = detail::sample_primitives(rng, spec);

    for (i64 y = 0; y < spec.height; ++y) {
        for (i64 x = 0; x < spec.width; ++x) {
            real d = detail::ground_depth(spec, y);
            const real* albedo = ground_albedo;
            i64 obj = 0;
            bool tom = false;
            // z-buffer: strictly nearer primitives overwrite
            for (std::size_t k = 0; k < prims.size(); ++k) {
                const auto& p = prims[k];
                if (p.covers(x, y) && p.depth < d) {
                    d = p.depth;
                    albedo = p.albedo;
                    obj = static_cast<i64>(k) + 1;
                    tom = p.tom;
                }
            }
            s.depth.at(y, x) = d;
            s.object_mask.at(y, x) = static_cast<std::uint8_t>(obj);
            s.material_mask.at(y, x) = tom ? kMaterialToM : kMaterialLambertian;
            real shade = detail::depth_shade(d, spec.d_min, spec.d_max);
            for (i64 c = 0; c < 3; ++c) s.easy_image.at(c, y, x) = albedo[c] * shade;
        }
    }
    s.easy_image.clamp01();
    return s;
}

// ---------------------------------------------------------------------------
// Condition oracles: ground-truth adverse appearance. Depth is never touched.
// ---------------------------------------------------------------------------

namespace detail {

inline void oracle_night(Image& img, const Condition& c, Rng& rng) {
    if (c.gamma != real{1})
        for (auto& v : img.data) v = std::pow(std::max(v, real{0}), c.gamma);
    if (c.blue_bias != real{0}) {
        i64 hw = img.width * img.height;
        for (i64 i = 0; i < hw; ++i) img.data[static_cast<std::size_t>(2 * hw + i)] += c.blue_bias;
    }
    if (c.noise_sigma != real{0})
        for (auto& v : img.data) v += c.noise_sigma * rng.normal();
    img.clamp01();
}

inline void oracle_rain(Image& img, const Condition& c, Rng& rng) {
    if (c.streak_density != real{0}) {
        i64 count = static_cast<i64>(std::llround(c.streak_density * static_cast<real>(img.width * img.height) / real{10}));
        for (i64 k = 0; k < count; ++k) {
            real x = rng.uniform(0, static_cast<real>(img.width));
            real y = rng.uniform(0, static_cast<real>(img.height));
            i64 len = rng.uniform_int(5, 11);
            real slope = rng.uniform(0.2, 0.45); // mostly vertical streaks
            real strength = rng.uniform(0.25, 0.45);
            for (i64 t = 0; t < len; ++t) {
                i64 px = static_cast<i64>(std::llround(x + slope * static_cast<real>(t)));
                i64 py = static_cast<i64>(std::llround(y + static_cast<real>(t)));
                if (px < 0 || px >= img.width || py < 0 || py >= img.height) continue;
                for (i64 ch = 0; ch < 3; ++ch) {
                    real& v = img.at(ch, py, px);
                    v = v + strength * (real{1} - v);
                }
            }
        }
    }
    if (c.blur_mix != real{0}) {
        Image src = img;
        for (i64 ch = 0; ch < 3; ++ch)
            for (i64 y = 0; y < img.height; ++y)
                for (i64 x = 0; x < img.width; ++x) {
                    real acc = 0;
                    i64 n = 0;
                    for (i64 dy = -1; dy <= 1; ++dy)
                        for (i64 dx = -1; dx <= 1; ++dx) {
                            i64 yy = y + dy, xx = x + dx;
                            if (yy < 0 || yy >= img.height || xx < 0 || xx >= img.width) continue;
                            acc += src.at(ch, yy, xx);
                            ++n;
                        }
                    img.at(ch, y, x) = (real{1} - c.blur_mix) * src.at(ch, y, x) + c.blur_mix * acc / static_cast<real>(n);
                }
    }
    if (c.contrast_drop != real{0})
        for (auto& v : img.data) v = real{0.5} + (v - real{0.5}) * (real{1} - c.contrast_drop);
    img.clamp01();
}

inline void oracle_tom(Image& img, const Image& easy, const PixelMask& material, const Condition& c) {
    if (c.reflect_strength == real{0}) return;
    real beta = c.reflect_strength;
    for (i64 y = 0; y < img.height; ++y)
        for (i64 x = 0; x < img.width; ++x) {
            if (material.at(y, x) != kMaterialToM) continue;
            for (i64 ch = 0; ch < 3; ++ch) {
                real mirrored = easy.at(ch, y, img.width - 1 - x);
                real v = (real{1} - beta) * easy.at(ch, y, x) + beta * (real{0.9} * mirrored + real{0.08});
                img.at(ch, y, x) = std::min(real{1}, std::max(real{0}, v));
            }
        }
}

} // namespace detail

// Renders the ground-truth adverse counterpart of a scene's easy image.
// Deterministic in (scene.seed, condition tag, seed); depth and masks are
// left untouched, and with all strengths zeroed the output equals the easy
// image bitwise.
inline Image apply_condition_oracle(const Scene& scene, const Condition& c, u64 seed) {
    Rng rng(mix_seed(scene.seed, static_cast<u64>(c.tag), seed, 0x0a7ac1e));
    Image out = scene.easy_image;
    switch (c.tag) {
        case ConditionTag::night:
            detail::oracle_night(out, c, rng);
            break;
        case ConditionTag::rain:
            detail::oracle_rain(out, c, rng);
            break;
        case ConditionTag::tom:
            detail::oracle_tom(out, scene.easy_image, scene.material_mask, c);
            break;
        default:
            throw value_error("unknown condition tag");
    }
    return out;
}

// Per-image min-max normalized inverse depth, the conditioning plane for
// depth-aware generation.
inline std::vector<real> normalized_inverse_depth(const DepthMap& d) {
    std::vector<real> inv(d.values.size(), real{0});
    real lo = std::numeric_limits<real>::max();
    real hi = std::numeric_limits<real>::lowest();
    for (std::size_t i = 0; i < d.values.size(); ++i) {
        if (!d.valid[i]) continue;
        real v = real{1} / d.values[i];
        inv[i] = v;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (!(hi > lo)) return std::vector<real>(d.values.size(), real{0});
    real scale = real{1} / (hi - lo);
    for (std::size_t i = 0; i < inv.size(); ++i) inv[i] = d.valid[i] ? (inv[i] - lo) * scale : real{0};
    return inv;
}

} // namespace ddl
