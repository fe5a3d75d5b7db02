#pragma once

#include <cmath>
#include <random>

#include "ddl/common.hpp"

namespace ddl {

// splitmix64, used to derive independent seeds from (seed, stream ids).
inline u64 splitmix64(u64 x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline u64 mix_seed(u64 a, u64 b) { return splitmix64(splitmix64(a) ^ (b + 0x9e3779b97f4a7c15ull)); }

inline u64 mix_seed(u64 a, u64 b, u64 c) { return mix_seed(mix_seed(a, b), c); }

inline u64 mix_seed(u64 a, u64 b, u64 c, u64 d) { return mix_seed(mix_seed(a, b, c), d); }

// Deterministic RNG. std::mt19937_64 has a standard-specified output
// sequence; the distributions below are hand-rolled because the standard
// library distributions are implementation-defined and would break
// cross-toolchain reproducibility.
class Rng {
public:
    explicit Rng(u64 seed) : gen_(seed) {}

    u64 next_u64() { return gen_(); }

    // Uniform in [0, 1) with 53 random mantissa bits.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi] (inclusive) by rejection.
    i64 uniform_int(i64 lo, i64 hi) {
        u64 span = static_cast<u64>(hi - lo) + 1;
        u64 limit = ~u64{0} - (~u64{0} % span);
        u64 x;
        do {
            x = gen_();
        } while (x >= limit);
        return lo + static_cast<i64>(x % span);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Standard normal via Box-Muller; the cosine twin is cached.
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        double u2 = uniform();
        // u1 == 0 would send log to -inf.
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    std::mt19937_64 gen_;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

} // namespace ddl
