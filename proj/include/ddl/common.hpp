#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ddl {

// Project-wide scalar. 64-bit keeps the least-squares alignments and the
// metric reductions well inside the tolerances the test suite pins.
using real = double;

using i64 = std::int64_t;
using u64 = std::uint64_t;

struct dim_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct value_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void check(bool ok, const std::string& msg) {
    if (!ok) throw value_error(msg);
}

inline void check_dims(bool ok, const std::string& msg) {
    if (!ok) throw dim_error(msg);
}

// FNV-1a, used to stamp configs and artifacts.
inline u64 fnv1a(const void* bytes, std::size_t n, u64 h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline u64 fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

inline std::string hash_hex(u64 h) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

} // namespace ddl
