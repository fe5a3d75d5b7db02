#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "ddl/common.hpp"

namespace ddl {

// 3-channel float image, planar RGB, values in [0,1].
struct Image {
    i64 width = 0;
    i64 height = 0;
    std::vector<real> data; // [3][H][W]

    Image() = default;
    Image(i64 w, i64 h) : width(w), height(h), data(static_cast<std::size_t>(3 * w * h), real{0}) {}

    real& at(i64 c, i64 y, i64 x) { return data[static_cast<std::size_t>((c * height + y) * width + x)]; }
    real at(i64 c, i64 y, i64 x) const { return data[static_cast<std::size_t>((c * height + y) * width + x)]; }

    void clamp01() {
        for (auto& v : data) v = std::min(real{1}, std::max(real{0}, v));
    }

    bool same_shape(const Image& o) const { return width == o.width && height == o.height; }
};

// Per-pixel metric depth in meters plus a validity mask.
struct DepthMap {
    i64 width = 0;
    i64 height = 0;
    std::vector<real> values;       // [H][W]
    std::vector<std::uint8_t> valid; // [H][W], nonzero = valid

    DepthMap() = default;
    DepthMap(i64 w, i64 h)
        : width(w), height(h), values(static_cast<std::size_t>(w * h), real{0}),
          valid(static_cast<std::size_t>(w * h), 1) {}

    real& at(i64 y, i64 x) { return values[static_cast<std::size_t>(y * width + x)]; }
    real at(i64 y, i64 x) const { return values[static_cast<std::size_t>(y * width + x)]; }
    bool is_valid(i64 y, i64 x) const { return valid[static_cast<std::size_t>(y * width + x)] != 0; }
};

// Material categories stored in per-pixel masks.
inline constexpr std::uint8_t kMaterialLambertian = 0;
inline constexpr std::uint8_t kMaterialToM = 1;

// Integer-valued per-pixel map (object ids, material categories, validity).
struct PixelMask {
    i64 width = 0;
    i64 height = 0;
    std::vector<std::uint8_t> values; // [H][W]

    PixelMask() = default;
    PixelMask(i64 w, i64 h, std::uint8_t fill = 0)
        : width(w), height(h), values(static_cast<std::size_t>(w * h), fill) {}

    std::uint8_t& at(i64 y, i64 x) { return values[static_cast<std::size_t>(y * width + x)]; }
    std::uint8_t at(i64 y, i64 x) const { return values[static_cast<std::size_t>(y * width + x)]; }
};

// Inverse depth (1/meters) prediction or label.
struct InverseDepthMap {
    i64 width = 0;
    i64 height = 0;
    std::vector<real> values;        // [H][W]
    std::vector<std::uint8_t> valid; // [H][W]

    InverseDepthMap() = default;
    InverseDepthMap(i64 w, i64 h)
        : width(w), height(h), values(static_cast<std::size_t>(w * h), real{0}),
          valid(static_cast<std::size_t>(w * h), 1) {}

    real& at(i64 y, i64 x) { return values[static_cast<std::size_t>(y * width + x)]; }
    real at(i64 y, i64 x) const { return values[static_cast<std::size_t>(y * width + x)]; }
};

// ---------------------------------------------------------------------------
// PPM / PGM / PFM
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint8_t quantize8(real v) {
    real c = std::min(real{1}, std::max(real{0}, v));
    return static_cast<std::uint8_t>(std::lround(c * real{255}));
}

inline void read_pnm_header(std::istream& is, const char* magic, i64& w, i64& h, i64& maxval,
                            const std::string& path) {
    std::string m;
    is >> m;
    if (m != magic) throw io_error("bad magic in " + path + " (expected " + magic + ")");
    // Headers may contain comment lines.
    auto next_int = [&](i64& out) {
        while (true) {
            int c = is.peek();
            if (c == '#') {
                std::string line;
                std::getline(is, line);
            } else if (std::isspace(c)) {
                is.get();
            } else {
                break;
            }
        }
        is >> out;
    };
    next_int(w);
    next_int(h);
    next_int(maxval);
    is.get(); // single whitespace before payload
    if (!is) throw io_error("truncated header in " + path);
}

} // namespace detail

inline void write_ppm(const std::string& path, const Image& img) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw io_error("cannot write " + path);
    os << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<std::uint8_t> row(static_cast<std::size_t>(img.width) * 3);
    for (i64 y = 0; y < img.height; ++y) {
        for (i64 x = 0; x < img.width; ++x)
            for (i64 c = 0; c < 3; ++c)
                row[static_cast<std::size_t>(x * 3 + c)] = detail::quantize8(img.at(c, y, x));
        os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!os) throw io_error("write failed: " + path);
}

inline Image read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open " + path);
    i64 w, h, maxval;
    detail::read_pnm_header(is, "P6", w, h, maxval, path);
    check(maxval == 255, "unsupported PPM maxval in " + path);
    Image img(w, h);
    std::vector<std::uint8_t> row(static_cast<std::size_t>(w) * 3);
    for (i64 y = 0; y < h; ++y) {
        is.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
        if (is.gcount() != static_cast<std::streamsize>(row.size())) throw io_error("truncated " + path);
        for (i64 x = 0; x < w; ++x)
            for (i64 c = 0; c < 3; ++c)
                img.at(c, y, x) = static_cast<real>(row[static_cast<std::size_t>(x * 3 + c)]) / real{255};
    }
    return img;
}

inline void write_pgm(const std::string& path, const PixelMask& mask) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw io_error("cannot write " + path);
    os << "P5\n" << mask.width << " " << mask.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(mask.values.data()),
             static_cast<std::streamsize>(mask.values.size()));
    if (!os) throw io_error("write failed: " + path);
}

inline PixelMask read_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open " + path);
    i64 w, h, maxval;
    detail::read_pnm_header(is, "P5", w, h, maxval, path);
    check(maxval == 255, "unsupported PGM maxval in " + path);
    PixelMask mask(w, h);
    is.read(reinterpret_cast<char*>(mask.values.data()), static_cast<std::streamsize>(mask.values.size()));
    if (is.gcount() != static_cast<std::streamsize>(mask.values.size())) throw io_error("truncated " + path);
    return mask;
}

// Grayscale PFM, little-endian (scale -1.0), rows bottom-to-top as the
// format prescribes. Payload is 32-bit; values round-trip through float.
inline void write_pfm(const std::string& path, const std::vector<real>& values, i64 width, i64 height) {
    check_dims(static_cast<i64>(values.size()) == width * height, "write_pfm: size mismatch");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw io_error("cannot write " + path);
    os << "Pf\n" << width << " " << height << "\n-1.0\n";
    std::vector<float> row(static_cast<std::size_t>(width));
    for (i64 y = height - 1; y >= 0; --y) {
        for (i64 x = 0; x < width; ++x)
            row[static_cast<std::size_t>(x)] = static_cast<float>(values[static_cast<std::size_t>(y * width + x)]);
        os.write(reinterpret_cast<const char*>(row.data()),
                 static_cast<std::streamsize>(row.size() * sizeof(float)));
    }
    if (!os) throw io_error("write failed: " + path);
}

inline std::vector<real> read_pfm(const std::string& path, i64& width, i64& height) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open " + path);
    std::string magic;
    is >> magic;
    if (magic != "Pf") throw io_error("bad PFM magic in " + path);
    double scale;
    is >> width >> height >> scale;
    is.get();
    if (!is || width <= 0 || height <= 0) throw io_error("bad PFM header in " + path);
    check(scale < 0, "big-endian PFM unsupported: " + path);
    std::vector<real> values(static_cast<std::size_t>(width * height));
    std::vector<float> row(static_cast<std::size_t>(width));
    for (i64 y = height - 1; y >= 0; --y) {
        is.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(float)));
        if (is.gcount() != static_cast<std::streamsize>(row.size() * sizeof(float)))
            throw io_error("truncated " + path);
        for (i64 x = 0; x < width; ++x)
            values[static_cast<std::size_t>(y * width + x)] = static_cast<real>(row[static_cast<std::size_t>(x)]);
    }
    return values;
}

inline void write_pfm(const std::string& path, const DepthMap& d) { write_pfm(path, d.values, d.width, d.height); }
inline void write_pfm(const std::string& path, const InverseDepthMap& d) { write_pfm(path, d.values, d.width, d.height); }

inline DepthMap read_depth_pfm(const std::string& path) {
    DepthMap d;
    d.values = read_pfm(path, d.width, d.height);
    d.valid.assign(d.values.size(), 1);
    return d;
}

inline InverseDepthMap read_inverse_depth_pfm(const std::string& path) {
    InverseDepthMap d;
    d.values = read_pfm(path, d.width, d.height);
    d.valid.assign(d.values.size(), 1);
    return d;
}

} // namespace ddl
