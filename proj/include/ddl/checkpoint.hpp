#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "ddl/tensor.hpp"

namespace ddl {

// Flat binary parameter container. Layout:
//   magic "DDL1"
//   per tensor: u64 name length, name bytes, u64 rank, u64 dims[rank],
//               payload of product(dims) little-endian 64-bit floats.
// Round-trips are bit-exact.
namespace detail {

inline void write_u64(std::ostream& os, u64 v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline bool read_u64(std::istream& is, u64& v) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (is.gcount() != 8) return false;
    v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<u64>(b[i]) << (8 * i);
    return true;
}

inline void write_real(std::ostream& os, real v) {
    static_assert(sizeof(real) == 8, "checkpoint payload assumes 64-bit floats");
    u64 bits;
    std::memcpy(&bits, &v, 8);
    write_u64(os, bits);
}

inline bool read_real(std::istream& is, real& v) {
    u64 bits;
    if (!read_u64(is, bits)) return false;
    std::memcpy(&v, &bits, 8);
    return true;
}

} // namespace detail

inline void save_checkpoint(const std::string& path, const std::map<std::string, Tensor>& tensors) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw io_error("cannot open checkpoint for writing: " + path);
    os.write("DDL1", 4);
    for (const auto& [name, t] : tensors) {
        detail::write_u64(os, name.size());
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_u64(os, t.shape().size());
        for (i64 d : t.shape()) detail::write_u64(os, static_cast<u64>(d));
        for (real v : t.data()) detail::write_real(os, v);
    }
    if (!os) throw io_error("write failed: " + path);
}

inline std::map<std::string, Tensor> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open checkpoint: " + path);
    char magic[4];
    is.read(magic, 4);
    if (is.gcount() != 4 || std::memcmp(magic, "DDL1", 4) != 0)
        throw io_error("bad checkpoint magic in " + path);
    std::map<std::string, Tensor> out;
    u64 name_len;
    while (detail::read_u64(is, name_len)) {
        std::string name(name_len, '\0');
        is.read(name.data(), static_cast<std::streamsize>(name_len));
        if (is.gcount() != static_cast<std::streamsize>(name_len)) throw io_error("truncated checkpoint: " + path);
        u64 rank;
        if (!detail::read_u64(is, rank)) throw io_error("truncated checkpoint: " + path);
        std::vector<i64> shape(rank);
        u64 count = 1;
        for (auto& d : shape) {
            u64 dim;
            if (!detail::read_u64(is, dim)) throw io_error("truncated checkpoint: " + path);
            d = static_cast<i64>(dim);
            count *= dim;
        }
        std::vector<real> data(count);
        for (auto& v : data)
            if (!detail::read_real(is, v)) throw io_error("truncated checkpoint: " + path);
        out.emplace(name, Tensor::from_data(std::move(shape), std::move(data)));
    }
    return out;
}

// Copies values from a loaded container into existing (typically parameter)
// tensors, by name. Every destination name must be present.
inline void restore_into(const std::map<std::string, Tensor>& loaded,
                         const std::map<std::string, Tensor>& dests) {
    for (const auto& [name, dst] : dests) {
        auto it = loaded.find(name);
        if (it == loaded.end()) throw io_error("checkpoint missing tensor: " + name);
        check_dims(it->second.shape() == dst.shape(), "checkpoint shape mismatch for " + name);
        const_cast<Tensor&>(dst).data() = it->second.data();
    }
}

} // namespace ddl
