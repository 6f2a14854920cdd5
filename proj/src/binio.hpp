#pragma once

// Little-endian binary IO helpers shared by the model and filter formats.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "kvf/errors.hpp"

namespace kvf::binio {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v),
                          static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
    write_u32(os, static_cast<std::uint32_t>(v));
    write_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline void write_f32(std::ostream& os, float v) {
    std::uint32_t bits;
    static_assert(sizeof(bits) == sizeof(v));
    std::memcpy(&bits, &v, 4);
    write_u32(os, bits);
}

struct Reader {
    std::ifstream in;
    std::size_t offset = 0;
    std::string path;

    explicit Reader(const std::string& p) : in(p, std::ios::binary), path(p) {
        if (!in) throw FormatError("cannot open " + p, 0);
    }

    void read_bytes(void* dst, std::size_t n, const std::string& what) {
        in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in.gcount()) != n)
            throw FormatError("truncated file while reading " + what, offset);
        offset += n;
    }

    std::uint32_t read_u32(const std::string& what) {
        unsigned char b[4];
        read_bytes(b, 4, what);
        return static_cast<std::uint32_t>(b[0]) |
               (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) |
               (static_cast<std::uint32_t>(b[3]) << 24);
    }

    std::uint64_t read_u64(const std::string& what) {
        const std::uint64_t lo = read_u32(what);
        const std::uint64_t hi = read_u32(what);
        return lo | (hi << 32);
    }

    float read_f32(const std::string& what) {
        const std::uint32_t bits = read_u32(what);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
};

}  // namespace kvf::binio
