#pragma once

// Named-array container files used for checkpoints.
//
// Layout (all integers little-endian):
//   magic "UIPA" | u32 version | u32 entry_count
//   per entry: u32 name_bytes | UTF-8 name | u32 rank | u64 dims[rank]
//   payloads: IEEE-754 binary64, little-endian, entries in declaration order

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "uipress/errors.hpp"
#include "uipress/tensor.hpp"

namespace uipress {

namespace io {

template <typename T>
void write_le(std::ostream& os, T value) {
    static_assert(std::is_integral_v<T> || std::is_floating_point_v<T>);
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                    std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
    U bits = std::bit_cast<U>(value);
    unsigned char buf[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        buf[i] = static_cast<unsigned char>(bits >> (8 * i));
    }
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                    std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
    unsigned char buf[sizeof(T)];
    if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) {
        throw DataError("unexpected end of file");
    }
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        bits |= static_cast<U>(static_cast<U>(buf[i]) << (8 * i));
    }
    return std::bit_cast<T>(bits);
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, std::size_t max_len = 1 << 20) {
    const auto n = read_le<std::uint32_t>(is);
    if (n > max_len) {
        throw DataError("string length " + std::to_string(n) + " exceeds limit");
    }
    std::string s(n, '\0');
    if (n > 0 && !is.read(s.data(), n)) {
        throw DataError("unexpected end of file in string");
    }
    return s;
}

inline void expect_magic(std::istream& is, const char (&magic)[5], const std::string& what) {
    char buf[4];
    if (!is.read(buf, 4) || std::memcmp(buf, magic, 4) != 0) {
        throw DataError(what + ": bad magic, not a " + magic + " file");
    }
}

}  // namespace io

struct NamedArray {
    std::string name;
    Tensor array;
};

inline constexpr std::uint32_t kArrayFormatVersion = 1;

inline void write_arrays(std::ostream& os, const std::vector<NamedArray>& entries) {
    os.write("UIPA", 4);
    io::write_le<std::uint32_t>(os, kArrayFormatVersion);
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
        io::write_string(os, e.name);
        io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.array.rank()));
        for (auto d : e.array.shape()) {
            io::write_le<std::uint64_t>(os, d);
        }
    }
    for (const auto& e : entries) {
        for (double v : e.array.values()) {
            io::write_le<double>(os, v);
        }
    }
}

inline std::vector<NamedArray> read_arrays(std::istream& is) {
    io::expect_magic(is, "UIPA", "array container");
    const auto version = io::read_le<std::uint32_t>(is);
    if (version != kArrayFormatVersion) {
        throw DataError("array container: unsupported format version " + std::to_string(version));
    }
    const auto count = io::read_le<std::uint32_t>(is);
    std::vector<std::pair<std::string, Shape>> headers;
    headers.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = io::read_string(is);
        const auto rank = io::read_le<std::uint32_t>(is);
        if (rank == 0 || rank > 8) {
            throw DataError("array container: entry '" + name + "' has invalid rank " + std::to_string(rank));
        }
        Shape shape(rank);
        for (auto& d : shape) {
            d = static_cast<std::size_t>(io::read_le<std::uint64_t>(is));
            if (d == 0) {
                throw DataError("array container: entry '" + name + "' has a zero dimension");
            }
        }
        headers.emplace_back(std::move(name), std::move(shape));
    }
    std::vector<NamedArray> out;
    out.reserve(count);
    for (auto& [name, shape] : headers) {
        Tensor t(shape);
        for (auto& v : t.values()) {
            v = io::read_le<double>(is);
        }
        out.push_back({std::move(name), std::move(t)});
    }
    return out;
}

inline void save_arrays(const std::string& path, const std::vector<NamedArray>& entries) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw DataError("cannot open '" + path + "' for writing");
    }
    write_arrays(os, entries);
    if (!os) {
        throw DataError("write to '" + path + "' failed");
    }
}

inline std::vector<NamedArray> load_arrays(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw DataError("cannot open '" + path + "'");
    }
    return read_arrays(is);
}

}  // namespace uipress
