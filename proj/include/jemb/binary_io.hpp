#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "jemb/error.hpp"

// Little-endian primitive readers/writers shared by the binary formats.
namespace jemb::binary {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

inline std::uint64_t position(std::istream& in) {
    auto pos = in.tellg();
    return pos < 0 ? 0 : static_cast<std::uint64_t>(pos);
}

template <typename T>
void write_pod(std::ostream& out, T value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const char* what) {
    const auto offset = position(in);
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (in.gcount() != static_cast<std::streamsize>(sizeof(T))) {
        throw FormatError(std::string("truncated input while reading ") + what, offset);
    }
    return value;
}

inline void expect_magic(std::istream& in, const char (&magic)[5]) {
    const auto offset = position(in);
    char buf[4] = {};
    in.read(buf, 4);
    if (in.gcount() != 4) {
        throw FormatError(std::string("truncated input while reading magic ") + magic, offset);
    }
    if (std::memcmp(buf, magic, 4) != 0) {
        throw FormatError(std::string("bad magic, expected ") + magic, offset);
    }
}

}  // namespace jemb::binary
