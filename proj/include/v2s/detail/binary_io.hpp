#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "v2s/detail/error.hpp"

namespace v2s::detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class T>
T byteswap_if_big(T value) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
    std::memcpy(&value, bytes, sizeof(T));
  }
  return value;
}

/// Writes a trivially copyable value in little-endian byte order.
template <class T>
void write_le(std::ostream& out, T value) {
  value = byteswap_if_big(value);
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T read_le(std::istream& in, const char* what) {
  T value;
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw InputError(std::string("truncated file while reading ") + what);
  return byteswap_if_big(value);
}

inline void expect_magic(std::istream& in, const char* magic, std::size_t length) {
  std::string buffer(length, '\0');
  in.read(buffer.data(), static_cast<std::streamsize>(length));
  if (!in || std::memcmp(buffer.data(), magic, length) != 0)
    throw InputError(std::string("bad magic, expected ") + std::string(magic, length - 1));
}

}  // namespace v2s::detail
