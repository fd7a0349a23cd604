#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

#include "llbb/errors.hpp"

namespace llbb::io {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian; big-endian hosts need byte swapping");

template <typename T>
  requires std::is_trivially_copyable_v<T>
void put(std::ostream& os, const T& value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
  requires std::is_trivially_copyable_v<T>
T get(std::istream& is, const char* what = "value") {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw FormatError(std::string("unexpected end of data while reading ") + what);
  return value;
}

inline void put_bytes(std::ostream& os, const void* data, std::size_t n) {
  os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

inline void get_bytes(std::istream& is, void* data, std::size_t n, const char* what = "payload") {
  is.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (!is) throw FormatError(std::string("unexpected end of data while reading ") + what);
}

inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  put_bytes(os, s.data(), s.size());
}

inline std::string get_string(std::istream& is, const char* what = "string") {
  auto n = get<std::uint32_t>(is, what);
  if (n > (1u << 30)) throw FormatError(std::string("implausible length for ") + what);
  std::string s(n, '\0');
  get_bytes(is, s.data(), n, what);
  return s;
}

inline void put_magic(std::ostream& os, const char (&magic)[5]) { put_bytes(os, magic, 4); }

inline void expect_magic(std::istream& is, const char (&magic)[5]) {
  char got[4] = {};
  is.read(got, 4);
  if (!is || std::memcmp(got, magic, 4) != 0) {
    throw FormatError(std::string("bad magic: expected \"") + magic + "\", found \"" +
                      std::string(got, is ? 4 : static_cast<std::size_t>(is.gcount())) + "\"");
  }
}

}  // namespace llbb::io
