#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "rtn/tensor.hpp"

namespace rtn::io {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

namespace detail {

template <class V>
V to_little(V v) {
  if constexpr (std::endian::native == std::endian::big && sizeof(V) > 1) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(V)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<V>(bytes);
  } else {
    return v;
  }
}

}  // namespace detail

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw Error("cannot create directory " + dir.string() + ": " + ec.message());
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw Error("write failed for " + path.string());
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

// Raw little-endian array of fixed-width values.
template <class V>
void write_array(const fs::path& path, std::span<const V> values) {
  std::vector<V> le(values.begin(), values.end());
  for (auto& v : le) v = detail::to_little(v);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(le.data()), static_cast<std::streamsize>(le.size() * sizeof(V)));
  if (!out) throw Error("write failed for " + path.string());
}

// Reads exactly `count` values; a size mismatch is reported with both byte
// counts.
template <class V>
std::vector<V> read_array(const fs::path& path, std::size_t count) {
  std::error_code ec;
  const auto size = fs::file_size(path, ec);
  if (ec) throw InvalidInput("cannot stat " + path.string() + ": " + ec.message());
  const std::uintmax_t expected = count * sizeof(V);
  if (size != expected) {
    throw InvalidInput(path.string() + ": expected " + std::to_string(expected) + " bytes, found " +
                       std::to_string(size));
  }
  std::vector<V> values(count);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open " + path.string());
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(expected));
  if (!in) throw InvalidInput("short read from " + path.string());
  for (auto& v : values) v = detail::to_little(v);
  return values;
}

}  // namespace rtn::io
