#pragma once

// Little-endian byte codecs and whole-file helpers shared by the binary formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>
#include <vector>

#include "lensforge/error.hpp"

namespace lensforge::io {

using Bytes = std::vector<std::uint8_t>;

template <class T> void put_le(Bytes &out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big)
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(raw[i], raw[sizeof(T) - 1 - i]);
  out.insert(out.end(), raw, raw + sizeof(T));
}

/// Sequential little-endian reader that reports the failing offset.
class Reader {
public:
  Reader(const std::uint8_t *data, std::size_t size) : data_(data), size_(size) {}
  explicit Reader(const Bytes &b) : Reader(b.data(), b.size()) {}

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return size_ - pos_; }

  template <class T> T get(const char *what) {
    if (remaining() < sizeof(T))
      throw FormatError(std::string("truncated ") + what, pos_);
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, data_ + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big)
      for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(raw[i], raw[sizeof(T) - 1 - i]);
    T v;
    std::memcpy(&v, raw, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  void expect_bytes(const char *magic, std::size_t n, const char *what) {
    if (remaining() < n || std::memcmp(data_ + pos_, magic, n) != 0)
      throw FormatError(std::string("bad ") + what, pos_);
    pos_ += n;
  }

private:
  const std::uint8_t *data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

inline Bytes read_file(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading", path.string());
  Bytes b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed", path.string());
  return b;
}

/// Writes through a sibling temp file and renames it into place.
inline void write_file_atomic(const std::filesystem::path &path, const void *data,
                              std::size_t size) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing", tmp.string());
    out.write(static_cast<const char *>(data), static_cast<std::streamsize>(size));
    out.flush();
    if (!out) throw IoError("write failed", tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed (" + ec.message() + ")", path.string());
}

inline void write_file_atomic(const std::filesystem::path &path, const Bytes &b) {
  write_file_atomic(path, b.data(), b.size());
}
inline void write_file_atomic(const std::filesystem::path &path, const std::string &s) {
  write_file_atomic(path, s.data(), s.size());
}

} // namespace lensforge::io
