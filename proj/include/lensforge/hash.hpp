#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>

namespace lensforge {

/// 64-bit FNV-1a content digest.
class Digest {
public:
  Digest &update(const void *data, std::size_t n) {
    const auto *p = static_cast<const unsigned char *>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001b3ULL;
    }
    return *this;
  }
  Digest &update(std::string_view s) { return update(s.data(), s.size()); }
  Digest &update(std::span<const double> v) { return update(v.data(), v.size_bytes()); }
  std::uint64_t value() const noexcept { return h_; }

private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t digest_of(const void *data, std::size_t n) {
  return Digest().update(data, n).value();
}
inline std::uint64_t digest_of(std::span<const double> v) { return Digest().update(v).value(); }

inline std::string hex_digest(std::uint64_t d) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = kHex[d & 0xf];
    d >>= 4;
  }
  return s;
}

} // namespace lensforge
