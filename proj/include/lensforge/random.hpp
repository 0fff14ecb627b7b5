#pragma once

// Counter-keyed random streams. Every stream is a SplitMix64 sequence whose
// starting state is a hash of (seed, key...), so independent chains, steps or
// systems draw the same numbers regardless of scheduling.

#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>

namespace lensforge {

inline constexpr std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Mixes a seed with an ordered list of stream coordinates.
inline constexpr std::uint64_t stream_key(std::uint64_t seed,
                                          std::initializer_list<std::uint64_t> coords) {
  std::uint64_t h = splitmix64(seed ^ 0x6c656e73666f7267ULL);
  for (auto c : coords) h = splitmix64(h ^ splitmix64(c + 0x632be59bd9b4e019ULL));
  return h;
}

/// UniformRandomBitGenerator over a SplitMix64 counter.
class Rng {
public:
  using result_type = std::uint64_t;
  explicit Rng(std::uint64_t state) : state_(state) {}
  Rng(std::uint64_t seed, std::initializer_list<std::uint64_t> coords)
      : state_(stream_key(seed, coords)) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
  result_type operator()() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal() { return normal_(*this); }

private:
  std::uint64_t state_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

} // namespace lensforge
