#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>
#include <algorithm>

#include "kse/error.hpp"

namespace kse {

namespace detail {

constexpr std::uint64_t splitmix_finalize(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view bytes) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

/// SplitMix64 stream. Every random draw in the library goes through one of
/// these; there is no ambient randomness anywhere.
///
/// Child streams are derived from the seed (not the current state), so a
/// child does not depend on how far the parent has been advanced.
class RngStream {
 public:
  static constexpr std::string_view algorithm = "splitmix64";

  constexpr explicit RngStream(std::uint64_t seed = 0) noexcept : seed_(seed), state_(seed) {}

  constexpr std::uint64_t seed() const noexcept { return seed_; }

  constexpr std::uint64_t next_u64() noexcept {
    state_ += 0x9e3779b97f4a7c15ULL;
    return detail::splitmix_finalize(state_);
  }

  constexpr RngStream derive(std::string_view label) const noexcept {
    const std::uint64_t tag = detail::splitmix_finalize(detail::fnv1a64(label));
    return RngStream(detail::splitmix_finalize(seed_ ^ tag) ^ (tag >> 1));
  }

  /// Uniform integer in [0, bound) by rejection; no modulo bias.
  constexpr std::uint64_t uniform_below(std::uint64_t bound) {
    if (bound == 0) throw Error(Errc::invalid_argument, "uniform_below bound must be positive");
    const std::uint64_t threshold = (0 - bound) % bound;
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= threshold) return r % bound;
    }
  }

  /// Uniform double in [0, 1) with 53 random bits.
  constexpr double uniform01() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform01(); }

  // Box-Muller, one variate per call.
  double normal() noexcept {
    const double u1 = 1.0 - uniform01();  // (0, 1]
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  bool coin() noexcept { return (next_u64() >> 63) != 0; }

 private:
  std::uint64_t seed_;
  std::uint64_t state_;
};

/// Uniformly random S-subset of {0..N-1} (Floyd's algorithm), returned sorted.
inline std::vector<std::size_t> uniform_subset(RngStream& rng, std::size_t n, std::size_t s) {
  if (s < 1 || s > n) throw Error(Errc::invalid_argument, "invalid-S: need 1 <= S <= N");
  std::vector<std::size_t> chosen;
  chosen.reserve(s);
  for (std::size_t j = n - s; j < n; ++j) {
    const auto t = static_cast<std::size_t>(rng.uniform_below(j + 1));
    if (std::find(chosen.begin(), chosen.end(), t) == chosen.end()) {
      chosen.push_back(t);
    } else {
      chosen.push_back(j);
    }
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

}  // namespace kse
