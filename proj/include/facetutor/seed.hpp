#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>

// Deterministic, platform-independent seeding helpers. Every randomized
// routine in the project derives its stream from these so that runs are
// bit-reproducible regardless of standard-library implementation.
namespace facetutor::seed {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t mix(std::uint64_t a, std::uint64_t b) { return splitmix64(a ^ splitmix64(b)); }

constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

constexpr std::uint64_t mix(std::uint64_t a, std::string_view key) { return mix(a, fnv1a64(key)); }

// Uniform draw in [0, n) from a seed: multiply-high of splitmix64(seed).
constexpr std::size_t uniform_index(std::uint64_t seed, std::size_t n) {
  const unsigned __int128 wide = static_cast<unsigned __int128>(splitmix64(seed)) * n;
  return static_cast<std::size_t>(wide >> 64);
}

// Sequential generator over the splitmix64 stream.
class SplitMix {
 public:
  explicit constexpr SplitMix(std::uint64_t seed) : state_(seed) {}
  constexpr std::uint64_t next() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }
  constexpr std::size_t below(std::size_t n) {
    const unsigned __int128 wide = static_cast<unsigned __int128>(next()) * n;
    return static_cast<std::size_t>(wide >> 64);
  }
  // Uniform double in [0, 1).
  constexpr double unit() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

 private:
  std::uint64_t state_;
};

}  // namespace facetutor::seed
