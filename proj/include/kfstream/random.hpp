#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace kfs {

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent generator for (seed, purpose, index). Used so that e.g. the noise
// for the chunk at frame 12 is the same whichever sampling mode produced it.
inline std::mt19937_64 substream(std::uint64_t seed, std::string_view name, std::uint64_t index = 0) {
  return std::mt19937_64(splitmix64(splitmix64(seed ^ fnv1a(name)) + index));
}

}  // namespace kfs
