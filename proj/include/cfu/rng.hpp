#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace cfu {

using Rng = std::mt19937_64;

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Per-stage seed: the FNV-1a hash of the stage name mixed into the run seed.
/// Every random stream in the project is derived this way from one --seed so
/// stages can be rerun in isolation.
inline constexpr std::uint64_t stage_seed(std::uint64_t seed, std::string_view stage) {
  return splitmix64(seed ^ splitmix64(fnv1a(stage)));
}

inline Rng make_rng(std::uint64_t seed, std::string_view stage) {
  return Rng{stage_seed(seed, stage)};
}

}  // namespace cfu
