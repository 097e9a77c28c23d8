#pragma once

#include <cstdint>
#include <random>

namespace abm {

using Rng = std::mt19937_64;

// splitmix64 finalizer; derives independent child seeds from (seed, tags...).
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

template <typename... Tags>
constexpr std::uint64_t derive_seed(std::uint64_t seed, Tags... tags) {
  std::uint64_t s = mix_seed(seed);
  ((s = mix_seed(s ^ static_cast<std::uint64_t>(tags))), ...);
  return s;
}

}  // namespace abm
