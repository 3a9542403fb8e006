#pragma once

#include <cstdint>
#include <random>

namespace spinfb {

using Rng = std::mt19937_64;

namespace detail {
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace detail

// Derives an independent generator for (seed, stream). Streams with different
// ids never share state, so per-shot / per-sequence results do not depend on
// evaluation order.
inline Rng make_stream(std::uint64_t seed, std::uint64_t stream = 0) {
  return Rng(detail::splitmix64(detail::splitmix64(seed) ^ detail::splitmix64(stream + 0x51ed270b27aa5c3dULL)));
}

// Child seed for nested streams, e.g. (run seed, shot) -> trajectory seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return detail::splitmix64(detail::splitmix64(seed + 0x632be59bd9b4e019ULL) ^ stream);
}

}  // namespace spinfb
