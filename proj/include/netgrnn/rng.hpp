#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace netgrnn {

using Rng = std::mt19937_64;

/// Stream tags for deriving independent RNG streams from one master seed.
enum class Stream : std::uint64_t {
  topology = 1,
  dynamics = 2,
  weights = 3,
  train_init = 4,
  train_noise = 5,
  test_init = 6,
  test_noise = 7,
  eval_init = 8,
  eval_noise = 9,
  misc = 10,
};

/// splitmix64 finaliser.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Deterministic child seed for (master, stream, indices...). Index order matters.
inline std::uint64_t derive_seed(std::uint64_t master, Stream stream,
                                 std::initializer_list<std::uint64_t> indices = {}) {
  std::uint64_t h = mix64(master ^ mix64(static_cast<std::uint64_t>(stream)));
  for (std::uint64_t i : indices) h = mix64(h ^ mix64(i + 0x632be59bd9b4e019ULL));
  return h;
}

inline Rng make_rng(std::uint64_t master, Stream stream,
                    std::initializer_list<std::uint64_t> indices = {}) {
  return Rng(derive_seed(master, stream, indices));
}

}  // namespace netgrnn
