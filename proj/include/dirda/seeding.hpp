#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <string_view>

namespace dirda {

// Named seed derivation: one master seed fans out to per-component streams.
// derive_seed(master, "synth/corrupt") is stable across runs and platforms.
std::uint64_t derive_seed(std::uint64_t master, std::string_view label);
std::uint64_t derive_seed(std::uint64_t master, std::string_view label, std::uint64_t index);

using Rng = std::mt19937_64;

// Portable uniform draws; std::uniform_*_distribution output is
// implementation-defined, which would break cross-toolchain replay.
double uniform01(Rng& rng);
double uniform(Rng& rng, double lo, double hi);
std::int64_t uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi);  // inclusive
double normal(Rng& rng, double mean, double stddev);

template <typename It>
void shuffle(It first, It last, Rng& rng) {
  const auto n = last - first;
  for (auto i = n - 1; i > 0; --i) {
    const auto j = uniform_int(rng, 0, i);
    std::iter_swap(first + i, first + j);
  }
}

}  // namespace dirda
