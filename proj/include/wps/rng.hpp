#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace wps {

// SplitMix64 finalizer. Full-avalanche, so derived stream seeds are
// effectively independent.
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Folds a path of stream tags into a base seed. Every RNG stream in the
// pipeline is keyed by (seed, tag, epoch, step, sample, view) so parallel
// and serial execution draw identical numbers.
inline uint64_t derive_seed(uint64_t base, std::initializer_list<uint64_t> path) {
  uint64_t h = mix64(base);
  for (uint64_t p : path) h = mix64(h ^ (p + 0x9e3779b97f4a7c15ULL));
  return h;
}

// Counter-free deterministic generator. Not std::mt19937 on purpose: the
// stream must be identical across standard libraries because shard bytes
// are part of the format contract.
class Rng {
public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    uint64_t x = state_;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  // Uniform in [0, 1) with 53 random mantissa bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform_in(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform in [0, n). Multiply-shift; bias is O(n / 2^64).
  uint32_t range(uint32_t n) {
    return static_cast<uint32_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller; consumes exactly two draws.
  double normal() {
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

private:
  uint64_t state_;
};

// Stream tags. Values are arbitrary but frozen: changing one changes every
// generated dataset.
enum : uint64_t {
  kStreamLayout = 1,
  kStreamNoise = 2,
  kStreamWeather = 3,
  kStreamDegrade = 4,
  kStreamInit = 5,
  kStreamShuffle = 6,
  kStreamCleanPick = 7,
  kStreamWeakClean = 8,
  kStreamWeakDegraded = 9,
  kStreamStrong = 10,
  kStreamChannelMask = 11,
  kStreamSplitTrain = 12,
  kStreamSplitVal = 13,
  kStreamSplitTest = 14,
};

}  // namespace wps
