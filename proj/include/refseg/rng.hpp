#ifndef REFSEG_RNG_HPP_
#define REFSEG_RNG_HPP_

#include <cstdint>
#include <random>

namespace refseg {

// splitmix64 finalizer; used to derive independent seeds from a base seed
// plus a stream tag, so separate consumers (sampling, augmentation, init)
// never share a stream.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
  return mix64(base ^ mix64(tag));
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag_a,
                                 std::uint64_t tag_b) {
  return mix64(derive_seed(base, tag_a) ^ mix64(tag_b + 0x517cc1b727220a95ULL));
}

// Thin deterministic RNG wrapper. All randomness in the project flows
// through this type with explicitly derived seeds.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal(double mean, double stddev) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  // inclusive bounds
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
  }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace refseg

#endif  // REFSEG_RNG_HPP_
