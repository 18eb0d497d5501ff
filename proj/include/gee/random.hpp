#pragma once

// Counter-based random numbers. Every draw is a pure function of
// (seed, cluster index, stream tag, position), so cluster i's randomness does
// not depend on how many numbers earlier clusters consumed and replications
// never share generator state.
//
// Algorithm identifier: "philox4x32-10/box-muller-cos". Uniform doubles use
// the top 53 bits of a 64-bit word, offset by half an ulp so they lie in the
// open interval (0, 1). Normals use the cosine branch of Box-Muller.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace gee::random {

inline constexpr std::string_view kAlgorithmId = "philox4x32-10/box-muller-cos";

using Counter = std::array<std::uint32_t, 4>;
using Key = std::array<std::uint32_t, 2>;

namespace detail {

inline constexpr std::uint32_t kM0 = 0xD2511F53u;
inline constexpr std::uint32_t kM1 = 0xCD9E8D57u;
inline constexpr std::uint32_t kW0 = 0x9E3779B9u;
inline constexpr std::uint32_t kW1 = 0xBB67AE85u;

inline Counter philox_round(const Counter& c, const Key& k) {
  const std::uint64_t p0 = static_cast<std::uint64_t>(kM0) * c[0];
  const std::uint64_t p1 = static_cast<std::uint64_t>(kM1) * c[2];
  const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
  const auto lo0 = static_cast<std::uint32_t>(p0);
  const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
  const auto lo1 = static_cast<std::uint32_t>(p1);
  return {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
}

}  // namespace detail

inline Counter philox4x32_10(Counter counter, Key key) {
  for (int round = 0; round < 10; ++round) {
    if (round > 0) {
      key[0] += detail::kW0;
      key[1] += detail::kW1;
    }
    counter = detail::philox_round(counter, key);
  }
  return counter;
}

// SplitMix64 finalizer, used to derive per-replication seeds.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t replication_seed(std::uint64_t seed, std::uint64_t replication) {
  return seed ^ splitmix64(replication);
}

// Sequential reader over the blocks of one (seed, index, tag) counter lane.
class Stream {
 public:
  Stream(std::uint64_t seed, std::uint64_t index, std::uint32_t tag)
      : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
        index_(index),
        tag_(tag) {}

  std::uint64_t next_u64() {
    if (pos_ == 2) refill();
    return words_[pos_++];
  }

  // Uniform on the open interval (0, 1).
  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  void refill() {
    const Counter c{static_cast<std::uint32_t>(index_), static_cast<std::uint32_t>(index_ >> 32), tag_, block_++};
    const Counter r = philox4x32_10(c, key_);
    words_[0] = (static_cast<std::uint64_t>(r[0]) << 32) | r[1];
    words_[1] = (static_cast<std::uint64_t>(r[2]) << 32) | r[3];
    pos_ = 0;
  }

  Key key_;
  std::uint64_t index_;
  std::uint32_t tag_;
  std::uint32_t block_ = 0;
  std::array<std::uint64_t, 2> words_{};
  int pos_ = 2;
};

}  // namespace gee::random
