#pragma once

#include <cstdint>

namespace signforge {

// PCG32 (XSH-RR variant). Fixed constants so that a given (seed, stream)
// pair produces the same sequence on every platform. Derived streams for
// per-frame / per-scene work use stream = base_stream + index.
class Pcg32 {
 public:
  static constexpr std::uint64_t kMultiplier = 6364136223846793005ULL;

  Pcg32() : Pcg32(0x853c49e6748fea9bULL, 0xda3e39cb94b95bdbULL) {}

  Pcg32(std::uint64_t seed, std::uint64_t stream = 0) {
    state_ = 0u;
    inc_ = (stream << 1u) | 1u;
    next_u32();
    state_ += seed;
    next_u32();
  }

  std::uint32_t next_u32() {
    std::uint64_t old = state_;
    state_ = old * kMultiplier + inc_;
    std::uint32_t xorshifted =
        static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
    std::uint32_t rot = static_cast<std::uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((~rot + 1u) & 31u));
  }

  // 53-bit uniform double in [0, 1). High word drawn first.
  double next_double() {
    std::uint64_t hi = next_u32();
    std::uint64_t lo = next_u32();
    std::uint64_t bits = ((hi << 32) | lo) >> 11;
    return static_cast<double>(bits) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Uniform integer in [0, n). n must be >= 1.
  std::uint32_t next_below(std::uint32_t n) {
    return static_cast<std::uint32_t>(next_double() * static_cast<double>(n));
  }

 private:
  std::uint64_t state_;
  std::uint64_t inc_;
};

}  // namespace signforge
