#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace moco {

// 128-bit key naming an independent random stream.
struct StreamKey {
  std::uint64_t hi = 0;
  std::uint64_t lo = 0;

  friend bool operator==(const StreamKey&, const StreamKey&) = default;
};

constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr StreamKey make_key(std::uint64_t seed) {
  return StreamKey{mix64(seed ^ 0x6A09E667F3BCC908ULL), mix64(seed)};
}

// Child key for sub-stream `index`; children of distinct indices are
// unrelated, and derivation is order independent.
constexpr StreamKey derive(StreamKey key, std::uint64_t index) {
  const std::uint64_t a = mix64(key.hi ^ mix64(index + 0x243F6A8885A308D3ULL));
  const std::uint64_t b = mix64(key.lo ^ mix64(a ^ index));
  return StreamKey{a, b};
}

// Counter-based generator: the n-th draw is a pure function of (key, n).
class Stream {
 public:
  explicit Stream(StreamKey key) : key_(key) {}

  std::uint64_t next_u64() {
    const std::uint64_t c = counter_++;
    return mix64(key_.lo ^ mix64(key_.hi + c * 0xD1B54A32D192ED03ULL));
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller; one normal per two uniforms keeps draws stateless.
  double normal() {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t draws() const { return counter_; }

 private:
  StreamKey key_;
  std::uint64_t counter_ = 0;
};

}  // namespace moco
