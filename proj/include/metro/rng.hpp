#pragma once

// Counter-based random numbers (Philox4x32-10).
//
// Every draw is a pure function of (seed, stream, domain, index), so any
// consumer can regenerate the value at a given position without replaying
// earlier draws. Training uses this to key dropout masks by (seed, step, op)
// and to give named substreams (mask, sample, dropout, perturb, data) their
// own independent sequences.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string_view>

namespace metro {

namespace detail {

inline void mulhilo32(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

}  // namespace detail

using PhiloxBlock = std::array<std::uint32_t, 4>;
using PhiloxKey = std::array<std::uint32_t, 2>;

inline PhiloxBlock philox4x32_10(PhiloxBlock ctr, PhiloxKey key) {
  constexpr std::uint32_t kM0 = 0xD2511F53u, kM1 = 0xCD9E8D57u;
  constexpr std::uint32_t kW0 = 0x9E3779B9u, kW1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    if (round > 0) {
      key[0] += kW0;
      key[1] += kW1;
    }
    std::uint32_t hi0, lo0, hi1, lo1;
    detail::mulhilo32(kM0, ctr[0], hi0, lo0);
    detail::mulhilo32(kM1, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
  }
  return ctr;
}

// FNV-1a, used to turn substream names into stream ids.
constexpr std::uint64_t stream_id(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebull;
  x ^= x >> 31;
  return x;
}

// Stateless generator: bits at (domain, index) under a (seed, stream) key.
class CounterRng {
 public:
  CounterRng() = default;
  CounterRng(std::uint64_t seed, std::uint64_t stream) {
    const std::uint64_t k = mix64(seed ^ mix64(stream + 0x9e3779b97f4a7c15ull));
    key_ = {static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(k >> 32)};
  }

  PhiloxBlock block(std::uint64_t domain, std::uint64_t index) const {
    return philox4x32_10({static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                          static_cast<std::uint32_t>(domain), static_cast<std::uint32_t>(domain >> 32)},
                         key_);
  }

  std::uint64_t bits64(std::uint64_t domain, std::uint64_t index) const {
    const auto b = block(domain, index);
    return (static_cast<std::uint64_t>(b[1]) << 32) | b[0];
  }

  // Uniform float in [0, 1) with 24 random bits. Element i uses word i % 4
  // of block i / 4, so runs of four share one Philox evaluation.
  float uniformf(std::uint64_t domain, std::uint64_t index) const {
    return to_unit_float(block(domain, index / 4)[index % 4]);
  }

  // uniformf for indices [first, first + n).
  void fill_uniformf(std::uint64_t domain, std::uint64_t first, std::size_t n, float* out) const {
    std::size_t i = 0;
    while (i < n && (first + i) % 4 != 0) {
      out[i] = uniformf(domain, first + i);
      ++i;
    }
    for (; i + 4 <= n; i += 4) {
      const auto b = block(domain, (first + i) / 4);
      for (int w = 0; w < 4; ++w) out[i + w] = to_unit_float(b[w]);
    }
    for (; i < n; ++i) out[i] = uniformf(domain, first + i);
  }

  static float to_unit_float(std::uint32_t word) { return static_cast<float>(word >> 8) * 0x1.0p-24f; }

  double uniform(std::uint64_t domain, std::uint64_t index) const {
    return static_cast<double>(bits64(domain, index) >> 11) * 0x1.0p-53;
  }

 private:
  PhiloxKey key_{0, 0};
};

// Sequential view over one (seed, stream, domain) lane of a CounterRng.
// Satisfies UniformRandomBitGenerator; the distributions below are written out
// so that results do not depend on the standard library implementation.
class RngStream {
 public:
  using result_type = std::uint64_t;

  RngStream() = default;
  RngStream(std::uint64_t seed, std::uint64_t stream, std::uint64_t domain = 0)
      : gen_(seed, stream), domain_(domain) {}
  RngStream(std::uint64_t seed, std::string_view name, std::uint64_t domain = 0)
      : RngStream(seed, stream_id(name), domain) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return gen_.bits64(domain_, next_++); }

  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n), Lemire's nearly-divisionless rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    for (;;) {
      const unsigned __int128 m = static_cast<unsigned __int128>((*this)()) * n;
      const auto low = static_cast<std::uint64_t>(m);
      if (low >= n) return static_cast<std::uint64_t>(m >> 64);
      const std::uint64_t threshold = (0 - n) % n;
      if (low >= threshold) return static_cast<std::uint64_t>(m >> 64);
    }
  }

  // Standard normal via Box-Muller (one draw per call, no caching).
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t position() const { return next_; }

 private:
  CounterRng gen_;
  std::uint64_t domain_ = 0;
  std::uint64_t next_ = 0;
};

// Key for a dropout site: deterministic in (seed, step, op id).
struct DropoutKey {
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::uint64_t op = 0;

  CounterRng generator() const { return CounterRng(seed, stream_id("dropout") ^ mix64(op + 1)); }
  std::uint64_t domain() const { return step; }
};

}  // namespace metro
