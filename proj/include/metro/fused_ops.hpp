#pragma once

// Binary16 emulation and "stable op in fp32" kernels over half inputs, in an
// unfused form (cast to a full f32 buffer, compute into a second one, cast
// back) and a fused form (cast, compute and store per element, with only
// scalar f32 row statistics). Both forms share the per-element arithmetic,
// so their outputs are bit-identical.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "metro/errors.hpp"
#include "metro/rng.hpp"

namespace metro {

struct Half {
  std::uint16_t bits = 0;
  friend bool operator==(Half, Half) = default;
};

// Round-to-nearest-even float -> binary16. Overflow goes to infinity,
// tiny values to subnormals or signed zero, NaN stays a quiet NaN.
inline Half f32_to_half(float value) {
  const std::uint32_t x = std::bit_cast<std::uint32_t>(value);
  const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
  const std::uint32_t exp = (x >> 23) & 0xffu;
  std::uint32_t mant = x & 0x7fffffu;
  if (exp == 0xff) {
    if (mant == 0) return {static_cast<std::uint16_t>(sign | 0x7c00u)};
    return {static_cast<std::uint16_t>(sign | 0x7e00u | (mant >> 13))};
  }
  const int e = static_cast<int>(exp) - 127 + 15;
  if (e >= 31) return {static_cast<std::uint16_t>(sign | 0x7c00u)};
  if (e <= 0) {
    if (e < -10) return {sign};
    mant |= 0x800000u;  // implicit leading one
    const int shift = 14 - e;
    const std::uint32_t half_mant = mant >> shift;
    const std::uint32_t rem = mant & ((1u << shift) - 1u);
    const std::uint32_t halfway = 1u << (shift - 1);
    std::uint32_t r = half_mant;
    if (rem > halfway || (rem == halfway && (half_mant & 1u))) ++r;
    return {static_cast<std::uint16_t>(sign | r)};
  }
  std::uint32_t r = (static_cast<std::uint32_t>(e) << 10) | (mant >> 13);
  const std::uint32_t rem = mant & 0x1fffu;
  if (rem > 0x1000u || (rem == 0x1000u && (r & 1u))) ++r;  // may carry into the exponent, up to infinity
  return {static_cast<std::uint16_t>(sign | r)};
}

inline float half_to_f32_bits(Half h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h.bits & 0x8000u) << 16;
  const std::uint32_t exp = (h.bits >> 10) & 0x1fu;
  std::uint32_t mant = h.bits & 0x3ffu;
  std::uint32_t out;
  if (exp == 0x1f) {
    out = sign | 0x7f800000u | (mant << 13) | (mant ? 0x400000u : 0u);
  } else if (exp == 0) {
    if (mant == 0) {
      out = sign;
    } else {
      int e = -1;
      do {
        ++e;
        mant <<= 1;
      } while ((mant & 0x400u) == 0);
      out = sign | (static_cast<std::uint32_t>(127 - 15 - e) << 23) | ((mant & 0x3ffu) << 13);
    }
  } else {
    out = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(out);
}

// Table-driven decode; every binary16 value has an exact f32 image.
inline float half_to_f32(Half h) {
  static const std::vector<float> table = [] {
    std::vector<float> t(1u << 16);
    for (std::uint32_t b = 0; b < t.size(); ++b) t[b] = half_to_f32_bits({static_cast<std::uint16_t>(b)});
    return t;
  }();
  return table[h.bits];
}

// Full-length f32 intermediates allocated by one kernel call.
struct AllocCounter {
  std::size_t n_buffers = 0;
  std::size_t n_bytes = 0;
  void reset() { *this = {}; }
  template <typename T>
  std::vector<T> allocate(std::size_t n) {
    ++n_buffers;
    n_bytes += n * sizeof(T);
    return std::vector<T>(n);
  }
};

enum class StableOp { identity, softmax, softmax_dropout, layernorm };

inline std::string to_string(StableOp op) {
  switch (op) {
    case StableOp::identity: return "identity";
    case StableOp::softmax: return "softmax";
    case StableOp::softmax_dropout: return "softmax-dropout";
    case StableOp::layernorm: return "layernorm";
  }
  return "?";
}

inline StableOp parse_stable_op(std::string_view s) {
  if (s == "identity") return StableOp::identity;
  if (s == "softmax") return StableOp::softmax;
  if (s == "softmax-dropout") return StableOp::softmax_dropout;
  if (s == "layernorm") return StableOp::layernorm;
  throw ConfigError("unknown op '" + std::string(s) + "' (known: identity, softmax, softmax-dropout, layernorm)", "op");
}

// Row-wise op parameters. x is viewed as rows of length `cols`.
struct StableOpParams {
  StableOp op = StableOp::softmax;
  std::size_t cols = 1024;
  float dropout = 0.1f;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  float eps = 1e-5f;
  std::vector<float> gamma;  // layernorm scale, length cols (empty = ones)
  std::vector<float> beta;   // layernorm shift, length cols (empty = zeros)
};

namespace detail {

struct RowStats {
  float a = 0;  // softmax: max; layernorm: mean
  float b = 0;  // softmax: sum of exp(x - max); layernorm: 1/sqrt(var + eps)
};

// One streaming pass: online max/sum for softmax, Welford for layernorm.
template <typename Get>
RowStats row_stats(const StableOpParams& p, std::size_t cols, Get get) {
  RowStats s;
  if (p.op == StableOp::softmax || p.op == StableOp::softmax_dropout) {
    float m = -std::numeric_limits<float>::infinity(), sum = 0.0f;
    for (std::size_t j = 0; j < cols; ++j) {
      const float x = get(j);
      if (x > m) {
        sum = sum * std::exp(m - x) + 1.0f;
        m = x;
      } else {
        sum += std::exp(x - m);
      }
    }
    s.a = m;
    s.b = sum;
  } else if (p.op == StableOp::layernorm) {
    float mean = 0.0f, m2 = 0.0f;
    for (std::size_t j = 0; j < cols; ++j) {
      const float x = get(j);
      const float delta = x - mean;
      mean += delta / static_cast<float>(j + 1);
      m2 += delta * (x - mean);
    }
    s.a = mean;
    s.b = 1.0f / std::sqrt(m2 / static_cast<float>(cols) + p.eps);
  }
  return s;
}

inline float apply(const StableOpParams& p, const RowStats& s, std::size_t j, float x, float u) {
  switch (p.op) {
    case StableOp::identity:
      return x;
    case StableOp::softmax:
      return std::exp(x - s.a) / s.b;
    case StableOp::softmax_dropout: {
      const float y = std::exp(x - s.a) / s.b;
      return u >= p.dropout ? y * (1.0f / (1.0f - p.dropout)) : 0.0f;
    }
    case StableOp::layernorm: {
      const float g = p.gamma.empty() ? 1.0f : p.gamma[j];
      const float b = p.beta.empty() ? 0.0f : p.beta[j];
      return (x - s.a) * s.b * g + b;
    }
  }
  return x;
}

inline void check(const StableOpParams& p, std::size_t n) {
  if (p.cols == 0 || n % p.cols != 0) throw DimensionError("stable op: length " + std::to_string(n) + " is not a multiple of cols " + std::to_string(p.cols));
  if (p.op == StableOp::layernorm && ((!p.gamma.empty() && p.gamma.size() != p.cols) || (!p.beta.empty() && p.beta.size() != p.cols)))
    throw DimensionError("stable op: gamma/beta must have length cols");
  if (p.op == StableOp::softmax_dropout && !(p.dropout >= 0.0f && p.dropout < 1.0f))
    throw ConfigError("must be in [0,1)", "dropout");
  if (p.op == StableOp::layernorm && !(p.eps > 0.0f)) throw ConfigError("must be positive", "eps");
}

inline CounterRng dropout_rng(const StableOpParams& p) { return DropoutKey{p.seed, p.step, 0}.generator(); }

}  // namespace detail

// Cast everything to an f32 buffer t1, compute F into a second buffer t2,
// cast t2 back to half.
inline std::vector<Half> unfused_stable_op(const std::vector<Half>& x, const StableOpParams& p, AllocCounter& counter) {
  detail::check(p, x.size());
  counter.reset();
  const std::size_t n = x.size(), cols = p.cols;
  auto t1 = counter.allocate<float>(n);
  for (std::size_t i = 0; i < n; ++i) t1[i] = half_to_f32(x[i]);
  auto t2 = counter.allocate<float>(n);
  const auto rng = detail::dropout_rng(p);
  std::vector<float> u(p.op == StableOp::softmax_dropout ? cols : 0);
  for (std::size_t r = 0; r < n / cols; ++r) {
    const float* row = t1.data() + r * cols;
    const auto stats = detail::row_stats(p, cols, [row](std::size_t j) { return row[j]; });
    if (!u.empty()) rng.fill_uniformf(p.step, r * cols, cols, u.data());
    for (std::size_t j = 0; j < cols; ++j) t2[r * cols + j] = detail::apply(p, stats, j, row[j], u.empty() ? 0.0f : u[j]);
  }
  std::vector<Half> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = f32_to_half(t2[i]);
  return y;
}

// Casting fused into the row passes. The only f32 storage is one row tile
// that is reused for every row, never a full-length intermediate.
inline std::vector<Half> fused_stable_op(const std::vector<Half>& x, const StableOpParams& p, AllocCounter& counter) {
  detail::check(p, x.size());
  counter.reset();
  const std::size_t n = x.size(), cols = p.cols;
  std::vector<Half> y(n);
  const auto rng = detail::dropout_rng(p);
  std::vector<float> tile(cols), u(p.op == StableOp::softmax_dropout ? cols : 0);
  for (std::size_t r = 0; r < n / cols; ++r) {
    const Half* row = x.data() + r * cols;
    for (std::size_t j = 0; j < cols; ++j) tile[j] = half_to_f32(row[j]);
    const auto stats = detail::row_stats(p, cols, [&tile](std::size_t j) { return tile[j]; });
    if (!u.empty()) rng.fill_uniformf(p.step, r * cols, cols, u.data());
    for (std::size_t j = 0; j < cols; ++j) tile[j] = detail::apply(p, stats, j, tile[j], u.empty() ? 0.0f : u[j]);
    for (std::size_t j = 0; j < cols; ++j) y[r * cols + j] = f32_to_half(tile[j]);
  }
  return y;
}

struct BenchReport {
  StableOp op{};
  std::size_t n = 0;
  std::size_t cols = 0;
  int reps = 0;
  double ns_per_call_fused = 0;
  double ns_per_call_unfused = 0;
  std::size_t bytes_fused = 0;    // f32 intermediates + half output
  std::size_t bytes_unfused = 0;
  std::size_t buffers_fused = 0;
  std::size_t buffers_unfused = 0;
  unsigned max_bit_diff = 0;

  double speedup() const { return ns_per_call_unfused / ns_per_call_fused; }
  double bytes_ratio() const { return static_cast<double>(bytes_unfused) / static_cast<double>(bytes_fused); }
};

inline nlohmann::json to_json(const BenchReport& r) {
  return nlohmann::json{{"op", to_string(r.op)},
                        {"n", r.n},
                        {"cols", r.cols},
                        {"reps", r.reps},
                        {"ns_per_call_fused", r.ns_per_call_fused},
                        {"ns_per_call_unfused", r.ns_per_call_unfused},
                        {"throughput_ratio_fused_over_unfused", r.speedup()},
                        {"bytes_fused", r.bytes_fused},
                        {"bytes_unfused", r.bytes_unfused},
                        {"bytes_ratio_unfused_over_fused", r.bytes_ratio()},
                        {"f32_buffers_fused", r.buffers_fused},
                        {"f32_buffers_unfused", r.buffers_unfused},
                        {"max_bit_diff", r.max_bit_diff}};
}

// Random finite half inputs in [-range, range].
inline std::vector<Half> random_halves(std::size_t n, std::uint64_t seed, float range = 8.0f) {
  RngStream rng(seed, "bench-input");
  std::vector<Half> x(n);
  for (auto& h : x) h = f32_to_half(static_cast<float>((2.0 * rng.uniform() - 1.0) * range));
  return x;
}

// Median-of-reps timing after one warm-up call of each kernel.
inline BenchReport bench_stable_op(StableOp op, std::size_t n, int reps, std::size_t cols = 1024, std::uint64_t seed = 1) {
  if (reps < 3) throw ConfigError("must be at least 3", "reps");
  StableOpParams p;
  p.op = op;
  p.cols = std::min(cols, n);
  p.seed = seed;
  const auto x = random_halves(n, seed);
  AllocCounter cu, cf;
  auto time_one = [&](auto&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    auto y = fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::make_pair(std::chrono::duration<double, std::nano>(t1 - t0).count(), std::move(y));
  };
  auto yu = unfused_stable_op(x, p, cu);
  auto yf = fused_stable_op(x, p, cf);
  std::vector<double> tu, tf;
  for (int r = 0; r < reps; ++r) {
    auto [du, u] = time_one([&] { return unfused_stable_op(x, p, cu); });
    auto [df, f] = time_one([&] { return fused_stable_op(x, p, cf); });
    tu.push_back(du);
    tf.push_back(df);
    yu = std::move(u);
    yf = std::move(f);
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
  };
  BenchReport rep;
  rep.op = op;
  rep.n = n;
  rep.cols = p.cols;
  rep.reps = reps;
  rep.ns_per_call_unfused = median(tu);
  rep.ns_per_call_fused = median(tf);
  rep.buffers_unfused = cu.n_buffers;
  rep.buffers_fused = cf.n_buffers;
  rep.bytes_unfused = cu.n_bytes + n * sizeof(Half);
  rep.bytes_fused = cf.n_bytes + n * sizeof(Half);
  for (std::size_t i = 0; i < n; ++i) {
    const int d = static_cast<int>(yu[i].bits) - static_cast<int>(yf[i].bits);
    rep.max_bit_diff = std::max(rep.max_bit_diff, static_cast<unsigned>(d < 0 ? -d : d));
  }
  return rep;
}

}  // namespace metro
