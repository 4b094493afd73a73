#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "metro/tape.hpp"

namespace metro {

// T5-style bidirectional relative position bucket for the offset
// key_pos - query_pos. Half of the bins serve each direction; offsets below
// bins/4 get their own bucket, larger ones are spaced logarithmically up to
// max_distance and clamped beyond it. Non-positive offsets use the lower half.
inline int relpos_bucket(int query_pos, int key_pos, int bins, int max_distance) {
  const int half = bins / 2;
  const int offset = key_pos - query_pos;
  const int base = offset > 0 ? half : 0;
  const int n = std::abs(offset);
  const int max_exact = half / 2;
  if (n < max_exact) return base + n;
  if (max_exact == 0 || max_distance <= max_exact) return base + half - 1;
  // The float32 epsilon nudge matches the reference bucketing at exact
  // logarithmic boundaries.
  const double scaled = std::log(static_cast<double>(n) / max_exact + 1.1920929e-07) /
                        std::log(static_cast<double>(max_distance) / max_exact) * (half - max_exact);
  const int large = max_exact + static_cast<int>(scaled);
  return base + std::min(large, half - 1);
}

// Row-major [seq_len x seq_len] grid of buckets, (query i, key j).
inline IdList relpos_bucket_grid(std::size_t seq_len, int bins, int max_distance) {
  IdList grid(seq_len * seq_len);
  for (std::size_t i = 0; i < seq_len; ++i)
    for (std::size_t j = 0; j < seq_len; ++j)
      grid[i * seq_len + j] = relpos_bucket(static_cast<int>(i), static_cast<int>(j), bins, max_distance);
  return grid;
}

}  // namespace metro
