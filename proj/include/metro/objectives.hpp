#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "metro/config.hpp"
#include "metro/errors.hpp"
#include "metro/rng.hpp"
#include "metro/tape.hpp"
#include "metro/tokens.hpp"

namespace metro {

// Token ids of a [batch x seq_len] block at each corruption stage. Positions
// are flat indices b * seq_len + i; `masked` is sorted ascending.
struct CorruptionBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  IdList x_orig;
  IdList x_mask;
  IdList x_noise;
  RowList masked;
  std::vector<std::uint8_t> replaced;
  std::vector<std::uint8_t> pad;

  std::size_t positions() const { return batch * seq_len; }

  // Original ids at the masked positions, in `masked` order.
  IdList masked_targets() const {
    IdList t(masked.size());
    for (std::size_t i = 0; i < masked.size(); ++i) t[i] = x_orig[masked[i]];
    return t;
  }

  // Flat indices of all non-padding positions.
  RowList non_pad() const {
    RowList rows;
    for (std::size_t i = 0; i < positions(); ++i)
      if (!pad[i]) rows.push_back(i);
    return rows;
  }

  // 1 where the (possibly resampled) token equals the original.
  std::vector<std::uint8_t> rtd_labels() const {
    std::vector<std::uint8_t> y(positions());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = x_noise[i] == x_orig[i] ? 1 : 0;
    return y;
  }
};

inline std::size_t mask_count(std::size_t maskable, double rate) {
  // The slack keeps products like 0.15 * 20 from rounding up past the integer.
  return static_cast<std::size_t>(std::ceil(rate * static_cast<double>(maskable) - 1e-9));
}

// Chooses ceil(rate * maskable) non-special, non-pad positions per sequence
// uniformly without replacement and writes [MASK] there. x_noise starts as a
// copy of x_orig.
inline CorruptionBatch select_masks(const IdList& x_orig, const std::vector<std::uint8_t>& pad, std::size_t batch,
                                    std::size_t seq_len, double mask_rate, RngStream& rng) {
  if (x_orig.size() != batch * seq_len || pad.size() != x_orig.size())
    throw DimensionError("select_masks: ids/pad size does not match batch x seq_len");
  if (!(mask_rate > 0.0 && mask_rate < 1.0)) throw ConfigError("must be in (0,1)", "objective.mask_rate");
  CorruptionBatch cb;
  cb.batch = batch;
  cb.seq_len = seq_len;
  cb.x_orig = x_orig;
  cb.x_mask = x_orig;
  cb.x_noise = x_orig;
  cb.pad = pad;
  cb.replaced.assign(x_orig.size(), 0);
  RowList candidates;
  for (std::size_t b = 0; b < batch; ++b) {
    candidates.clear();
    for (std::size_t i = 0; i < seq_len; ++i) {
      const std::size_t p = b * seq_len + i;
      if (!pad[p] && !is_special(x_orig[p])) candidates.push_back(p);
    }
    if (candidates.empty()) throw DataError("select_masks: sequence " + std::to_string(b) + " has no maskable tokens");
    const std::size_t k = std::min(mask_count(candidates.size(), mask_rate), candidates.size());
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t r = j + static_cast<std::size_t>(rng.below(candidates.size() - j));
      std::swap(candidates[j], candidates[r]);
      cb.masked.push_back(candidates[j]);
    }
  }
  std::sort(cb.masked.begin(), cb.masked.end());
  for (auto p : cb.masked) cb.x_mask[p] = kMaskId;
  return cb;
}

// Mean cross-entropy of the original tokens; logits are [|M| x V], row r
// belonging to position masked[r].
template <typename T>
Tensor<T> aux_mlm_loss(Tape<T>& tape, const Tensor<T>& masked_logits, const CorruptionBatch& cb) {
  if (cb.masked.empty()) throw DataError("aux_mlm_loss: empty mask set");
  return tape.cross_entropy(masked_logits, cb.masked_targets());
}

// Same kernel on the main model's logits over x_noise.
template <typename T>
Tensor<T> sclm_loss(Tape<T>& tape, const Tensor<T>& masked_logits, const CorruptionBatch& cb) {
  if (cb.masked.empty()) throw DataError("sclm_loss: empty mask set");
  return tape.cross_entropy(masked_logits, cb.masked_targets());
}

// Draws x_noise at every masked position from softmax(logits) at
// temperature 1. Only the values are read, so no gradient path exists.
template <typename T>
void sample_corruption(CorruptionBatch& cb, const Tensor<T>& masked_logits, RngStream& rng) {
  if (masked_logits.rank() != 2 || masked_logits.dim(0) != cb.masked.size())
    throw DimensionError("sample_corruption: logits " + to_string(masked_logits.shape()) + " for " +
                         std::to_string(cb.masked.size()) + " masked positions");
  const std::size_t vocab = masked_logits.dim(1);
  auto xs = masked_logits.data();
  std::vector<double> prob(vocab);
  for (std::size_t r = 0; r < cb.masked.size(); ++r) {
    const auto row = xs.subspan(r * vocab, vocab);
    double mx = -std::numeric_limits<double>::infinity();
    for (T v : row) {
      if (!std::isfinite(static_cast<double>(v))) throw NumericError("sample_corruption: non-finite logit");
      mx = std::max(mx, static_cast<double>(v));
    }
    double total = 0;
    for (std::size_t j = 0; j < vocab; ++j) total += prob[j] = std::exp(static_cast<double>(row[j]) - mx);
    double u = rng.uniform() * total;
    std::size_t pick = vocab - 1;
    for (std::size_t j = 0; j < vocab; ++j) {
      if (u < prob[j]) {
        pick = j;
        break;
      }
      u -= prob[j];
    }
    // Round-off can leave u just past the last bucket; fall back to the
    // last token with nonzero mass.
    if (pick == vocab - 1)
      while (pick > 0 && prob[pick] == 0.0) --pick;
    const std::size_t p = cb.masked[r];
    cb.x_noise[p] = static_cast<std::int32_t>(pick);
    cb.replaced[p] = cb.x_noise[p] != cb.x_orig[p] ? 1 : 0;
  }
}

// Binary cross-entropy of "original" (1) vs "replaced" (0), averaged over
// all non-padding positions. logits are [B*L].
template <typename T>
Tensor<T> rtd_loss(Tape<T>& tape, const Tensor<T>& rtd_logits, const CorruptionBatch& cb) {
  return tape.bce_with_logits(rtd_logits, cb.rtd_labels(), cb.non_pad());
}

inline double total_loss(double l_aux, double l_rtd, std::optional<double> l_sclm, double lambda,
                         MainObjective objective) {
  switch (objective) {
    case MainObjective::rtd_only:
      return l_aux + lambda * l_rtd;
    case MainObjective::rtd_plus_sclm:
      return l_aux + lambda * l_rtd + l_sclm.value();
    case MainObjective::replace_mlm:
      return l_aux + l_sclm.value();
  }
  return l_aux;
}

// Tape form; undefined tensors stand for absent components.
template <typename T>
Tensor<T> total_loss(Tape<T>& tape, const Tensor<T>& l_aux, const Tensor<T>& l_rtd, const Tensor<T>& l_sclm,
                     double lambda, MainObjective objective) {
  const T lam = static_cast<T>(lambda);
  switch (objective) {
    case MainObjective::rtd_only:
      return tape.add(l_aux, tape.scale(l_rtd, lam));
    case MainObjective::rtd_plus_sclm:
      return tape.add(tape.add(l_aux, tape.scale(l_rtd, lam)), l_sclm);
    case MainObjective::replace_mlm:
      return tape.add(l_aux, l_sclm);
  }
  return l_aux;
}

struct CurriculumMetrics {
  double replace_rate = 0.0;
  double replace_accuracy = std::numeric_limits<double>::quiet_NaN();  // NaN when nothing was replaced
};

// replace_rate = replaced / non-pad tokens; replace_accuracy = fraction of
// replaced positions the main model calls "not original" (sigmoid < 0.5).
template <typename T>
CurriculumMetrics curriculum_metrics(const CorruptionBatch& cb, const Tensor<T>& rtd_logits) {
  std::size_t tokens = 0, replaced = 0, detected = 0;
  auto zs = rtd_logits.data();
  for (std::size_t i = 0; i < cb.positions(); ++i) {
    if (cb.pad[i]) continue;
    ++tokens;
    if (cb.replaced[i]) {
      ++replaced;
      if (Tape<T>::sigmoid(zs[i]) < T{0.5}) ++detected;
    }
  }
  CurriculumMetrics m;
  if (tokens == 0) throw DataError("curriculum_metrics: batch has no tokens");
  m.replace_rate = static_cast<double>(replaced) / static_cast<double>(tokens);
  if (replaced > 0) m.replace_accuracy = static_cast<double>(detected) / static_cast<double>(replaced);
  return m;
}

}  // namespace metro
