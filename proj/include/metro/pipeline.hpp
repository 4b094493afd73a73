#pragma once

#include <cstdint>
#include <vector>

#include "metro/encoder.hpp"
#include "metro/objectives.hpp"

namespace metro {

template <typename T>
struct StepLosses {
  CorruptionBatch corruption;
  Tensor<T> total;
  Tensor<T> aux;
  Tensor<T> rtd;   // undefined for replace_mlm
  Tensor<T> sclm;  // undefined for rtd_only
  Tensor<T> rtd_logits;
  CurriculumMetrics metrics;
};

// One denoising step forward: mask, auxiliary MLM, sample replacements,
// main forward on the corrupted ids, combined loss. Randomness comes from
// the (seed, step) keyed "mask", "sample" and "dropout" streams only.
template <typename T>
StepLosses<T> pretrain_forward(Tape<T>& tape, const PretrainModel<T>& model, const ObjectiveConfig& obj,
                               const IdList& ids, const std::vector<std::uint8_t>& pad, std::size_t batch,
                               std::size_t seq_len, std::uint64_t seed, std::uint64_t step, bool train = true) {
  const ModelConfig& cfg = model.config;
  StepLosses<T> out;
  RngStream mask_rng(seed, stream_id("mask"), step);
  out.corruption = select_masks(ids, pad, batch, seq_len, obj.mask_rate, mask_rng);
  CorruptionBatch& cb = out.corruption;

  ForwardOptions<T> aux_opt;
  aux_opt.train = train;
  aux_opt.dropout = static_cast<T>(cfg.dropout_aux);
  aux_opt.dropout_ctx = {seed, step, stream_id("aux"), 0};
  const Tensor<T> aux_hidden = encode(tape, cfg, model.aux, EncoderInput{batch, seq_len, cb.x_mask, pad}, aux_opt);
  const Tensor<T> aux_logits = mlm_logits(tape, model.aux, aux_hidden, cb.masked);
  out.aux = aux_mlm_loss(tape, aux_logits, cb);

  RngStream sample_rng(seed, stream_id("sample"), step);
  sample_corruption(cb, aux_logits, sample_rng);

  ForwardOptions<T> main_opt;
  main_opt.train = train;
  main_opt.dropout = static_cast<T>(cfg.dropout_main);
  main_opt.dropout_ctx = {seed, step, stream_id("main"), 0};
  const Tensor<T> hidden = encode(tape, cfg, model.main, EncoderInput{batch, seq_len, cb.x_noise, pad}, main_opt);
  out.rtd_logits = rtd_logits(tape, model.main, hidden);
  if (obj.main_objective != MainObjective::replace_mlm) out.rtd = rtd_loss(tape, out.rtd_logits, cb);
  if (obj.main_objective != MainObjective::rtd_only)
    out.sclm = sclm_loss(tape, mlm_logits(tape, model.main, hidden, cb.masked), cb);
  out.total = total_loss(tape, out.aux, out.rtd, out.sclm, obj.lambda, obj.main_objective);
  out.metrics = curriculum_metrics(cb, out.rtd_logits);
  return out;
}

}  // namespace metro
