#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <string>
#include <vector>

#include "metro/checkpoint.hpp"
#include "metro/config.hpp"
#include "metro/data.hpp"
#include "metro/optim.hpp"
#include "metro/pipeline.hpp"

namespace metro {

struct MetricsRow {
  std::int64_t step = 0;
  double lr = 0;
  double loss_total = 0;
  double loss_aux = 0;
  double loss_rtd = 0;
  double loss_sclm = 0;
  double replace_rate = 0;
  double replace_accuracy = 0;
  double grad_norm_preclip = 0;
  bool clipped = false;
};

inline constexpr const char* kMetricsHeader =
    "step,lr,loss_total,loss_aux,loss_rtd,loss_sclm,replace_rate,replace_accuracy,grad_norm_preclip,clipped";

inline std::string format_metrics_row(const MetricsRow& r) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%d", static_cast<long long>(r.step),
                r.lr, r.loss_total, r.loss_aux, r.loss_rtd, r.loss_sclm, r.replace_rate, r.replace_accuracy,
                r.grad_norm_preclip, r.clipped ? 1 : 0);
  return buf;
}

struct TrainOptions {
  bool write_files = true;          // metrics.csv, checkpoints, effective-config.json under output.dir
  std::string resume_from;          // checkpoint to continue from
  std::int64_t stop_after = -1;     // last step to run (defaults to max_steps)
  std::int64_t log_every = 0;       // progress lines on stderr; 0 disables
  std::function<void(const MetricsRow&, const PretrainModel<float>&)> on_step;
  std::function<void(PretrainModel<float>&)> on_start;  // after init/resume, before step one
};

struct TrainResult {
  std::int64_t last_step = 0;  // last completed step
  bool aborted = false;
  std::string message;
  std::vector<MetricsRow> rows;
  std::string final_checkpoint;
};

inline std::vector<IdList> tokenize_documents(const std::vector<std::string>& docs, const ByteTokenizer& tok,
                                              int vocab_size) {
  std::vector<IdList> out;
  out.reserve(docs.size());
  for (const auto& d : docs) {
    out.push_back(tok.encode(d));
    for (auto id : out.back())
      if (id >= vocab_size)
        throw DataError("token id " + std::to_string(id) + " exceeds model.vocab_size " + std::to_string(vocab_size));
  }
  return out;
}

namespace detail {

inline std::vector<Tensor<float>> tensors_of(const std::vector<NamedTensor<float>>& named) {
  std::vector<Tensor<float>> out;
  for (const auto& n : named) out.push_back(n.tensor);
  return out;
}

// Keeps the header and rows up to `step` so a resumed run appends cleanly.
inline void truncate_metrics(const std::string& path, std::int64_t step) {
  std::ifstream in(path);
  std::vector<std::string> keep;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (first) {
      first = false;
      continue;
    }
    if (line.empty()) continue;
    if (std::stoll(line.substr(0, line.find(','))) <= step) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  out << kMetricsHeader << '\n';
  for (const auto& l : keep) out << l << '\n';
}

}  // namespace detail

// Joint auxiliary + main pretraining with one combined loss and one Adam
// over the union of parameters. Steps are numbered from 1; every random
// choice at step s is keyed by (seed, s).
inline TrainResult train(const RunConfig& cfg, const std::vector<IdList>& docs, const TrainOptions& opt = {}) {
  cfg.validate();
  if (docs.empty()) throw DataError("train: corpus has no documents");
  auto model = PretrainModel<float>::init(cfg.model, cfg.seed);
  const auto named = model.parameters();
  const auto params = detail::tensors_of(named);
  auto adam = AdamState<float>::init(cfg.optimizer, params);
  const nlohmann::json config_json = to_json(cfg);

  std::int64_t start = 0;
  if (!opt.resume_from.empty()) start = load_checkpoint(opt.resume_from, named, adam).step;
  if (opt.on_start) opt.on_start(model);

  const std::filesystem::path dir(cfg.output.dir);
  const std::string metrics_path = (dir / "metrics.csv").string();
  std::ofstream metrics;
  if (opt.write_files) {
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "effective-config.json") << config_json.dump(2) << '\n';
    if (start > 0 && std::filesystem::exists(metrics_path)) {
      detail::truncate_metrics(metrics_path, start);
      metrics.open(metrics_path, std::ios::app);
    } else {
      metrics.open(metrics_path, std::ios::trunc);
      metrics << kMetricsHeader << '\n';
    }
    if (!metrics) throw IoError("cannot write " + metrics_path);
  }
  auto checkpoint = [&](const std::string& name, std::int64_t step) {
    const std::string path = (dir / name).string();
    save_checkpoint(path, config_json, step, named, adam);
    return path;
  };

  TrainResult result;
  result.last_step = start;
  const std::int64_t end = opt.stop_after >= 0 ? std::min(opt.stop_after, cfg.schedule.max_steps) : cfg.schedule.max_steps;
  const auto L = static_cast<std::size_t>(cfg.model.max_seq_len);
  const auto B = static_cast<std::size_t>(cfg.data.batch_size);

  for (std::int64_t step = start + 1; step <= end; ++step) {
    const Batch batch = make_batch(docs, B, L, cfg.seed, static_cast<std::uint64_t>(step));
    for (auto p : params) p.zero_grad();
    MetricsRow row;
    row.step = step;
    row.lr = lr_at(step, cfg.schedule);
    std::string failure;
    try {
      Tape<float> tape;
      auto losses = pretrain_forward(tape, model, cfg.objective, batch.ids, batch.pad, B, L, cfg.seed,
                                     static_cast<std::uint64_t>(step));
      row.loss_total = losses.total.item();
      row.loss_aux = losses.aux.item();
      row.loss_rtd = losses.rtd.defined() ? losses.rtd.item() : std::numeric_limits<double>::quiet_NaN();
      row.loss_sclm = losses.sclm.defined() ? losses.sclm.item() : std::numeric_limits<double>::quiet_NaN();
      row.replace_rate = losses.metrics.replace_rate;
      row.replace_accuracy = losses.metrics.replace_accuracy;
      if (!std::isfinite(row.loss_total)) {
        failure = "non-finite loss";
      } else {
        tape.backward(losses.total);
      }
    } catch (const NumericError& e) {
      row.loss_total = std::numeric_limits<double>::quiet_NaN();
      failure = e.what();
    }
    if (failure.empty()) {
      try {
        const auto clip = clip_gradients(params, cfg.schedule.clip_norm);
        row.grad_norm_preclip = clip.norm;
        row.clipped = clip.clipped();
      } catch (const NumericError& e) {
        row.grad_norm_preclip = std::numeric_limits<double>::quiet_NaN();
        failure = e.what();
      }
    }
    if (!failure.empty()) {
      result.aborted = true;
      result.message = "step " + std::to_string(step) + ": " + failure + " (loss_total=" +
                       std::to_string(row.loss_total) + ", loss_aux=" + std::to_string(row.loss_aux) +
                       ", loss_rtd=" + std::to_string(row.loss_rtd) + ", loss_sclm=" + std::to_string(row.loss_sclm) +
                       ")";
      result.rows.push_back(row);
      if (opt.write_files) {
        metrics << format_metrics_row(row) << '\n';
        result.final_checkpoint = checkpoint("checkpoint-last-good.bin", step - 1);
      }
      std::cerr << "aborting at " << result.message << '\n';
      return result;
    }
    adam_step(params, adam, row.lr);
    result.rows.push_back(row);
    result.last_step = step;
    if (opt.on_step) opt.on_step(row, model);
    if (opt.write_files) {
      if (step % cfg.output.metrics_every == 0) metrics << format_metrics_row(row) << '\n' << std::flush;
      if (step % cfg.output.checkpoint_every == 0) checkpoint("checkpoint-" + std::to_string(step) + ".bin", step);
    }
    if (opt.log_every > 0 && step % opt.log_every == 0)
      std::cerr << "step " << step << " loss " << row.loss_total << " aux " << row.loss_aux << " replace_rate "
                << row.replace_rate << '\n';
  }
  if (opt.write_files) result.final_checkpoint = checkpoint("checkpoint-final.bin", result.last_step);
  return result;
}

}  // namespace metro
