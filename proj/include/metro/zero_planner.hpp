#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>

#include "json.hpp"
#include "metro/errors.hpp"

namespace metro {

struct BytesPerParam {
  double params = 2;      // fp16 weights
  double grads = 2;       // fp16 gradients
  double optimizer = 16;  // fp32 master weights + fp32 gradient accumulator + Adam m + v
};

struct MemoryPlan {
  double total_params = 0;
  int n_gpus = 1;
  int stage = 0;
  double params_bytes = 0;
  double grads_bytes = 0;
  double optimizer_bytes = 0;
  double total_bytes = 0;
};

// Per-GPU memory for ZeRO stage 0..3: stage 1 shards the optimizer state,
// stage 2 also the gradients, stage 3 also the parameters.
inline MemoryPlan plan_memory(double total_params, int n_gpus, int stage, const BytesPerParam& bytes = {}) {
  if (!(total_params > 0)) throw ConfigError("must be positive", "params");
  if (n_gpus < 1) throw ConfigError("must be at least 1", "gpus");
  if (stage < 0 || stage > 3) throw ConfigError("must be 0, 1, 2 or 3", "stage");
  if (bytes.params < 0 || bytes.grads < 0 || bytes.optimizer < 0) throw ConfigError("must be non-negative", "bytes");
  const double n = n_gpus;
  MemoryPlan p;
  p.total_params = total_params;
  p.n_gpus = n_gpus;
  p.stage = stage;
  p.optimizer_bytes = total_params * bytes.optimizer / (stage >= 1 ? n : 1.0);
  p.grads_bytes = total_params * bytes.grads / (stage >= 2 ? n : 1.0);
  p.params_bytes = total_params * bytes.params / (stage >= 3 ? n : 1.0);
  p.total_bytes = p.params_bytes + p.grads_bytes + p.optimizer_bytes;
  return p;
}

struct ModelPreset {
  std::string_view name;
  double params_main;
  double params_aux;
  int hidden;
  int ffn;
  int depth_main;
  int depth_aux;
  int heads;
  double total() const { return params_main + params_aux; }
};

inline constexpr std::array<ModelPreset, 4> kModelPresets{{
    {"Base", 184e6, 29e6, 768, 3072, 12, 4, 12},
    {"Large", 434e6, 116e6, 1024, 4096, 24, 6, 16},
    {"XL", 1.6e9, 300e6, 1536, 6144, 48, 8, 24},
    {"XXL", 5.4e9, 600e6, 2560, 10240, 64, 8, 40},
}};

inline const ModelPreset& find_preset(std::string_view name) {
  for (const auto& p : kModelPresets)
    if (p.name == name) return p;
  std::string known;
  for (const auto& p : kModelPresets) known += (known.empty() ? "" : ", ") + std::string(p.name);
  throw ConfigError("unknown preset '" + std::string(name) + "' (known: " + known + ")", "preset");
}

inline double preset_params(std::string_view name) { return find_preset(name).total(); }

// Human-readable size: decimal (GB = 1e9) by default, binary (GiB) on request.
inline std::string format_bytes(double bytes, bool binary = false) {
  const double k = binary ? 1024.0 : 1000.0;
  static constexpr std::array<const char*, 4> dec{"B", "KB", "MB", "GB"};
  static constexpr std::array<const char*, 4> bin{"B", "KiB", "MiB", "GiB"};
  std::size_t u = 0;
  while (u + 1 < dec.size() && bytes >= k) {
    bytes /= k;
    ++u;
  }
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4g %s", bytes, binary ? bin[u] : dec[u]);
  return buf;
}

inline nlohmann::json to_json(const MemoryPlan& p, bool binary = false) {
  return nlohmann::json{{"total_params", p.total_params},
                        {"n_gpus", p.n_gpus},
                        {"stage", p.stage},
                        {"params_bytes", p.params_bytes},
                        {"grads_bytes", p.grads_bytes},
                        {"optimizer_bytes", p.optimizer_bytes},
                        {"total_bytes", p.total_bytes},
                        {"units", binary ? "GiB" : "GB"},
                        {"params", format_bytes(p.params_bytes, binary)},
                        {"grads", format_bytes(p.grads_bytes, binary)},
                        {"optimizer", format_bytes(p.optimizer_bytes, binary)},
                        {"total", format_bytes(p.total_bytes, binary)}};
}

// Reference table for XXL (6.0B parameters) on 256 GPUs, in bytes.
struct PlannerReference {
  int stage;
  double params, grads, optimizer, total;
};

inline constexpr std::array<PlannerReference, 4> kZeroTableXXL256{{
    {0, 12e9, 12e9, 96e9, 120e9},
    {1, 12e9, 12e9, 400e6, 24.4e9},
    {2, 12e9, 50e6, 400e6, 12.5e9},
    {3, 50e6, 50e6, 400e6, 500e6},
}};

}  // namespace metro
