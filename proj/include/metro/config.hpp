#pragma once

// Hyperparameter structs and their strict JSON mapping. Readers reject
// unknown keys and report the full key path of any problem; writers always
// emit every field so an effective config is fully self-describing.

#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <string>

#include "json.hpp"
#include "metro/errors.hpp"

namespace metro {

using Json = nlohmann::json;

enum class LayerNormPlacement { post, pre };
enum class MainObjective { rtd_only, rtd_plus_sclm, replace_mlm };

inline std::string to_string(LayerNormPlacement p) { return p == LayerNormPlacement::post ? "post" : "pre"; }
inline std::string to_string(MainObjective o) {
  switch (o) {
    case MainObjective::rtd_only: return "rtd_only";
    case MainObjective::rtd_plus_sclm: return "rtd_plus_sclm";
    case MainObjective::replace_mlm: return "replace_mlm";
  }
  return "?";
}

struct ModelConfig {
  int hidden_size = 64;
  int ffn_width = 256;
  int depth_main = 4;
  int depth_aux = 2;
  int attention_heads = 4;
  int vocab_size = 260;
  int max_seq_len = 64;
  int relpos_bins = 64;
  int relpos_max_distance = 128;
  LayerNormPlacement layernorm_placement = LayerNormPlacement::post;
  bool tupe_reset_cls = true;
  bool share_word_embeddings = true;
  bool share_position_embeddings = false;
  bool share_lm_bias = false;
  double dropout_main = 0.1;
  double dropout_aux = 0.0;
  double init_std = 0.02;
  bool scaled_init = true;
  double layer_norm_eps = 1e-5;

  void validate() const {
    auto positive = [](int v, const char* key) {
      if (v <= 0) throw ConfigError("must be positive", std::string("model.") + key);
    };
    positive(hidden_size, "hidden_size");
    positive(ffn_width, "ffn_width");
    positive(depth_main, "depth_main");
    positive(depth_aux, "depth_aux");
    positive(attention_heads, "attention_heads");
    positive(vocab_size, "vocab_size");
    positive(max_seq_len, "max_seq_len");
    positive(relpos_max_distance, "relpos_max_distance");
    if (hidden_size % attention_heads != 0)
      throw ConfigError("hidden_size must be divisible by attention_heads", "model.hidden_size");
    if (depth_aux > depth_main) throw ConfigError("auxiliary depth must not exceed main depth", "model.depth_aux");
    if (relpos_bins < 2 || relpos_bins % 2 != 0) throw ConfigError("must be an even number >= 2", "model.relpos_bins");
    if (dropout_main < 0 || dropout_main >= 1) throw ConfigError("must be in [0,1)", "model.dropout_main");
    if (dropout_aux < 0 || dropout_aux >= 1) throw ConfigError("must be in [0,1)", "model.dropout_aux");
    if (!(init_std > 0)) throw ConfigError("must be positive", "model.init_std");
    if (!(layer_norm_eps > 0)) throw ConfigError("must be positive", "model.layer_norm_eps");
  }
};

struct ObjectiveConfig {
  double mask_rate = 0.15;
  double lambda = 50.0;
  MainObjective main_objective = MainObjective::rtd_plus_sclm;

  void validate() const {
    if (!(mask_rate > 0 && mask_rate < 1)) throw ConfigError("must be in (0,1)", "objective.mask_rate");
    if (!(lambda >= 0) || !std::isfinite(lambda)) throw ConfigError("must be finite and non-negative", "objective.lambda");
  }
};

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-6;
  double weight_decay = 0.01;

  void validate() const {
    if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("must be in [0,1)", "optimizer.beta1");
    if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("must be in [0,1)", "optimizer.beta2");
    if (!(eps > 0)) throw ConfigError("must be positive", "optimizer.eps");
    if (weight_decay < 0) throw ConfigError("must be non-negative", "optimizer.weight_decay");
  }
};

struct ScheduleConfig {
  double peak_lr = 5e-4;
  std::int64_t warmup_steps = 100;
  std::int64_t max_steps = 1000;
  double clip_norm = 2.0;

  void validate() const {
    if (!(peak_lr > 0)) throw ConfigError("must be positive", "schedule.peak_lr");
    if (!(warmup_steps > 0 && warmup_steps < max_steps))
      throw ConfigError("need 0 < warmup_steps < max_steps", "schedule.warmup_steps");
    if (!(clip_norm > 0)) throw ConfigError("must be positive", "schedule.clip_norm");
  }
};

struct DataConfig {
  std::string corpus;
  std::string vocab;  // optional byte -> id remapping file
  int batch_size = 16;

  void validate() const {
    if (corpus.empty()) throw ConfigError("required", "data.corpus");
    if (batch_size <= 0) throw ConfigError("must be positive", "data.batch_size");
  }
};

struct OutputConfig {
  std::string dir = "run";
  std::int64_t metrics_every = 10;
  std::int64_t checkpoint_every = 500;

  void validate() const {
    if (metrics_every <= 0) throw ConfigError("must be positive", "output.metrics_every");
    if (checkpoint_every <= 0) throw ConfigError("must be positive", "output.checkpoint_every");
  }
};

struct RunConfig {
  ModelConfig model;
  ObjectiveConfig objective;
  OptimizerConfig optimizer;
  ScheduleConfig schedule;
  DataConfig data;
  OutputConfig output;
  std::uint64_t seed = 1;

  void validate() const {
    model.validate();
    objective.validate();
    optimizer.validate();
    schedule.validate();
    data.validate();
    output.validate();
  }
};

// ---- JSON ------------------------------------------------------------------

namespace detail {

// Reads fields from one JSON object, remembering which keys were consumed so
// leftovers can be rejected.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("expected a JSON object", path_.empty() ? "<root>" : path_);
  }

  template <typename V>
  void optional(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    read(key, out);
  }

  template <typename V>
  void required(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) throw ConfigError("missing required key", join(key));
    read(key, out);
  }

  const Json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown key", join(it.key()));
  }

  std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  template <typename V>
  void read(const char* key, V& out) {
    const Json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<V, LayerNormPlacement>) {
        const auto s = v.get<std::string>();
        if (s == "post") out = LayerNormPlacement::post;
        else if (s == "pre") out = LayerNormPlacement::pre;
        else throw ConfigError("expected \"post\" or \"pre\"", join(key));
      } else if constexpr (std::is_same_v<V, MainObjective>) {
        const auto s = v.get<std::string>();
        if (s == "rtd_only") out = MainObjective::rtd_only;
        else if (s == "rtd_plus_sclm") out = MainObjective::rtd_plus_sclm;
        else if (s == "replace_mlm") out = MainObjective::replace_mlm;
        else throw ConfigError("expected rtd_only, rtd_plus_sclm or replace_mlm", join(key));
      } else if constexpr (std::is_same_v<V, bool>) {
        if (!v.is_boolean()) throw ConfigError("expected a boolean", join(key));
        out = v.get<bool>();
      } else if constexpr (std::is_integral_v<V>) {
        if (!v.is_number_integer()) throw ConfigError("expected an integer", join(key));
        out = v.get<V>();
      } else if constexpr (std::is_floating_point_v<V>) {
        if (!v.is_number()) throw ConfigError("expected a number", join(key));
        out = v.get<V>();
      } else {
        if (!v.is_string()) throw ConfigError("expected a string", join(key));
        out = v.get<V>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(e.what(), join(key));
    }
  }

  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline Json to_json(const ModelConfig& c) {
  return Json{{"hidden_size", c.hidden_size},
              {"ffn_width", c.ffn_width},
              {"depth_main", c.depth_main},
              {"depth_aux", c.depth_aux},
              {"attention_heads", c.attention_heads},
              {"vocab_size", c.vocab_size},
              {"max_seq_len", c.max_seq_len},
              {"relpos_bins", c.relpos_bins},
              {"relpos_max_distance", c.relpos_max_distance},
              {"layernorm_placement", to_string(c.layernorm_placement)},
              {"tupe_reset_cls", c.tupe_reset_cls},
              {"share_word_embeddings", c.share_word_embeddings},
              {"share_position_embeddings", c.share_position_embeddings},
              {"share_lm_bias", c.share_lm_bias},
              {"dropout_main", c.dropout_main},
              {"dropout_aux", c.dropout_aux},
              {"init_std", c.init_std},
              {"scaled_init", c.scaled_init},
              {"layer_norm_eps", c.layer_norm_eps}};
}

inline ModelConfig model_config_from_json(const Json& j, const std::string& path = "model") {
  ModelConfig c;
  detail::ObjectReader r(j, path);
  r.required("hidden_size", c.hidden_size);
  r.required("ffn_width", c.ffn_width);
  r.required("depth_main", c.depth_main);
  r.required("depth_aux", c.depth_aux);
  r.required("attention_heads", c.attention_heads);
  r.optional("vocab_size", c.vocab_size);
  r.required("max_seq_len", c.max_seq_len);
  r.optional("relpos_bins", c.relpos_bins);
  r.optional("relpos_max_distance", c.relpos_max_distance);
  r.optional("layernorm_placement", c.layernorm_placement);
  r.optional("tupe_reset_cls", c.tupe_reset_cls);
  r.optional("share_word_embeddings", c.share_word_embeddings);
  r.optional("share_position_embeddings", c.share_position_embeddings);
  r.optional("share_lm_bias", c.share_lm_bias);
  r.optional("dropout_main", c.dropout_main);
  r.optional("dropout_aux", c.dropout_aux);
  r.optional("init_std", c.init_std);
  r.optional("scaled_init", c.scaled_init);
  r.optional("layer_norm_eps", c.layer_norm_eps);
  r.finish();
  return c;
}

inline Json to_json(const RunConfig& c) {
  return Json{{"model", to_json(c.model)},
              {"objective",
               {{"mask_rate", c.objective.mask_rate},
                {"lambda", c.objective.lambda},
                {"main_objective", to_string(c.objective.main_objective)}}},
              {"optimizer",
               {{"beta1", c.optimizer.beta1},
                {"beta2", c.optimizer.beta2},
                {"eps", c.optimizer.eps},
                {"weight_decay", c.optimizer.weight_decay}}},
              {"schedule",
               {{"peak_lr", c.schedule.peak_lr},
                {"warmup_steps", c.schedule.warmup_steps},
                {"max_steps", c.schedule.max_steps},
                {"clip_norm", c.schedule.clip_norm}}},
              {"data", {{"corpus", c.data.corpus}, {"vocab", c.data.vocab}, {"batch_size", c.data.batch_size}}},
              {"output",
               {{"dir", c.output.dir},
                {"metrics_every", c.output.metrics_every},
                {"checkpoint_every", c.output.checkpoint_every}}},
              {"seed", c.seed}};
}

inline RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  detail::ObjectReader root(j, "");
  root.optional("seed", c.seed);

  const Json* model = root.child("model");
  if (!model) throw ConfigError("missing required key", "model");
  c.model = model_config_from_json(*model);

  if (const Json* o = root.child("objective")) {
    detail::ObjectReader r(*o, "objective");
    r.optional("mask_rate", c.objective.mask_rate);
    r.optional("lambda", c.objective.lambda);
    r.optional("main_objective", c.objective.main_objective);
    r.finish();
  }
  if (const Json* o = root.child("optimizer")) {
    detail::ObjectReader r(*o, "optimizer");
    r.optional("beta1", c.optimizer.beta1);
    r.optional("beta2", c.optimizer.beta2);
    r.optional("eps", c.optimizer.eps);
    r.optional("weight_decay", c.optimizer.weight_decay);
    r.finish();
  }
  const Json* sched = root.child("schedule");
  if (!sched) throw ConfigError("missing required key", "schedule");
  {
    detail::ObjectReader r(*sched, "schedule");
    r.required("peak_lr", c.schedule.peak_lr);
    r.required("warmup_steps", c.schedule.warmup_steps);
    r.required("max_steps", c.schedule.max_steps);
    r.optional("clip_norm", c.schedule.clip_norm);
    r.finish();
  }
  const Json* data = root.child("data");
  if (!data) throw ConfigError("missing required key", "data");
  {
    detail::ObjectReader r(*data, "data");
    r.required("corpus", c.data.corpus);
    r.optional("vocab", c.data.vocab);
    r.optional("batch_size", c.data.batch_size);
    r.finish();
  }
  if (const Json* o = root.child("output")) {
    detail::ObjectReader r(*o, "output");
    r.optional("dir", c.output.dir);
    r.optional("metrics_every", c.output.metrics_every);
    r.optional("checkpoint_every", c.output.checkpoint_every);
    r.finish();
  }
  root.finish();
  c.validate();
  return c;
}

}  // namespace metro
