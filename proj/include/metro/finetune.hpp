#pragma once

// Fine-tuning of the main encoder: per-task linear heads on [CLS], posterior
// differential regularization (task loss + alpha * divergence between the
// clean and an embedding-perturbed posterior), and multi-task training with
// size-weighted round-robin task selection.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "metro/checkpoint.hpp"
#include "metro/config.hpp"
#include "metro/data.hpp"
#include "metro/encoder.hpp"
#include "metro/optim.hpp"
#include "metro/tokens.hpp"

namespace metro {

enum class Divergence { forward_kl, symmetric_kl };
enum class BallNorm { l2, linf };

struct PdrConfig {
  double alpha = 1.0;
  double radius = 1e-3;
  int perturbations_per_step = 1;
  Divergence divergence = Divergence::forward_kl;
  BallNorm norm = BallNorm::l2;

  void validate() const {
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("must be finite and non-negative", "pdr.alpha");
    if (!(radius >= 0.0) || !std::isfinite(radius)) throw ConfigError("must be finite and non-negative", "pdr.radius");
    if (perturbations_per_step < 1) throw ConfigError("must be at least 1", "pdr.perturbations_per_step");
  }
};

struct Example {
  IdList ids;  // starts with [CLS], ends with [SEP]
  int label = 0;
};

struct TaskSpec {
  std::string name;
  int n_classes = 2;
  std::vector<Example> train;
  std::vector<Example> dev;

  void validate(int max_seq_len, int vocab_size) const {
    if (n_classes < 2) throw ConfigError("must be at least 2", "tasks." + name + ".n_classes");
    if (train.empty()) throw DataError("task " + name + ": no training examples");
    for (const auto* set : {&train, &dev}) {
      for (const auto& e : *set) {
        if (e.label < 0 || e.label >= n_classes)
          throw DataError("task " + name + ": label " + std::to_string(e.label) + " outside [0," +
                          std::to_string(n_classes) + ")");
        if (e.ids.empty() || e.ids.size() > static_cast<std::size_t>(max_seq_len))
          throw DataError("task " + name + ": example length " + std::to_string(e.ids.size()) + " outside [1," +
                          std::to_string(max_seq_len) + "]");
        for (auto id : e.ids)
          if (id < 0 || id >= vocab_size) throw DataError("task " + name + ": token id " + std::to_string(id) + " out of range");
      }
    }
  }
};

template <typename T>
struct ClassifierHead {
  Tensor<T> weight;  // [d x n_classes]
  Tensor<T> bias;    // [n_classes]
  std::vector<Tensor<T>> parameters() const { return {weight, bias}; }
};

template <typename T>
struct FinetuneModel {
  ModelConfig config;
  EncoderWeights<T> encoder;
  std::vector<ClassifierHead<T>> heads;

  // Encoder tensors used by classification (the LM and RTD heads are left out).
  std::vector<Tensor<T>> encoder_parameters() const {
    std::vector<Tensor<T>> out;
    for (const auto& nt : encoder.named_tensors("main")) {
      const auto& n = nt.name;
      if (n == "main.lm_bias" || n == "main.rtd_weight" || n == "main.rtd_bias") continue;
      out.push_back(nt.tensor);
    }
    return out;
  }

  void add_head(int n_classes, std::uint64_t seed, const std::string& name) {
    const auto d = static_cast<std::size_t>(config.hidden_size);
    const auto k = static_cast<std::size_t>(n_classes);
    heads.push_back({detail::normal_tensor<T>({d, k}, config.init_std, seed, "head." + name + ".weight"),
                     detail::filled<T>({k}, T{0})});
  }
};

// Main encoder of a pretraining checkpoint.
inline FinetuneModel<float> load_main_encoder(const std::string& checkpoint) {
  const auto header = peek_checkpoint(checkpoint);
  const RunConfig cfg = run_config_from_json(header.config);
  auto model = PretrainModel<float>::init(cfg.model, cfg.seed);
  const auto named = model.parameters();
  std::vector<Tensor<float>> params;
  for (const auto& n : named) params.push_back(n.tensor);
  auto adam = AdamState<float>::init(cfg.optimizer, params);
  load_checkpoint(checkpoint, named, adam);
  return {cfg.model, model.main, {}};
}

inline FinetuneModel<float> fresh_main_encoder(const ModelConfig& cfg, std::uint64_t seed) {
  return {cfg, init_encoder<float>(cfg, cfg.depth_main, true, seed, "main"), {}};
}

// Perturbation for `batch` sequences of `seq_len` x `d` embeddings, drawn
// fresh from `rng`. L2: a Gaussian direction scaled to norm `radius` per
// sequence. Linf: independent uniform components in [-radius, radius].
inline std::vector<float> draw_perturbation(std::size_t batch, std::size_t seq_len, std::size_t d, double radius,
                                            BallNorm norm, RngStream& rng) {
  const std::size_t per_seq = seq_len * d;
  std::vector<float> eps(batch * per_seq, 0.0f);
  if (radius == 0.0) return eps;
  for (std::size_t b = 0; b < batch; ++b) {
    float* e = eps.data() + b * per_seq;
    if (norm == BallNorm::linf) {
      for (std::size_t i = 0; i < per_seq; ++i) e[i] = static_cast<float>((2.0 * rng.uniform() - 1.0) * radius);
      continue;
    }
    std::vector<double> g(per_seq);
    double sq = 0;
    for (auto& v : g) {
      v = rng.normal();
      sq += v * v;
    }
    // Scaling in double and rounding down keeps the float norm inside the ball.
    const double s = radius / std::sqrt(sq) * (1.0 - 1e-6);
    for (std::size_t i = 0; i < per_seq; ++i) e[i] = static_cast<float>(g[i] * s);
  }
  return eps;
}

struct ClassBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  IdList ids;
  std::vector<std::uint8_t> pad;
  IdList labels;
};

// Pads the selected examples to the longest one.
inline ClassBatch make_class_batch(const std::vector<Example>& examples, const std::vector<std::size_t>& indices) {
  ClassBatch cb;
  cb.batch = indices.size();
  for (auto i : indices) cb.seq_len = std::max(cb.seq_len, examples[i].ids.size());
  cb.ids.assign(cb.batch * cb.seq_len, kPadId);
  cb.pad.assign(cb.batch * cb.seq_len, 1);
  for (std::size_t b = 0; b < cb.batch; ++b) {
    const auto& e = examples[indices[b]];
    for (std::size_t j = 0; j < e.ids.size(); ++j) {
      cb.ids[b * cb.seq_len + j] = e.ids[j];
      cb.pad[b * cb.seq_len + j] = 0;
    }
    cb.labels.push_back(e.label);
  }
  return cb;
}

// Class logits [batch x n_classes] from the [CLS] hidden state.
template <typename T>
Tensor<T> classify(Tape<T>& tape, const FinetuneModel<T>& model, std::size_t head, const ClassBatch& cb,
                   const ForwardOptions<T>& opt) {
  const Tensor<T> hidden = encode(tape, model.config, model.encoder, EncoderInput{cb.batch, cb.seq_len, cb.ids, cb.pad}, opt);
  RowList cls(cb.batch);
  for (std::size_t b = 0; b < cb.batch; ++b) cls[b] = b * cb.seq_len;
  const auto& h = model.heads.at(head);
  return tape.linear(tape.gather_rows(hidden, cls), h.weight, &h.bias);
}

template <typename T>
struct PdrLosses {
  Tensor<T> total;
  Tensor<T> task;
  Tensor<T> regularizer;  // undefined when alpha == 0
  Tensor<T> clean_logits;
};

// Task cross-entropy on the clean pass plus alpha times the mean divergence
// over the perturbed passes. Both passes use the same dropout masks; the
// perturbation itself is a constant.
template <typename T>
PdrLosses<T> pdr_loss(Tape<T>& tape, const FinetuneModel<T>& model, std::size_t head, const ClassBatch& cb,
                      const PdrConfig& pdr, std::uint64_t seed, std::uint64_t step, bool train = true) {
  pdr.validate();
  ForwardOptions<T> opt;
  opt.train = train;
  opt.dropout = static_cast<T>(model.config.dropout_main);
  opt.dropout_ctx = {seed, step, stream_id("finetune"), 0};
  PdrLosses<T> out;
  out.clean_logits = classify(tape, model, head, cb, opt);
  out.task = tape.cross_entropy(out.clean_logits, cb.labels);
  out.total = out.task;
  if (pdr.alpha == 0.0) return out;

  RngStream rng(seed, stream_id("perturb"), step);
  const auto d = static_cast<std::size_t>(model.config.hidden_size);
  Tensor<T> reg;
  for (int k = 0; k < pdr.perturbations_per_step; ++k) {
    const auto eps = draw_perturbation(cb.batch, cb.seq_len, d, pdr.radius, pdr.norm, rng);
    Tensor<T> e({cb.batch * cb.seq_len, d});
    std::transform(eps.begin(), eps.end(), e.data().begin(), [](float v) { return static_cast<T>(v); });
    ForwardOptions<T> popt = opt;
    popt.embedding_perturbation = &e;
    const Tensor<T> noisy = classify(tape, model, head, cb, popt);
    Tensor<T> r = tape.kl_div_logits(out.clean_logits, noisy);
    if (pdr.divergence == Divergence::symmetric_kl) r = tape.add(r, tape.kl_div_logits(noisy, out.clean_logits));
    reg = reg.defined() ? tape.add(reg, r) : r;
  }
  if (pdr.perturbations_per_step > 1) reg = tape.scale(reg, T{1} / static_cast<T>(pdr.perturbations_per_step));
  out.regularizer = reg;
  out.total = tape.add(out.task, tape.scale(reg, static_cast<T>(pdr.alpha)));
  return out;
}

// Deterministic interleaving where each task is picked in proportion to its
// weight (smooth weighted round-robin).
class TaskScheduler {
 public:
  explicit TaskScheduler(std::vector<double> weights) : weights_(std::move(weights)), current_(weights_.size(), 0.0) {
    if (weights_.empty()) throw ConfigError("no tasks", "tasks");
    for (double w : weights_) {
      if (!(w > 0)) throw ConfigError("task weights must be positive", "tasks");
      total_ += w;
    }
  }

  std::size_t next() {
    std::size_t best = 0;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      current_[i] += weights_[i];
      if (current_[i] > current_[best]) best = i;
    }
    current_[best] -= total_;
    return best;
  }

 private:
  std::vector<double> weights_;
  std::vector<double> current_;
  double total_ = 0;
};

struct FinetuneConfig {
  std::uint64_t seed = 1;
  int batch_size = 32;
  ScheduleConfig schedule{1e-3, 30, 300, 1.0};
  OptimizerConfig optimizer{0.9, 0.98, 1e-6, 0.01};
  PdrConfig pdr;
};

struct TaskResult {
  std::string task;
  double dev_accuracy = 0;
  double final_train_loss = 0;
};

struct FinetuneResult {
  std::uint64_t seed = 0;
  std::vector<TaskResult> tasks;
};

template <typename T>
double evaluate(const FinetuneModel<T>& model, std::size_t head, const std::vector<Example>& examples,
                std::size_t batch_size = 64) {
  if (examples.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::size_t correct = 0;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(examples.size(), start + batch_size); ++i) idx.push_back(i);
    const ClassBatch cb = make_class_batch(examples, idx);
    Tape<T> tape;
    const Tensor<T> logits = classify(tape, model, head, cb, ForwardOptions<T>{});
    const std::size_t k = logits.dim(1);
    for (std::size_t b = 0; b < cb.batch; ++b) {
      const auto row = logits.data().subspan(b * k, k);
      const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      correct += pred == cb.labels[b];
    }
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

struct FinetuneHooks {
  // Called after backward and clipping, before the optimizer step.
  std::function<void(std::int64_t step, std::size_t task, const FinetuneModel<float>&)> after_backward;
  // Called after the optimizer step.
  std::function<void(std::int64_t step, std::size_t task, const FinetuneModel<float>&)> after_step;
};

// Trains `model` (whose heads are added here, one per task) and reports dev
// accuracy per task. Every random choice at step s is keyed by (seed, s).
inline FinetuneResult finetune(FinetuneModel<float>& model, const std::vector<TaskSpec>& tasks, const FinetuneConfig& cfg,
                               const FinetuneHooks& hooks = {}) {
  cfg.pdr.validate();
  if (cfg.batch_size < 1) throw ConfigError("must be at least 1", "batch_size");
  cfg.schedule.validate();
  std::vector<double> weights;
  for (const auto& t : tasks) {
    t.validate(model.config.max_seq_len, model.config.vocab_size);
    weights.push_back(static_cast<double>(t.train.size()));
  }
  TaskScheduler scheduler(weights);
  model.heads.clear();
  for (const auto& t : tasks) model.add_head(t.n_classes, cfg.seed, t.name);

  const auto enc_params = model.encoder_parameters();
  auto enc_adam = AdamState<float>::init(cfg.optimizer, enc_params);
  std::vector<AdamState<float>> head_adam;
  for (const auto& h : model.heads) head_adam.push_back(AdamState<float>::init(cfg.optimizer, h.parameters()));

  std::vector<double> last_loss(tasks.size(), std::numeric_limits<double>::quiet_NaN());
  for (std::int64_t step = 1; step <= cfg.schedule.max_steps; ++step) {
    const std::size_t task = scheduler.next();
    const auto& train = tasks[task].train;
    RngStream data_rng(cfg.seed, stream_id("data"), static_cast<std::uint64_t>(step));
    std::vector<std::size_t> idx(static_cast<std::size_t>(cfg.batch_size));
    for (auto& i : idx) i = data_rng.below(train.size());
    const ClassBatch cb = make_class_batch(train, idx);

    auto params = enc_params;
    const auto head_params = model.heads[task].parameters();
    params.insert(params.end(), head_params.begin(), head_params.end());
    for (auto p : params) p.zero_grad();
    Tape<float> tape;
    const auto losses = pdr_loss(tape, model, task, cb, cfg.pdr, cfg.seed, static_cast<std::uint64_t>(step));
    const double loss = losses.total.item();
    if (!std::isfinite(loss)) throw NumericError("finetune: non-finite loss at step " + std::to_string(step));
    tape.backward(losses.total);
    clip_gradients(params, cfg.schedule.clip_norm);
    if (hooks.after_backward) hooks.after_backward(step, task, model);
    const double lr = lr_at(step, cfg.schedule);
    adam_step(enc_params, enc_adam, lr);
    adam_step(head_params, head_adam[task], lr);
    last_loss[task] = loss;
    if (hooks.after_step) hooks.after_step(step, task, model);
  }

  FinetuneResult result;
  result.seed = cfg.seed;
  for (std::size_t t = 0; t < tasks.size(); ++t) result.tasks.push_back({tasks[t].name, evaluate(model, t, tasks[t].dev), last_loss[t]});
  return result;
}

// ---- toy tasks and task files ---------------------------------------------

// Filler letters with two marker bytes ('x' or 'y') at random distinct
// positions; the label is 1 when the markers differ.
inline std::vector<Example> marker_parity_examples(std::size_t n, std::uint64_t seed, int max_seq_len,
                                                   const ByteTokenizer& tok = {}) {
  if (max_seq_len < 6) throw ConfigError("marker parity needs max_seq_len >= 6", "max_seq_len");
  RngStream rng(seed, "marker-parity");
  const std::string filler = "abcdefg ";
  const std::size_t max_body = std::min<std::size_t>(static_cast<std::size_t>(max_seq_len) - 2, 12);
  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = 4 + rng.below(max_body - 3);
    std::string body(len, ' ');
    for (auto& c : body) c = filler[rng.below(filler.size())];
    const std::size_t p1 = rng.below(len);
    std::size_t p2 = rng.below(len - 1);
    if (p2 >= p1) ++p2;
    const bool m1 = rng.below(2) == 1, m2 = rng.below(2) == 1;
    body[p1] = m1 ? 'x' : 'y';
    body[p2] = m2 ? 'x' : 'y';
    Example e;
    e.ids.push_back(kClsId);
    for (auto id : tok.encode(body)) e.ids.push_back(id);
    e.ids.push_back(kSepId);
    e.label = m1 != m2 ? 1 : 0;
    out.push_back(std::move(e));
  }
  return out;
}

inline Example make_example(std::string_view text, int label, const ByteTokenizer& tok, int max_seq_len) {
  Example e;
  e.label = label;
  e.ids.push_back(kClsId);
  auto body = tok.encode(text);
  body.resize(std::min(body.size(), static_cast<std::size_t>(std::max(max_seq_len - 2, 0))));
  e.ids.insert(e.ids.end(), body.begin(), body.end());
  e.ids.push_back(kSepId);
  return e;
}

namespace detail {

// JSON lines of {"text": ..., "label": ...}.
inline std::vector<Example> read_examples(const std::string& path, const ByteTokenizer& tok, int max_seq_len) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open task data " + path);
  std::vector<Example> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("text") || !j.contains("label") || !j["text"].is_string() ||
        !j["label"].is_number_integer() || j.size() != 2)
      throw DataError(path + ":" + std::to_string(lineno) + ": expected {\"text\": string, \"label\": integer}");
    out.push_back(make_example(j["text"].get<std::string>(), j["label"].get<int>(), tok, max_seq_len));
  }
  return out;
}

}  // namespace detail

// tasks.json: {"tasks": [{"name", "n_classes", then either "generator":
// "marker-parity" with "train_size", "dev_size", "seed", or "train"/"dev"
// JSON-lines paths relative to the tasks file}]}.
inline std::vector<TaskSpec> load_tasks(const std::string& path, int max_seq_len, const ByteTokenizer& tok = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open tasks file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(e.what(), "tasks");
  }
  if (!j.is_object() || !j.contains("tasks") || !j["tasks"].is_array()) throw ConfigError("expected an array", "tasks");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "tasks") throw ConfigError("unknown key", it.key());
  const auto base = std::filesystem::path(path).parent_path();
  std::vector<TaskSpec> out;
  for (std::size_t i = 0; i < j["tasks"].size(); ++i) {
    const auto& t = j["tasks"][i];
    const std::string where = "tasks[" + std::to_string(i) + "]";
    detail::ObjectReader r(t, where);
    TaskSpec spec;
    r.required("name", spec.name);
    r.required("n_classes", spec.n_classes);
    std::string generator, train, dev;
    std::int64_t train_size = 2000, dev_size = 500;
    std::uint64_t seed = 1;
    r.optional("generator", generator);
    r.optional("train_size", train_size);
    r.optional("dev_size", dev_size);
    r.optional("seed", seed);
    r.optional("train", train);
    r.optional("dev", dev);
    r.finish();
    if (!generator.empty()) {
      if (generator != "marker-parity") throw ConfigError("unknown generator '" + generator + "' (known: marker-parity)", where + ".generator");
      if (train_size < 1 || dev_size < 0) throw ConfigError("sizes must be positive", where);
      auto all = marker_parity_examples(static_cast<std::size_t>(train_size + dev_size), seed, max_seq_len, tok);
      spec.dev.assign(all.begin() + train_size, all.end());
      all.resize(static_cast<std::size_t>(train_size));
      spec.train = std::move(all);
    } else {
      if (train.empty()) throw ConfigError("missing required key (or a generator)", where + ".train");
      spec.train = detail::read_examples((base / train).string(), tok, max_seq_len);
      if (!dev.empty()) spec.dev = detail::read_examples((base / dev).string(), tok, max_seq_len);
    }
    out.push_back(std::move(spec));
  }
  return out;
}

struct SeedSummary {
  std::string task;
  double mean_acc = 0;
  double std_acc = 0;  // sample standard deviation (n - 1)
  std::size_t seeds = 0;
};

inline std::vector<SeedSummary> summarize(const std::vector<FinetuneResult>& runs) {
  std::vector<SeedSummary> out;
  if (runs.empty()) return out;
  for (std::size_t t = 0; t < runs.front().tasks.size(); ++t) {
    SeedSummary s;
    s.task = runs.front().tasks[t].task;
    s.seeds = runs.size();
    for (const auto& r : runs) s.mean_acc += r.tasks[t].dev_accuracy;
    s.mean_acc /= static_cast<double>(runs.size());
    double ss = 0;
    for (const auto& r : runs) ss += (r.tasks[t].dev_accuracy - s.mean_acc) * (r.tasks[t].dev_accuracy - s.mean_acc);
    s.std_acc = runs.size() > 1 ? std::sqrt(ss / static_cast<double>(runs.size() - 1)) : 0.0;
    out.push_back(s);
  }
  return out;
}

}  // namespace metro
