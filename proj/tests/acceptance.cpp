// End-to-end acceptance run: one PASS/FAIL line per criterion on stdout,
// progress on stderr. Exit status is non-zero when any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "metro/metro.hpp"

using namespace metro;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string fmt(const char* format, double a = 0, double b = 0, double c = 0, double d = 0) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), format, a, b, c, d);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string checkpoint_body(const fs::path& p) {
  const auto all = slurp(p);
  return all.substr(all.find('\n') + 1);
}

fs::path work_dir() {
  const auto d = fs::current_path() / "acceptance-work";
  fs::create_directories(d);
  return d;
}

std::vector<IdList> toy_corpus() {
  return tokenize_documents(split_documents(generate_corpus(CorpusSpec{})), ByteTokenizer{}, 260);
}

RunConfig toy_config(const fs::path& dir) {
  RunConfig c;
  c.model.hidden_size = 64;
  c.model.ffn_width = 256;
  c.model.depth_main = 4;
  c.model.depth_aux = 2;
  c.model.attention_heads = 4;
  c.model.vocab_size = 260;
  c.model.max_seq_len = 64;
  c.schedule.peak_lr = 5e-4;
  c.schedule.warmup_steps = 100;
  c.schedule.max_steps = 2000;
  c.data.corpus = "generated";
  c.data.batch_size = 16;
  c.output.dir = dir.string();
  c.output.metrics_every = 1;
  c.output.checkpoint_every = 1000;
  c.seed = 1;
  return c;
}

double mean_of(const std::vector<MetricsRow>& rows, std::size_t from, std::size_t to) {
  double s = 0;
  for (std::size_t i = from; i < to; ++i) s += rows[i].replace_rate;
  return s / static_cast<double>(to - from);
}

// ---- criteria ---------------------------------------------------------------

Outcome planner_table() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto checks = verify_planner();
  const double secs = seconds_since(t0);
  bool ok = secs < 1.0;
  std::string detail;
  for (const auto& c : checks) {
    ok = ok && c.passed;
    detail += "stage " + c.name.substr(c.name.size() - 1) + ": " + c.detail + "; ";
  }
  return {ok, detail + fmt("runtime %.3g s", secs)};
}

Outcome gradient_verification() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto cases = run_gradcheck_suite(7, 20, 1e-6, 1e-5);
  const double secs = seconds_since(t0);
  double worst = 0;
  std::string failed;
  for (const auto& c : cases) {
    worst = std::max(worst, c.max_rel_error);
    if (!c.passed || c.instances < 20) failed += " " + c.op;
  }
  return {failed.empty() && secs < 30.0,
          fmt("%g ops x 20 instances, worst rel err %.3g, runtime %.3g s", static_cast<double>(cases.size()), worst, secs) +
              (failed.empty() ? "" : "; failing:" + failed)};
}

struct ToyRun {
  TrainResult result;
  double seconds = 0;
  std::string checkpoint;
};

ToyRun toy_pretrain() {
  const auto dir = work_dir() / "toy";
  fs::remove_all(dir);
  TrainOptions opt;
  opt.log_every = 250;
  const auto t0 = std::chrono::steady_clock::now();
  ToyRun run;
  run.result = train(toy_config(dir), toy_corpus(), opt);
  run.seconds = seconds_since(t0);
  run.checkpoint = run.result.final_checkpoint;
  return run;
}

Outcome curriculum(const ToyRun& run) {
  const auto& rows = run.result.rows;
  if (run.result.aborted || rows.size() < 2000) return {false, "run aborted: " + run.result.message};
  double lo = 1, hi = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    lo = std::min(lo, rows[i].replace_rate);
    hi = std::max(hi, rows[i].replace_rate);
  }
  const double first = mean_of(rows, 0, 100), last = mean_of(rows, rows.size() - 100, rows.size());
  const bool ok = lo >= 0.13 && hi <= 0.16 && last < 0.75 * first && run.seconds <= 600.0;
  return {ok, fmt("replace_rate steps 1-10 in [%.4f, %.4f]; mean first 100 %.4f, last 100 %.4f", lo, hi, first, last) +
                  fmt(" (ratio %.3f); runtime %.0f s", last / first, run.seconds)};
}

Outcome scaled_init() {
  RunConfig cfg = toy_config(work_dir() / "deep");
  cfg.model.depth_main = 12;
  cfg.model.scaled_init = true;
  const auto model = PretrainModel<float>::init(cfg.model, 3);
  double worst = 0;
  for (std::size_t l = 0; l < model.main.layers.size(); ++l) {
    const double target = cfg.model.init_std / std::sqrt(2.0 * static_cast<double>(l + 1));
    for (const auto* t : {&model.main.layers[l].wo, &model.main.layers[l].w2}) {
      double s = 0, s2 = 0;
      for (float v : t->data()) {
        s += v;
        s2 += static_cast<double>(v) * v;
      }
      const double n = static_cast<double>(t->numel());
      const double sd = std::sqrt(s2 / n - (s / n) * (s / n));
      worst = std::max(worst, std::abs(sd - target) / target);
    }
  }

  fs::remove_all(cfg.output.dir);
  cfg.schedule.max_steps = 500;
  cfg.schedule.peak_lr = 5e-4;
  cfg.data.batch_size = 8;
  cfg.output.checkpoint_every = 500;
  TrainOptions opt;
  opt.write_files = false;
  opt.log_every = 100;
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = train(cfg, toy_corpus(), opt);
  const double secs = seconds_since(t0);
  bool finite = !r.aborted && r.last_step == 500;
  for (const auto& row : r.rows) finite = finite && std::isfinite(row.loss_total) && std::isfinite(row.grad_norm_preclip);
  const double final_loss = r.rows.empty() ? NAN : r.rows.back().loss_total;
  return {worst <= 0.05 && finite,
          fmt("Wo/W2 std worst rel diff %.4f over 12 layers; 12-layer run %g steps, ", worst, static_cast<double>(r.last_step)) +
              (finite ? "all losses finite" : "non-finite: " + r.message) +
              fmt(", final loss %.4f, runtime %.0f s", final_loss, secs)};
}

Outcome loss_algebra() {
  const double t = total_loss(2.0, 0.1, 3.0, 50.0, MainObjective::rtd_plus_sclm);
  const bool exact = t == 10.0;

  RunConfig cfg = toy_config(work_dir() / "lambda0");
  cfg.objective.lambda = 0.0;
  const auto model = PretrainModel<float>::init(cfg.model, cfg.seed);
  const auto docs = toy_corpus();
  const Batch batch = make_batch(docs, 16, 64, cfg.seed, 1);
  Tape<float> tape;
  auto losses = pretrain_forward(tape, model, cfg.objective, batch.ids, batch.pad, 16, 64, cfg.seed, 1);
  tape.backward(losses.total);
  double rtd_grad = 0;
  for (const auto* p : {&model.main.rtd_weight, &model.main.rtd_bias})
    if (p->has_grad())
      for (float g : p->grad()) rtd_grad += std::abs(g);
  const double aux = losses.aux.item(), ln_v = std::log(260.0);
  const bool near = std::abs(aux - ln_v) / ln_v <= 0.05;
  return {exact && rtd_grad == 0.0 && near,
          fmt("total(2.0, 0.1, 3.0, lambda=50) = %.17g; |grad rtd head| at lambda=0 = %g; MLM loss at init %.4f vs ln V %.4f",
              t, rtd_grad, aux, ln_v)};
}

Outcome corruption_contract() {
  const std::size_t B = 8, L = 32, V = 260, batches = 10000;
  const auto docs = toy_corpus();
  std::size_t violations = 0, replaced_total = 0, masked_total = 0;
  for (std::size_t k = 0; k < batches; ++k) {
    const Batch batch = make_batch(docs, B, L, 11, k + 1);
    RngStream mask_rng(11, stream_id("mask"), k + 1);
    CorruptionBatch cb = select_masks(batch.ids, batch.pad, B, L, 0.15, mask_rng);
    Tensor<float> logits({cb.masked.size(), V});
    RngStream logit_rng(11, stream_id("test-logits"), k + 1);
    for (auto& v : logits.data()) v = static_cast<float>(2.0 * logit_rng.normal());
    RngStream sample_rng(11, stream_id("sample"), k + 1);
    sample_corruption(cb, logits, sample_rng);
    std::vector<std::uint8_t> in_m(B * L, 0);
    for (auto i : cb.masked) in_m[i] = 1;
    for (std::size_t i = 0; i < B * L; ++i) {
      if (!in_m[i]) {
        violations += cb.x_noise[i] != cb.x_orig[i];
        violations += cb.replaced[i] != 0;
      } else {
        violations += (cb.replaced[i] != 0) != (cb.x_noise[i] != cb.x_orig[i]);
        replaced_total += cb.replaced[i];
      }
    }
    masked_total += cb.masked.size();
  }

  ModelConfig mc;
  mc.hidden_size = 32;
  mc.ffn_width = 64;
  mc.depth_main = 2;
  mc.depth_aux = 1;
  mc.attention_heads = 2;
  mc.max_seq_len = 32;
  const auto model = PretrainModel<float>::init(mc, 5);
  const Batch batch = make_batch(docs, 4, 32, 5, 1);
  Tape<float> tape;
  auto r = pretrain_forward(tape, model, ObjectiveConfig{}, batch.ids, batch.pad, 4, 32, 5, 1);
  tape.backward(tape.add(tape.scale(r.rtd, 50.0f), r.sclm));
  double aux_grad = 0;
  for (const auto& p : model.parameters())
    if (p.name.rfind("aux.", 0) == 0 && p.tensor.has_grad())
      for (float g : p.tensor.grad()) aux_grad += std::abs(g);
  double shared_grad = 0;
  for (float g : model.main.word_embeddings.grad()) shared_grad += std::abs(g);
  return {violations == 0 && aux_grad == 0.0 && shared_grad > 0.0,
          fmt("%g batches, %g masked, %g replaced, %g contract violations; ", static_cast<double>(batches),
              static_cast<double>(masked_total), static_cast<double>(replaced_total), static_cast<double>(violations)) +
              fmt("aux-only grad from main losses %g, shared embedding grad %.3g", aux_grad, shared_grad)};
}

Outcome fused_equivalence() {
  bool ok = true;
  std::string detail;
  for (const auto& c : verify_fused(10000)) {
    ok = ok && c.passed;
    detail += c.name.substr(6, c.name.find(' ', 6) - 6) + ": " + c.detail + "; ";
  }
  StableOpParams p;
  p.op = StableOp::softmax;
  std::vector<Half> x(10000);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = f32_to_half(static_cast<float>(i % 97) - 48.0f);
  p.cols = 100;
  AllocCounter cu, cf;
  unfused_stable_op(x, p, cu);
  fused_stable_op(x, p, cf);
  ok = ok && cf.n_buffers == 0 && cu.n_buffers >= 2;
  for (auto op : {StableOp::softmax_dropout, StableOp::layernorm}) {
    const auto r = bench_stable_op(op, 1u << 20, 5);
    ok = ok && r.max_bit_diff == 0;
    if (op == StableOp::layernorm) ok = ok && r.ns_per_call_fused < 1e9 && r.ns_per_call_unfused < 1e9;
    detail += "bench " + to_string(op) +
              fmt(" n=2^20: fused %.1f ms, unfused %.1f ms, speedup %.1f%%, bytes ratio %.2f", r.ns_per_call_fused / 1e6,
                  r.ns_per_call_unfused / 1e6, 100.0 * (r.speedup() - 1.0), r.bytes_ratio()) +
              "; ";
  }
  return {ok, detail + "(speedups reported, not asserted)"};
}

Outcome pdr_properties(const std::string& checkpoint) {
  bool ok = true;
  std::string detail;
  for (const auto& c : verify_pdr()) {
    ok = ok && c.passed;
    detail += c.detail + "; ";
  }

  // R >= 0 over 10^3 random batches on the fine-tuning model.
  ModelConfig mc;
  mc.hidden_size = 32;
  mc.ffn_width = 64;
  mc.depth_main = 2;
  mc.attention_heads = 2;
  mc.max_seq_len = 32;
  auto small = fresh_main_encoder(mc, 2);
  small.add_head(2, 2, "r");
  const auto pool = marker_parity_examples(4000, 9, 32);
  double min_r = INFINITY;
  for (std::uint64_t i = 0; i < 1000; ++i) {
    const auto cb = make_class_batch(pool, {4 * i, 4 * i + 1, 4 * i + 2, 4 * i + 3});
    PdrConfig p;
    p.radius = i % 2 ? 1e-3 : 0.3;
    p.divergence = i % 4 == 0 ? Divergence::symmetric_kl : Divergence::forward_kl;
    Tape<float> tape;
    min_r = std::min(min_r, static_cast<double>(pdr_loss(tape, small, 0, cb, p, 1, i + 1).regularizer.item()));
  }
  ok = ok && min_r >= 0.0;
  detail += fmt("min R over 1000 batches %.3g; ", min_r);

  const bool from_ckpt = !checkpoint.empty() && fs::exists(checkpoint);
  auto base = [&] {
    if (from_ckpt) return load_main_encoder(checkpoint);
    ModelConfig toy = toy_config(work_dir()).model;
    return fresh_main_encoder(toy, 1);
  };
  const int max_len = base().config.max_seq_len;
  const TaskSpec task{"marker-parity", 2, marker_parity_examples(2000, 1, max_len), marker_parity_examples(500, 2, max_len)};
  std::vector<FinetuneResult> vanilla, pdr;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    for (double alpha : {0.0, 1.0}) {
      FinetuneConfig cfg;
      cfg.seed = seed;
      cfg.pdr.alpha = alpha;
      cfg.schedule.max_steps = 2000;
      auto model = base();
      const auto r = finetune(model, {task}, cfg);
      (alpha == 0.0 ? vanilla : pdr).push_back(r);
      std::cerr << "finetune seed " << seed << " alpha " << alpha << " dev accuracy " << r.tasks[0].dev_accuracy << '\n';
    }
  }
  const auto sv = summarize(vanilla).front(), sp = summarize(pdr).front();
  ok = ok && vanilla.front().tasks[0].dev_accuracy >= 0.95;
  detail += std::string(from_ckpt ? "from the toy checkpoint" : "from random init") +
            fmt(": vanilla seed-1 accuracy %.4f; 5 seeds vanilla mean %.4f std %.4f, PDR mean %.4f", vanilla.front().tasks[0].dev_accuracy,
                sv.mean_acc, sv.std_acc, sp.mean_acc) +
            fmt(" std %.4f (soft check: PDR std <= vanilla std is ", sp.std_acc) + (sp.std_acc <= sv.std_acc ? "true)" : "false)");
  return {ok, detail};
}

Outcome determinism() {
  const auto docs = toy_corpus();
  auto cfg_for = [&](const fs::path& dir) {
    RunConfig c = toy_config(dir);
    c.model.depth_main = 2;
    c.model.depth_aux = 1;
    c.schedule.warmup_steps = 5;
    c.schedule.max_steps = 40;
    c.data.batch_size = 4;
    c.output.checkpoint_every = 20;
    return c;
  };
  const auto a = work_dir() / "det-a", b = work_dir() / "det-b", part = work_dir() / "det-part";
  for (const auto& d : {a, b, part}) fs::remove_all(d);
  train(cfg_for(a), docs);
  train(cfg_for(b), docs);
  const bool same = slurp(a / "metrics.csv") == slurp(b / "metrics.csv") && !slurp(a / "metrics.csv").empty();
  TrainOptions stop;
  stop.stop_after = 20;
  train(cfg_for(part), docs, stop);
  TrainOptions resume;
  resume.resume_from = (part / "checkpoint-20.bin").string();
  train(cfg_for(part), docs, resume);
  const bool resumed_metrics = slurp(a / "metrics.csv") == slurp(part / "metrics.csv");
  const bool resumed_ckpt = checkpoint_body(a / "checkpoint-final.bin") == checkpoint_body(part / "checkpoint-final.bin");
  return {same && resumed_metrics && resumed_ckpt,
          std::string("identical seeds give identical metrics: ") + (same ? "yes" : "no") +
              "; stop at 20 + resume vs 40 uninterrupted: metrics " + (resumed_metrics ? "identical" : "differ") +
              ", final checkpoint " + (resumed_ckpt ? "identical" : "differs")};
}

}  // namespace

int main() {
  int failures = 0;
  auto report = [&](int id, const std::string& title, const std::function<Outcome()>& fn) {
    std::cerr << "running criterion " << id << ": " << title << '\n';
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.passed;
    std::cout << "CRITERION " << id << ' ' << (o.passed ? "PASS" : "FAIL") << "  " << title << "  | " << o.detail << std::endl;
  };

  ToyRun toy;
  report(1, "memory planner table", planner_table);
  report(2, "gradient verification", gradient_verification);
  report(3, "curriculum dynamics", [&] {
    toy = toy_pretrain();
    return curriculum(toy);
  });
  report(4, "scaled initialization and deep smoke run", scaled_init);
  report(5, "loss algebra", loss_algebra);
  report(6, "corruption contract", corruption_contract);
  report(7, "fused-op equivalence", fused_equivalence);
  report(8, "posterior differential regularization", [&] { return pdr_properties(toy.checkpoint); });
  report(9, "determinism and resume", determinism);
  std::cout << (failures == 0 ? "all 9 criteria passed" : std::to_string(failures) + " of 9 criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
