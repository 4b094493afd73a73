// Command-line front end: corpus generation, pretraining, fine-tuning,
// memory planning, fused-kernel benchmarks and the verification suites.
// Machine-readable output goes to stdout (JSON) or files; logs go to stderr.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "metro/metro.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kFailed = 1, kUsage = 2, kData = 3 };

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw metro::IoError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw metro::ConfigError(std::string("invalid JSON: ") + e.what(), path);
  }
}

void write_json_file(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw metro::IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// Relative data paths in a config file are resolved against the file's directory.
std::string resolve(const std::string& path, const fs::path& base) {
  if (path.empty() || fs::path(path).is_absolute()) return path;
  return fs::weakly_canonical(base / path).string();
}

int run_gen_corpus(const std::string& out, const metro::CorpusSpec& spec) {
  const std::string text = metro::generate_corpus(spec);
  metro::write_text_file(out, text);
  std::cout << json{{"path", out},         {"documents", spec.documents}, {"min_length", spec.min_length},
                    {"max_length", spec.max_length}, {"seed", spec.seed},     {"bytes", text.size()}}
                   .dump()
            << '\n';
  return kOk;
}

struct PretrainArgs {
  std::string config;
  bool dry_run = false;
  std::string resume;
  std::int64_t stop_after = -1;
  std::int64_t log_every = 100;
};

int run_pretrain(const PretrainArgs& a) {
  metro::RunConfig cfg = metro::run_config_from_json(read_json_file(a.config));
  const fs::path base = fs::path(a.config).parent_path();
  cfg.data.corpus = resolve(cfg.data.corpus, base);
  cfg.data.vocab = resolve(cfg.data.vocab, base);
  cfg.validate();
  const metro::ByteTokenizer tok =
      cfg.data.vocab.empty() ? metro::ByteTokenizer{} : metro::ByteTokenizer::from_file(cfg.data.vocab);
  if (tok.vocab_size() > cfg.model.vocab_size)
    throw metro::ConfigError("tokenizer needs " + std::to_string(tok.vocab_size()) + " ids", "model.vocab_size");

  if (a.dry_run) {
    const auto model = metro::PretrainModel<float>::init(cfg.model, cfg.seed);
    const auto counts = metro::count_parameters(model);
    write_json_file(fs::path(cfg.output.dir) / "effective-config.json", metro::to_json(cfg));
    std::cout << json{{"parameters", {{"aux", counts.aux}, {"main", counts.main}, {"shared", counts.shared},
                                      {"total", counts.total()}}},
                      {"effective_config", (fs::path(cfg.output.dir) / "effective-config.json").string()}}
                     .dump(2)
              << '\n';
    return kOk;
  }

  const auto docs = metro::tokenize_documents(metro::read_corpus(cfg.data.corpus), tok, cfg.model.vocab_size);
  std::cerr << "corpus: " << docs.size() << " documents from " << cfg.data.corpus << '\n';
  metro::TrainOptions opt;
  opt.resume_from = a.resume;
  opt.stop_after = a.stop_after;
  opt.log_every = a.log_every;
  const auto result = metro::train(cfg, docs, opt);
  std::cout << json{{"last_step", result.last_step},
                    {"aborted", result.aborted},
                    {"message", result.message},
                    {"checkpoint", result.final_checkpoint},
                    {"metrics", (fs::path(cfg.output.dir) / "metrics.csv").string()}}
                   .dump(2)
            << '\n';
  return result.aborted ? kFailed : kOk;
}

struct FinetuneArgs {
  std::string checkpoint;
  std::string tasks;
  std::string out = "finetune";
  double alpha = 1.0;
  double radius = 1e-3;
  std::string divergence = "forward_kl";
  std::string norm = "l2";
  int perturbations = 1;
  int seeds = 1;
  std::uint64_t seed = 1;
  std::int64_t steps = 300;
  std::int64_t warmup = 30;
  int batch_size = 32;
  double lr = 1e-3;
  double clip = 1.0;
};

int run_finetune(const FinetuneArgs& a) {
  metro::FinetuneConfig cfg;
  cfg.batch_size = a.batch_size;
  cfg.schedule = {a.lr, a.warmup, a.steps, a.clip};
  cfg.pdr.alpha = a.alpha;
  cfg.pdr.radius = a.radius;
  cfg.pdr.perturbations_per_step = a.perturbations;
  cfg.pdr.divergence = a.divergence == "symmetric_kl" ? metro::Divergence::symmetric_kl : metro::Divergence::forward_kl;
  cfg.pdr.norm = a.norm == "linf" ? metro::BallNorm::linf : metro::BallNorm::l2;
  cfg.pdr.validate();
  cfg.schedule.validate();

  const auto probe = metro::load_main_encoder(a.checkpoint);
  const auto tasks = metro::load_tasks(a.tasks, probe.config.max_seq_len);
  std::vector<metro::FinetuneResult> runs;
  fs::create_directories(a.out);
  std::ofstream csv(fs::path(a.out) / "seeds.csv");
  csv << "seed,task,dev_accuracy,final_train_loss\n";
  for (int s = 0; s < a.seeds; ++s) {
    cfg.seed = a.seed + static_cast<std::uint64_t>(s);
    auto model = metro::load_main_encoder(a.checkpoint);
    runs.push_back(metro::finetune(model, tasks, cfg));
    for (const auto& t : runs.back().tasks) {
      csv << cfg.seed << ',' << t.task << ',' << t.dev_accuracy << ',' << t.final_train_loss << '\n';
      std::cerr << "seed " << cfg.seed << " task " << t.task << " dev accuracy " << t.dev_accuracy << '\n';
    }
  }
  json report = json::object();
  for (const auto& s : metro::summarize(runs))
    report[s.task] = {{"mean_acc", s.mean_acc}, {"std_acc", s.std_acc}, {"seeds", s.seeds}};
  json full{{"tasks", report},
            {"pdr", {{"alpha", a.alpha}, {"radius", a.radius}, {"divergence", a.divergence}, {"norm", a.norm},
                     {"perturbations_per_step", a.perturbations}}},
            {"steps", a.steps},
            {"batch_size", a.batch_size},
            {"peak_lr", a.lr},
            {"first_seed", a.seed}};
  write_json_file(fs::path(a.out) / "report.json", full);
  std::cout << full.dump(2) << '\n';
  return kOk;
}

struct PlanArgs {
  double params = 0;
  std::string preset;
  int gpus = 256;
  int stage = -1;
  bool binary = false;
  std::vector<double> bytes{2, 2, 16};
};

int run_plan(const PlanArgs& a) {
  if ((a.params > 0) == !a.preset.empty())
    throw metro::ConfigError("give exactly one of --params or --preset", "params");
  const double n = a.preset.empty() ? a.params : metro::preset_params(a.preset);
  const metro::BytesPerParam bytes{a.bytes.at(0), a.bytes.at(1), a.bytes.at(2)};
  json plans = json::array();
  for (int s = 0; s <= 3; ++s)
    if (a.stage < 0 || a.stage == s) plans.push_back(metro::to_json(metro::plan_memory(n, a.gpus, s, bytes), a.binary));
  std::cout << json{{"total_params", n}, {"n_gpus", a.gpus}, {"plans", plans}}.dump(2) << '\n';
  return kOk;
}

int print_checks(const std::vector<metro::VerifyCheck>& checks) {
  std::size_t failed = 0;
  for (const auto& c : checks) {
    std::cout << metro::format_check(c) << '\n';
    failed += !c.passed;
  }
  std::cout << (failed == 0 ? "all " + std::to_string(checks.size()) + " checks passed"
                            : std::to_string(failed) + " of " + std::to_string(checks.size()) + " checks failed")
            << '\n';
  return failed == 0 ? kOk : kFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Denoising pretraining toolkit"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-corpus", "Write a synthetic Markov-chain corpus");
  std::string corpus_out;
  metro::CorpusSpec spec;
  gen->add_option("--out", corpus_out, "Output path")->required();
  gen->add_option("--docs", spec.documents, "Number of documents")->check(CLI::PositiveNumber);
  gen->add_option("--min-len", spec.min_length, "Minimum document length in characters")->check(CLI::PositiveNumber);
  gen->add_option("--max-len", spec.max_length, "Maximum document length in characters")->check(CLI::PositiveNumber);
  gen->add_option("--seed", spec.seed, "Grammar and sampling seed");

  auto* pre = app.add_subcommand("pretrain", "Joint auxiliary + main denoising pretraining");
  PretrainArgs pa;
  pre->add_option("--config", pa.config, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  pre->add_flag("--dry-run", pa.dry_run, "Validate, print parameter counts, write effective-config.json, exit");
  pre->add_option("--resume", pa.resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  pre->add_option("--stop-after", pa.stop_after, "Stop after this step");
  pre->add_option("--log-every", pa.log_every, "Progress line on stderr every N steps (0 = off)");

  auto* ft = app.add_subcommand("finetune", "Fine-tune the main encoder with per-task heads");
  FinetuneArgs fa;
  ft->add_option("--checkpoint", fa.checkpoint, "Pretraining checkpoint")->required()->check(CLI::ExistingFile);
  ft->add_option("--tasks", fa.tasks, "Task file (JSON)")->required()->check(CLI::ExistingFile);
  ft->add_option("--out", fa.out, "Output directory for report.json and seeds.csv");
  ft->add_option("--pdr-alpha", fa.alpha, "Regularization weight (0 disables)");
  ft->add_option("--pdr-c", fa.radius, "Perturbation radius");
  ft->add_option("--pdr-divergence", fa.divergence)->check(CLI::IsMember({"forward_kl", "symmetric_kl"}));
  ft->add_option("--pdr-norm", fa.norm)->check(CLI::IsMember({"l2", "linf"}));
  ft->add_option("--pdr-perturbations", fa.perturbations, "Perturbations per step")->check(CLI::PositiveNumber);
  ft->add_option("--seeds", fa.seeds, "Number of seeds")->check(CLI::PositiveNumber);
  ft->add_option("--seed", fa.seed, "First seed");
  ft->add_option("--steps", fa.steps, "Training steps");
  ft->add_option("--warmup", fa.warmup, "Warm-up steps");
  ft->add_option("--batch-size", fa.batch_size)->check(CLI::PositiveNumber);
  ft->add_option("--lr", fa.lr, "Peak learning rate");
  ft->add_option("--clip", fa.clip, "Gradient clipping norm");

  auto* plan = app.add_subcommand("plan-memory", "Per-GPU memory under ZeRO stages 0-3");
  PlanArgs pl;
  plan->add_option("--params", pl.params, "Total parameter count");
  plan->add_option("--preset", pl.preset, "Model preset (Base, Large, XL, XXL)");
  plan->add_option("--gpus", pl.gpus)->check(CLI::PositiveNumber);
  plan->add_option("--stage", pl.stage, "Single stage (default: all)")->check(CLI::Range(0, 3));
  plan->add_flag("--binary", pl.binary, "Report GiB instead of GB");
  plan->add_option("--bytes-per-param", pl.bytes, "Bytes per parameter: weights grads optimizer")->expected(3);

  auto* bench = app.add_subcommand("bench-fused", "Fused vs unfused fp32-in-half kernels");
  std::string bench_op = "softmax-dropout";
  std::size_t bench_n = 1 << 20, bench_cols = 1024;
  int bench_reps = 7;
  bench->add_option("--op", bench_op)->check(CLI::IsMember({"softmax", "softmax-dropout", "layernorm"}));
  bench->add_option("--n", bench_n, "Number of elements")->check(CLI::PositiveNumber);
  bench->add_option("--cols", bench_cols, "Row length")->check(CLI::PositiveNumber);
  bench->add_option("--reps", bench_reps, "Timed repetitions (median reported)");

  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of every differentiable op");
  std::uint64_t gc_seed = 7;
  std::size_t gc_instances = 20;
  gc->add_option("--seed", gc_seed);
  gc->add_option("--instances", gc_instances, "Random instances per op")->check(CLI::PositiveNumber);

  auto* verify = app.add_subcommand("verify", "Gradient, loss, planner, PDR and fused-kernel checks");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) return run_gen_corpus(corpus_out, spec);
    if (*pre) return run_pretrain(pa);
    if (*ft) return run_finetune(fa);
    if (*plan) return run_plan(pl);
    if (*bench) {
      std::cout << metro::to_json(metro::bench_stable_op(metro::parse_stable_op(bench_op), bench_n, bench_reps, bench_cols))
                       .dump(2)
                << '\n';
      return kOk;
    }
    if (*gc) return print_checks(metro::verify_gradients(gc_seed, gc_instances));
    if (*verify) return print_checks(metro::run_verify());
  } catch (const metro::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const metro::DimensionError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}
