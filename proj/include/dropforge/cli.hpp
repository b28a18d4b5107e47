#pragma once

#include <cstdint>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dropforge/calibration.hpp"
#include "dropforge/checkpoint.hpp"
#include "dropforge/errors.hpp"
#include "dropforge/evalbench.hpp"
#include "dropforge/io_util.hpp"
#include "dropforge/model.hpp"
#include "dropforge/parallel.hpp"
#include "dropforge/planner.hpp"
#include "dropforge/scoring.hpp"
#include "dropforge/train.hpp"

namespace dropforge::cli {

namespace detail {

struct CommonModelFlags {
  std::int64_t layers = 4;
  std::int64_t d_model = 64;
  std::int64_t heads = 4;
  std::int64_t kv_heads = 0;  // 0 -> same as heads
  std::int64_t head_dim = 0;  // 0 -> d_model / heads
  std::int64_t d_ff = 0;      // 0 -> 4 * d_model
  std::int64_t vocab = 256;
  std::int64_t max_seq = 1024;
  float norm_eps = 1e-5f;
  bool rope = false;

  ModelConfig to_config() const {
    ModelConfig cfg;
    cfg.n_layers = layers;
    cfg.d_model = d_model;
    cfg.n_heads = heads;
    cfg.n_kv_heads = kv_heads > 0 ? kv_heads : heads;
    cfg.head_dim = head_dim > 0 ? head_dim : d_model / heads;
    cfg.d_ff = d_ff > 0 ? d_ff : 4 * d_model;
    cfg.vocab_size = vocab;
    cfg.max_seq = max_seq;
    cfg.norm_eps = norm_eps;
    cfg.use_rope = rope;
    cfg.validate();
    return cfg;
  }

  void attach(CLI::App* app) {
    app->add_option("--layers", layers, "transformer layer count");
    app->add_option("--d-model", d_model, "residual stream width");
    app->add_option("--heads", heads, "query head count");
    app->add_option("--kv-heads", kv_heads, "key/value head count (default: --heads)");
    app->add_option("--head-dim", head_dim, "per-head width (default: d-model / heads)");
    app->add_option("--d-ff", d_ff, "mlp hidden width (default: 4 * d-model)");
    app->add_option("--vocab", vocab, "vocabulary size");
    app->add_option("--max-seq", max_seq, "maximum sequence length");
    app->add_option("--norm-eps", norm_eps, "rms normalization epsilon");
    app->add_flag("--rope", rope, "enable rotary position embeddings");
  }
};

inline std::set<UnitKind> parse_targets(const std::string& csv) {
  std::set<UnitKind> targets;
  for (const std::string& t : split(csv, ','))
    if (!t.empty()) targets.insert(unit_kind_from_name(t));
  if (targets.empty()) throw InputError("no target kinds given");
  return targets;
}

inline std::vector<double> parse_ratio_list(const std::string& csv) {
  std::vector<double> out;
  for (const std::string& t : split(csv, ','))
    if (!t.empty()) out.push_back(parse_double(t));
  if (out.empty()) throw InputError("no ratios given");
  return out;
}

inline bool parse_on_off(const std::string& s) {
  if (s == "on") return true;
  if (s == "off") return false;
  throw InputError("expected on or off, got: " + s);
}

}  // namespace detail

// Runs one subcommand. Exit codes: 0 success, 1 domain error, 2 usage
// error. All file outputs are written atomically.
inline int dispatch(const std::vector<std::string>& args) {
  CLI::App app{"dropforge: layer redundancy scoring, dropping and benchmarking for"
               " toy decoder-only transformers"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads,
                 "worker cap for batch-parallel stages (default: DROPFORGE_THREADS or 1)");

  // --- init
  auto* init_cmd = app.add_subcommand("init", "write a randomly initialized checkpoint");
  detail::CommonModelFlags init_flags;
  init_flags.attach(init_cmd);
  std::uint64_t init_seed = 0;
  std::string init_out;
  init_cmd->add_option("--seed", init_seed, "prng seed");
  init_cmd->add_option("--out", init_out, "output checkpoint path")->required();

  // --- inspect
  auto* inspect_cmd = app.add_subcommand("inspect", "print checkpoint config and unit status");
  std::string inspect_ckpt;
  inspect_cmd->add_option("--ckpt", inspect_ckpt, "checkpoint path")->required();

  // --- score
  auto* score_cmd = app.add_subcommand("score", "compute per-unit importance scores");
  std::string score_ckpt, score_calib, score_mode = "bytes", score_metric = "cosine";
  std::string score_targets = "block,attn,mlp", score_residual = "on", score_out;
  std::int64_t score_batch = 8, score_seq = 128;
  std::uint64_t score_seed = 0;
  bool score_seed_set = false;
  score_cmd->add_option("--ckpt", score_ckpt)->required();
  score_cmd->add_option("--calib", score_calib, "calibration corpus path")->required();
  score_cmd->add_option("--mode", score_mode, "corpus mode: bytes or ids");
  score_cmd->add_option("--metric", score_metric,
                        "cosine | cosine_no_residual | relative_magnitude | reverse_order | random");
  score_cmd->add_option("--targets", score_targets, "comma list of block,attn,mlp");
  score_cmd->add_option("--residual", score_residual, "score at the residual boundary (on|off)");
  score_cmd->add_option("--batch-size", score_batch);
  score_cmd->add_option("--seq-len", score_seq);
  score_cmd->add_option("--seed", score_seed, "seed for the random metric")
      ->each([&](const std::string&) { score_seed_set = true; });
  score_cmd->add_option("--out", score_out, "output scores csv")->required();

  // --- plan
  auto* plan_cmd = app.add_subcommand("plan", "turn scores into a drop plan");
  std::string plan_strategy = "one_shot", plan_scores, plan_kind = "attn", plan_out;
  std::string plan_ckpt, plan_calib, plan_mode = "bytes", plan_metric = "cosine";
  std::int64_t plan_n = 0, plan_batch = 8, plan_seq = 128;
  std::uint64_t plan_seed = 0;
  bool plan_seed_set = false;
  plan_cmd->add_option("--strategy", plan_strategy, "one_shot | iterative | joint");
  plan_cmd->add_option("--scores", plan_scores, "scores csv (one_shot, joint)");
  plan_cmd->add_option("--kind", plan_kind, "unit kind (one_shot, iterative)");
  plan_cmd->add_option("-n,--n", plan_n, "units to drop")->required();
  plan_cmd->add_option("--ckpt", plan_ckpt, "checkpoint (iterative)");
  plan_cmd->add_option("--calib", plan_calib, "calibration corpus (iterative)");
  plan_cmd->add_option("--mode", plan_mode);
  plan_cmd->add_option("--metric", plan_metric, "metric for iterative re-scoring");
  plan_cmd->add_option("--batch-size", plan_batch);
  plan_cmd->add_option("--seq-len", plan_seq);
  plan_cmd->add_option("--seed", plan_seed)->each([&](const std::string&) { plan_seed_set = true; });
  plan_cmd->add_option("--out", plan_out, "output plan json")->required();

  // --- drop
  auto* drop_cmd = app.add_subcommand("drop", "apply a drop plan to a checkpoint");
  std::string drop_ckpt, drop_plan, drop_out;
  drop_cmd->add_option("--ckpt", drop_ckpt)->required();
  drop_cmd->add_option("--plan", drop_plan, "plan json path")->required();
  drop_cmd->add_option("--out", drop_out, "output checkpoint path")->required();

  // --- eval
  auto* eval_cmd = app.add_subcommand("eval", "perplexity on a corpus");
  std::string eval_ckpt, eval_corpus, eval_mode = "bytes", eval_out;
  std::int64_t eval_batch = 8, eval_seq = 128;
  eval_cmd->add_option("--ckpt", eval_ckpt)->required();
  eval_cmd->add_option("--corpus", eval_corpus)->required();
  eval_cmd->add_option("--mode", eval_mode);
  eval_cmd->add_option("--batch-size", eval_batch);
  eval_cmd->add_option("--seq-len", eval_seq);
  eval_cmd->add_option("--out", eval_out, "output csv")->required();

  // --- bench
  auto* bench_cmd = app.add_subcommand(
      "bench", "wall-clock comparison of two checkpoints, or table mode for published averages");
  std::string bench_baseline, bench_pruned, bench_table, bench_out;
  BenchWorkload bench_wl;
  double bench_avg_base = 0.0, bench_avg_pruned = 0.0;
  bool bench_avg_base_set = false, bench_avg_pruned_set = false;
  bench_cmd->add_option("--baseline", bench_baseline, "baseline checkpoint");
  bench_cmd->add_option("--pruned", bench_pruned, "pruned checkpoint");
  bench_cmd->add_option("--table", bench_table, "label,avg,speedup csv (table mode)");
  bench_cmd->add_option("--batch", bench_wl.batch);
  bench_cmd->add_option("--prefill", bench_wl.prefill);
  bench_cmd->add_option("--gen", bench_wl.gen);
  bench_cmd->add_option("--reps", bench_wl.reps);
  bench_cmd->add_option("--avg-base", bench_avg_base, "external baseline accuracy average")
      ->each([&](const std::string&) { bench_avg_base_set = true; });
  bench_cmd->add_option("--avg-pruned", bench_avg_pruned, "external pruned accuracy average")
      ->each([&](const std::string&) { bench_avg_pruned_set = true; });
  bench_cmd->add_option("--out", bench_out)->required();

  // --- sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "quality and efficiency across dropping ratios");
  std::string sweep_ckpt, sweep_calib, sweep_eval, sweep_mode = "bytes", sweep_kind = "attn";
  std::string sweep_ratios_csv = "0,25,50,75,100", sweep_out;
  std::int64_t sweep_batch = 8, sweep_seq = 128;
  BenchWorkload sweep_wl;
  sweep_cmd->add_option("--ckpt", sweep_ckpt)->required();
  sweep_cmd->add_option("--calib", sweep_calib)->required();
  sweep_cmd->add_option("--eval-corpus", sweep_eval, "evaluation corpus (default: --calib)");
  sweep_cmd->add_option("--mode", sweep_mode);
  sweep_cmd->add_option("--kind", sweep_kind);
  sweep_cmd->add_option("--ratios", sweep_ratios_csv, "comma list of percentages");
  sweep_cmd->add_option("--batch-size", sweep_batch);
  sweep_cmd->add_option("--seq-len", sweep_seq);
  sweep_cmd->add_option("--bench-batch", sweep_wl.batch);
  sweep_cmd->add_option("--prefill", sweep_wl.prefill);
  sweep_cmd->add_option("--gen", sweep_wl.gen);
  sweep_cmd->add_option("--reps", sweep_wl.reps);
  sweep_cmd->add_option("--out", sweep_out)->required();

  // --- grid
  auto* grid_cmd = app.add_subcommand("grid", "drop-order grid over all budgets");
  std::string grid_scores, grid_kind = "attn", grid_out;
  grid_cmd->add_option("--scores", grid_scores, "scores csv")->required();
  grid_cmd->add_option("--kind", grid_kind);
  grid_cmd->add_option("--out", grid_out)->required();

  // --- trace
  auto* trace_cmd = app.add_subcommand("trace", "score a series of snapshots");
  std::string trace_ckpts, trace_calib, trace_mode = "bytes", trace_targets = "block,attn,mlp";
  std::string trace_out;
  std::int64_t trace_batch = 8, trace_seq = 128;
  trace_cmd->add_option("--ckpts", trace_ckpts, "comma list of checkpoint paths")->required();
  trace_cmd->add_option("--calib", trace_calib)->required();
  trace_cmd->add_option("--mode", trace_mode);
  trace_cmd->add_option("--targets", trace_targets);
  trace_cmd->add_option("--batch-size", trace_batch);
  trace_cmd->add_option("--seq-len", trace_seq);
  trace_cmd->add_option("--out", trace_out)->required();

  // --- train-toy
  auto* train_cmd = app.add_subcommand("train-toy", "train a small model and write snapshots");
  detail::CommonModelFlags train_flags;
  train_flags.layers = 6;
  train_flags.d_model = 128;
  train_flags.attach(train_cmd);
  std::string train_corpus, train_mode = "bytes", train_dir;
  ToyTrainOptions train_opt;
  train_cmd->add_option("--corpus", train_corpus)->required();
  train_cmd->add_option("--mode", train_mode);
  train_cmd->add_option("--steps", train_opt.steps);
  train_cmd->add_option("--lr", train_opt.lr);
  train_cmd->add_option("--seed", train_opt.seed);
  train_cmd->add_option("--snapshot-every", train_opt.snapshot_every);
  train_cmd->add_option("--batch-size", train_opt.batch_size);
  train_cmd->add_option("--seq-len", train_opt.seq_len);
  train_cmd->add_option("--out-dir", train_dir, "snapshot directory")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(std::move(reversed));
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help() << std::flush;
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (threads > 0) set_num_threads(threads);

    if (init_cmd->parsed()) {
      const Checkpoint ckpt = init_random(init_flags.to_config(), init_seed);
      save_checkpoint(ckpt, init_out);
      std::cout << "wrote checkpoint (" << ckpt.tensors.size() << " tensors) to " << init_out
                << "\n";
    } else if (inspect_cmd->parsed()) {
      const Checkpoint ckpt = load_checkpoint(inspect_ckpt);
      std::cout << config_to_json(ckpt.config).dump(2) << "\n";
      for (std::int64_t l = 0; l < ckpt.config.n_layers; ++l) {
        std::cout << "layer " << l
                  << ": attn=" << (ckpt.config.attn_dropped(l) ? "dropped" : "retained")
                  << " mlp=" << (ckpt.config.mlp_dropped(l) ? "dropped" : "retained") << "\n";
      }
      std::cout << "tensors: " << ckpt.tensors.size() << "\n";
    } else if (score_cmd->parsed()) {
      const Checkpoint ckpt = load_checkpoint(score_ckpt);
      const CalibrationSet calib = load_corpus(score_calib, corpus_mode_from_name(score_mode));
      const BatchPlan batches = make_batches(calib, score_batch, score_seq);
      const Metric metric = metric_from_name(score_metric);
      if (metric == Metric::random && !score_seed_set)
        throw UsageError("the random metric needs --seed");
      const ImportanceReport report = score_model(
          ckpt, batches, metric, detail::parse_targets(score_targets),
          detail::parse_on_off(score_residual),
          score_seed_set ? std::optional<std::uint64_t>(score_seed) : std::nullopt);
      write_report_csv(report, score_out);
      const std::size_t rows = report.block_scores.size() + report.attn_scores.size() +
                               report.mlp_scores.size();
      std::cout << "scored " << rows << " units over " << report.n_tokens << " tokens -> "
                << score_out << "\n";
    } else if (plan_cmd->parsed()) {
      const Strategy strategy = strategy_from_name(plan_strategy);
      DropPlan plan;
      if (strategy == Strategy::iterative) {
        if (plan_ckpt.empty() || plan_calib.empty())
          throw UsageError("iterative planning needs --ckpt and --calib");
        const Checkpoint ckpt = load_checkpoint(plan_ckpt);
        const CalibrationSet calib = load_corpus(plan_calib, corpus_mode_from_name(plan_mode));
        const BatchPlan batches = make_batches(calib, plan_batch, plan_seq);
        plan = plan_iterative(ckpt, batches, unit_kind_from_name(plan_kind), plan_n,
                              metric_from_name(plan_metric),
                              plan_seed_set ? std::optional<std::uint64_t>(plan_seed)
                                            : std::nullopt);
      } else {
        if (plan_scores.empty()) throw UsageError("planning needs --scores");
        const ImportanceReport report = load_report_csv(plan_scores);
        plan = strategy == Strategy::joint
                   ? plan_joint(report, plan_n)
                   : plan_one_shot(report, unit_kind_from_name(plan_kind), plan_n);
      }
      write_plan_json(plan, plan_out);
      std::cout << strategy_name(plan.strategy) << " plan with " << plan.steps.size()
                << " steps -> " << plan_out << "\n";
    } else if (drop_cmd->parsed()) {
      const Checkpoint ckpt = load_checkpoint(drop_ckpt);
      const DropPlan plan = load_plan_json(drop_plan);
      const Checkpoint pruned = apply_drop(ckpt, plan);
      save_checkpoint(pruned, drop_out);
      std::cout << "dropped " << plan.steps.size() << " units; retained attn "
                << pruned.config.retained_attn_layers() << "/" << pruned.config.n_layers
                << ", mlp " << pruned.config.retained_mlp_layers() << "/"
                << pruned.config.n_layers << " -> " << drop_out << "\n";
    } else if (eval_cmd->parsed()) {
      const Checkpoint ckpt = load_checkpoint(eval_ckpt);
      const CalibrationSet corpus = load_corpus(eval_corpus, corpus_mode_from_name(eval_mode));
      const BatchPlan batches = make_batches(corpus, eval_batch, eval_seq);
      const EvalResult res = perplexity(ckpt, batches);
      atomic_write_file(eval_out, "perplexity,n_tokens,corpus_digest\n" +
                                      format_double(res.perplexity) + ',' +
                                      std::to_string(res.n_tokens) + ',' + res.corpus_digest +
                                      "\n");
      std::cout << "perplexity " << format_double(res.perplexity) << " over " << res.n_tokens
                << " tokens -> " << eval_out << "\n";
    } else if (bench_cmd->parsed()) {
      if (!bench_table.empty()) {
        const auto rows = sdr_table_from_csv(read_file_bytes(bench_table));
        const auto results = compute_sdr_table(rows);
        atomic_write_file(bench_out, sdr_results_to_csv(results));
        std::cout << "recomputed degradation ratios for " << results.size() << " rows -> "
                  << bench_out << "\n";
      } else {
        if (bench_baseline.empty() || bench_pruned.empty())
          throw UsageError("bench needs --baseline and --pruned (or --table)");
        const Checkpoint baseline = load_checkpoint(bench_baseline);
        const Checkpoint pruned = load_checkpoint(bench_pruned);
        const BenchComparison cmp = run_benchmark(
            baseline, pruned, bench_wl,
            bench_avg_base_set ? std::optional<double>(bench_avg_base) : std::nullopt,
            bench_avg_pruned_set ? std::optional<double>(bench_avg_pruned) : std::nullopt);
        std::string csv =
            "# all columns are wall-clock measurements and vary run to run\n"
            "baseline_tokens_per_sec,pruned_tokens_per_sec,speedup,delta_speedup,delta_avg,"
            "gamma\n";
        csv += format_double(cmp.baseline_tokens_per_sec) + ',' +
               format_double(cmp.pruned_tokens_per_sec) + ',' + format_double(cmp.speedup) + ',' +
               format_double(cmp.delta_speedup) + ',' +
               (cmp.delta_avg ? format_double(*cmp.delta_avg) : std::string("--")) + ',' +
               (cmp.gamma ? format_double(*cmp.gamma) : std::string("--")) + '\n';
        atomic_write_file(bench_out, csv);
        std::cout << "speedup " << format_double(cmp.speedup) << " (baseline "
                  << format_double(cmp.baseline_tokens_per_sec) << " tok/s, pruned "
                  << format_double(cmp.pruned_tokens_per_sec) << " tok/s) -> " << bench_out
                  << "\n";
      }
    } else if (sweep_cmd->parsed()) {
      const Checkpoint ckpt = load_checkpoint(sweep_ckpt);
      const CorpusMode mode = corpus_mode_from_name(sweep_mode);
      const CalibrationSet calib = load_corpus(sweep_calib, mode);
      const BatchPlan calib_batches = make_batches(calib, sweep_batch, sweep_seq);
      const CalibrationSet eval_set =
          sweep_eval.empty() ? calib : load_corpus(sweep_eval, mode);
      const BatchPlan eval_batches = make_batches(eval_set, sweep_batch, sweep_seq);
      const auto rows = sweep_ratios(ckpt, calib_batches, eval_batches,
                                     unit_kind_from_name(sweep_kind),
                                     detail::parse_ratio_list(sweep_ratios_csv), sweep_wl);
      atomic_write_file(sweep_out, sweep_to_csv(rows));
      std::cout << "swept " << rows.size() << " ratios -> " << sweep_out << "\n";
    } else if (grid_cmd->parsed()) {
      const ImportanceReport report = load_report_csv(grid_scores);
      const DropOrderGrid grid = drop_order_grid(report, unit_kind_from_name(grid_kind));
      atomic_write_file(grid_out, grid_to_csv(grid));
      std::cout << "grid with " << grid.dropped.size() << " budget rows -> " << grid_out << "\n";
    } else if (trace_cmd->parsed()) {
      std::vector<std::string> paths;
      for (const std::string& p : split(trace_ckpts, ','))
        if (!p.empty()) paths.push_back(p);
      const CalibrationSet calib = load_corpus(trace_calib, corpus_mode_from_name(trace_mode));
      const BatchPlan batches = make_batches(calib, trace_batch, trace_seq);
      const auto rows = trace_checkpoints(paths, batches, detail::parse_targets(trace_targets));
      atomic_write_file(trace_out, trace_to_csv(rows));
      std::cout << "traced " << paths.size() << " checkpoints (" << rows.size() << " rows) -> "
                << trace_out << "\n";
    } else if (train_cmd->parsed()) {
      const CalibrationSet corpus = load_corpus(train_corpus, corpus_mode_from_name(train_mode));
      train_opt.out_dir = train_dir;
      train_opt.progress = [](std::int64_t step, double loss) {
        if (step % 100 == 0)
          std::cerr << "step " << step << " loss " << format_double(loss) << "\n";
      };
      const auto paths = train_toy(train_flags.to_config(), corpus, train_opt);
      std::cout << "trained " << train_opt.steps << " steps; " << paths.size()
                << " snapshots in " << train_dir << "\n";
    }
    return 0;
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

inline int dispatch(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return dispatch(args);
}

}  // namespace dropforge::cli
