#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dropforge/calibration.hpp"
#include "dropforge/checkpoint.hpp"
#include "dropforge/errors.hpp"
#include "dropforge/io_util.hpp"
#include "dropforge/model.hpp"
#include "dropforge/parallel.hpp"
#include "dropforge/planner.hpp"
#include "dropforge/rng.hpp"
#include "dropforge/scoring.hpp"

namespace dropforge {

struct EvalResult {
  double perplexity = 0.0;
  std::int64_t n_tokens = 0;
  std::string corpus_digest;
};

// exp(mean next-token cross entropy), natural log. The last position of
// each chunk has no target and is excluded. Batch partials fold in batch
// order for bitwise reproducibility under any worker count.
inline EvalResult perplexity(const Checkpoint& ckpt, const BatchPlan& batches) {
  if (batches.batches.empty()) throw InputError("perplexity: no batches");
  const std::int64_t n_batches = static_cast<std::int64_t>(batches.batches.size());
  std::vector<double> batch_nll(static_cast<std::size_t>(n_batches), 0.0);
  std::vector<std::int64_t> batch_tokens(static_cast<std::size_t>(n_batches), 0);

  parallel_for(n_batches, 1, [&](std::int64_t b0, std::int64_t b1) {
    for (std::int64_t b = b0; b < b1; ++b) {
      const TokenBatch& batch = batches.batches[static_cast<std::size_t>(b)];
      double nll = 0.0;
      std::int64_t count = 0;
      for (std::int64_t r = 0; r < batch.rows; ++r) {
        const auto row = batch.row(r);
        const Matrix logits = forward_logits(row, ckpt);
        for (std::int64_t t = 0; t + 1 < batch.cols; ++t) {
          const auto lr = logits.row(t);
          double mx = lr[0];
          for (std::size_t j = 1; j < lr.size(); ++j) mx = std::max(mx, double(lr[j]));
          double sum = 0.0;
          for (std::size_t j = 0; j < lr.size(); ++j) sum += std::exp(double(lr[j]) - mx);
          const TokenId target = row[static_cast<std::size_t>(t) + 1];
          nll += std::log(sum) + mx - double(lr[static_cast<std::size_t>(target)]);
          ++count;
        }
      }
      batch_nll[static_cast<std::size_t>(b)] = nll;
      batch_tokens[static_cast<std::size_t>(b)] = count;
    }
  });

  double nll = 0.0;
  std::int64_t count = 0;
  for (std::int64_t b = 0; b < n_batches; ++b) {
    nll += batch_nll[static_cast<std::size_t>(b)];
    count += batch_tokens[static_cast<std::size_t>(b)];
  }
  EvalResult res;
  res.perplexity = std::exp(nll / static_cast<double>(count));
  res.n_tokens = count;
  res.corpus_digest = batches.source_digest;
  return res;
}

// Bytes held by key and value tensors across all retained attention
// layers for one full sequence window.
inline std::uint64_t kv_cache_bytes(const ModelConfig& config, std::int64_t batch,
                                    std::int64_t seq_len, std::int64_t bytes_per_elem) {
  if (batch < 1 || seq_len < 1 || bytes_per_elem < 1)
    throw InputError("kv_cache_bytes: arguments must be positive");
  return 2ULL * static_cast<std::uint64_t>(config.retained_attn_layers()) *
         static_cast<std::uint64_t>(config.n_kv_heads) *
         static_cast<std::uint64_t>(config.head_dim) * static_cast<std::uint64_t>(seq_len) *
         static_cast<std::uint64_t>(batch) * static_cast<std::uint64_t>(bytes_per_elem);
}

// Performance points lost per 1% of speedup gained. Undefined at
// speedup == 1 (reported as absent, printed "--").
inline std::optional<double> sdr(double avg_base, double avg_pruned, double speedup) {
  if (speedup == 1.0) return std::nullopt;
  return (avg_base - avg_pruned) / ((speedup - 1.0) * 100.0);
}

inline double median(std::vector<double> values) {
  if (values.empty()) throw InputError("median of nothing");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  if (n % 2 == 1) return values[n / 2];
  return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

struct BenchComparison {
  double baseline_tokens_per_sec = 0.0;
  double pruned_tokens_per_sec = 0.0;
  double speedup = 0.0;
  double delta_speedup = 0.0;  // percentage points
  std::optional<double> delta_avg;
  std::optional<double> gamma;
  double baseline_seconds = 0.0;
  double pruned_seconds = 0.0;
};

struct BenchWorkload {
  std::int64_t batch = 8;
  std::int64_t prefill = 256;
  std::int64_t gen = 256;
  std::int64_t reps = 3;
};

namespace detail {

// One timed pass: every stream runs prefill + greedy decode through its
// own cache, strictly one after another.
inline double timed_generation_run(const Checkpoint& ckpt,
                                   const std::vector<TokenSeq>& prompts, std::int64_t gen,
                                   std::uint64_t& sink) {
  const auto start = std::chrono::steady_clock::now();
  for (const TokenSeq& prompt : prompts) {
    const TokenSeq out = generate(prompt, gen, ckpt);
    sink += static_cast<std::uint64_t>(out.back());
  }
  const auto end = std::chrono::steady_clock::now();
  return std::chrono::duration<double>(end - start).count();
}

}  // namespace detail

// Wall-clock comparison on the same workload: median over reps after one
// discarded warm-up run, single execution stream, no concurrent work.
// Quality fields stay absent unless external accuracy averages are given.
inline BenchComparison run_benchmark(const Checkpoint& baseline, const Checkpoint& pruned,
                                     const BenchWorkload& wl,
                                     std::optional<double> avg_base = std::nullopt,
                                     std::optional<double> avg_pruned = std::nullopt) {
  if (baseline.config.vocab_size != pruned.config.vocab_size)
    throw InputError("benchmark: checkpoints have different vocabularies");
  if (wl.reps < 3) throw InputError("benchmark: need at least 3 repetitions");
  if (wl.batch < 1 || wl.prefill < 1 || wl.gen < 1) throw InputError("benchmark: bad workload");

  Xoshiro256 rng(0xBE7C4ULL);
  std::vector<TokenSeq> prompts;
  for (std::int64_t b = 0; b < wl.batch; ++b) {
    TokenSeq p;
    for (std::int64_t i = 0; i < wl.prefill; ++i)
      p.push_back(static_cast<TokenId>(
          rng.next_below(static_cast<std::uint64_t>(baseline.config.vocab_size))));
    prompts.push_back(std::move(p));
  }

  const int saved_threads = num_threads();
  set_num_threads(1);
  std::uint64_t sink = 0;
  std::vector<double> base_times, pruned_times;
  detail::timed_generation_run(baseline, prompts, wl.gen, sink);  // warm-up
  for (std::int64_t r = 0; r < wl.reps; ++r)
    base_times.push_back(detail::timed_generation_run(baseline, prompts, wl.gen, sink));
  detail::timed_generation_run(pruned, prompts, wl.gen, sink);  // warm-up
  for (std::int64_t r = 0; r < wl.reps; ++r)
    pruned_times.push_back(detail::timed_generation_run(pruned, prompts, wl.gen, sink));
  set_num_threads(saved_threads);
  static volatile std::uint64_t bench_sink = 0;
  bench_sink = bench_sink + sink;  // keep the generation work observable

  const double tokens = static_cast<double>(wl.batch * (wl.prefill + wl.gen));
  BenchComparison cmp;
  cmp.baseline_seconds = median(base_times);
  cmp.pruned_seconds = median(pruned_times);
  cmp.baseline_tokens_per_sec = tokens / cmp.baseline_seconds;
  cmp.pruned_tokens_per_sec = tokens / cmp.pruned_seconds;
  cmp.speedup = cmp.baseline_seconds / cmp.pruned_seconds;
  cmp.delta_speedup = (cmp.speedup - 1.0) * 100.0;
  if (avg_base.has_value() && avg_pruned.has_value()) {
    cmp.delta_avg = *avg_base - *avg_pruned;
    cmp.gamma = sdr(*avg_base, *avg_pruned, cmp.speedup);
  }
  return cmp;
}

// ---------------------------------------------------------------------
// External-accuracy table mode: recompute speedup/degradation arithmetic
// from published averages. Input rows are (label, avg, speedup); the
// first row is the baseline.

struct SdrTableRow {
  std::string label;
  double avg = 0.0;
  double speedup = 1.0;
};

struct SdrResultRow {
  std::string label;
  double delta_avg = 0.0;
  double delta_speedup = 0.0;
  std::optional<double> gamma;
};

inline std::vector<SdrResultRow> compute_sdr_table(const std::vector<SdrTableRow>& rows) {
  if (rows.empty()) throw InputError("sdr table: no rows");
  const double avg_base = rows[0].avg;
  std::vector<SdrResultRow> out;
  for (const SdrTableRow& row : rows) {
    SdrResultRow r;
    r.label = row.label;
    r.delta_avg = avg_base - row.avg;
    r.delta_speedup = (row.speedup - 1.0) * 100.0;
    r.gamma = sdr(avg_base, row.avg, row.speedup);
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<SdrTableRow> sdr_table_from_csv(const std::string& text) {
  std::vector<SdrTableRow> rows;
  bool saw_header = false;
  for (const std::string& line : split(text, '\n')) {
    if (line.empty() || line[0] == '#') continue;
    if (!saw_header) {
      if (line != "label,avg,speedup") throw InputError("sdr table: header must be label,avg,speedup");
      saw_header = true;
      continue;
    }
    const auto f = split(line, ',');
    if (f.size() != 3) throw InputError("sdr table: malformed row: " + line);
    rows.push_back({f[0], parse_double(f[1]), parse_double(f[2])});
  }
  if (rows.empty()) throw InputError("sdr table: no data rows");
  return rows;
}

inline std::string sdr_results_to_csv(const std::vector<SdrResultRow>& rows) {
  std::string out = "label,delta_avg,delta_speedup,gamma\n";
  for (const SdrResultRow& r : rows) {
    out += r.label + ',' + format_double(r.delta_avg) + ',' + format_double(r.delta_speedup) +
           ',' + (r.gamma.has_value() ? format_double(*r.gamma) : std::string("--")) + '\n';
  }
  return out;
}

// ---------------------------------------------------------------------
// Ratio sweep: one scoring pass, nested one-shot plans, quality and
// efficiency per ratio.

struct SweepRow {
  UnitKind kind;
  double ratio = 0.0;
  std::int64_t n_dropped = 0;
  double perplexity = 0.0;
  std::uint64_t kv_bytes = 0;
  double tokens_per_sec = 0.0;
  double speedup = 0.0;
  std::optional<double> gamma_mode_b;
};

inline std::vector<SweepRow> sweep_ratios(const Checkpoint& ckpt, const BatchPlan& calib,
                                          const BatchPlan& eval_batches, UnitKind kind,
                                          const std::vector<double>& ratios,
                                          const BenchWorkload& wl) {
  for (double r : ratios)
    if (r < 0.0 || r > 100.0) throw InputError("sweep: ratios must lie in [0, 100]");
  const ImportanceReport report = score_model(ckpt, calib, Metric::cosine, {kind}, true);
  const double base_ppl = perplexity(ckpt, eval_batches).perplexity;

  std::vector<SweepRow> out;
  for (double r : ratios) {
    const std::int64_t n =
        static_cast<std::int64_t>(std::llround(r * static_cast<double>(ckpt.config.n_layers) / 100.0));
    const DropPlan plan = plan_one_shot(report, kind, n);
    const Checkpoint pruned = apply_drop(ckpt, plan);
    const BenchComparison bench = run_benchmark(ckpt, pruned, wl);

    SweepRow row;
    row.kind = kind;
    row.ratio = r;
    row.n_dropped = n;
    row.perplexity = n == 0 ? base_ppl : perplexity(pruned, eval_batches).perplexity;
    row.kv_bytes = kv_cache_bytes(pruned.config, wl.batch, wl.prefill + wl.gen, 4);
    row.tokens_per_sec = bench.pruned_tokens_per_sec;
    row.speedup = bench.speedup;
    // Quality expressed as perplexity retention (baseline == 100).
    row.gamma_mode_b = sdr(100.0, 100.0 * base_ppl / row.perplexity, bench.speedup);
    out.push_back(std::move(row));
  }
  return out;
}

inline std::string sweep_to_csv(const std::vector<SweepRow>& rows) {
  std::string out =
      "# tokens_per_sec and speedup are wall-clock measurements and vary run to run\n"
      "kind,ratio,n_dropped,perplexity,kv_bytes,tokens_per_sec,speedup,gamma_mode_b\n";
  for (const SweepRow& r : rows) {
    out += std::string(unit_kind_name(r.kind)) + ',' + format_double(r.ratio) + ',' +
           std::to_string(r.n_dropped) + ',' + format_double(r.perplexity) + ',' +
           std::to_string(r.kv_bytes) + ',' + format_double(r.tokens_per_sec) + ',' +
           format_double(r.speedup) + ',' +
           (r.gamma_mode_b.has_value() ? format_double(*r.gamma_mode_b) : std::string("--")) +
           '\n';
  }
  return out;
}

// ---------------------------------------------------------------------
// Drop-order grid: row n marks the one-shot drop set at budget n, so the
// rows of the (L+1) x L grid are nested by construction.

struct DropOrderGrid {
  std::int64_t n_units = 0;
  std::vector<std::vector<bool>> dropped;  // (n_units + 1) rows
};

inline DropOrderGrid drop_order_grid(const ImportanceReport& report, UnitKind kind) {
  const auto& scores = report.scores(kind);
  if (scores.empty()) throw InputError("grid: report has no scores for this kind");
  const auto units = detail::ranked_units(report, {kind});
  const std::int64_t L = report.n_layers;

  DropOrderGrid grid;
  grid.n_units = L;
  grid.dropped.assign(static_cast<std::size_t>(units.size()) + 1,
                      std::vector<bool>(static_cast<std::size_t>(L), false));
  for (std::size_t n = 1; n < grid.dropped.size(); ++n) {
    grid.dropped[n] = grid.dropped[n - 1];
    grid.dropped[n][static_cast<std::size_t>(units[n - 1].layer)] = true;
  }
  return grid;
}

inline std::string grid_to_csv(const DropOrderGrid& grid) {
  std::string out = "budget";
  for (std::int64_t l = 0; l < grid.n_units; ++l) out += ",l" + std::to_string(l);
  out += '\n';
  for (std::size_t n = 0; n < grid.dropped.size(); ++n) {
    out += std::to_string(n);
    for (std::int64_t l = 0; l < grid.n_units; ++l)
      out += grid.dropped[n][static_cast<std::size_t>(l)] ? ",dropped" : ",retained";
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------
// Checkpoint tracing: score a series of snapshots that share one config.

struct TraceRow {
  std::int64_t step;
  UnitKind kind;
  std::int64_t layer;
  double score;
};

inline std::vector<TraceRow> trace_checkpoints(const std::vector<std::string>& paths,
                                               const BatchPlan& batches,
                                               const std::set<UnitKind>& targets) {
  if (paths.empty()) throw InputError("trace: no checkpoints");
  std::vector<TraceRow> rows;
  std::optional<ModelConfig> first_config;
  for (std::size_t i = 0; i < paths.size(); ++i) {
    const Checkpoint ckpt = load_checkpoint(paths[i]);
    if (!first_config.has_value()) {
      first_config = ckpt.config;
    } else if (!(ckpt.config == *first_config)) {
      throw InputError("trace: checkpoint configs differ at " + paths[i]);
    }
    const ImportanceReport report = score_model(ckpt, batches, Metric::cosine, targets, true);
    for (UnitKind kind : {UnitKind::block, UnitKind::attn, UnitKind::mlp}) {
      if (!targets.count(kind)) continue;
      for (const auto& [layer, score] : report.scores(kind))
        rows.push_back({static_cast<std::int64_t>(i), kind, layer, score});
    }
  }
  return rows;
}

inline std::string trace_to_csv(const std::vector<TraceRow>& rows) {
  std::string out = "step,kind,layer,score\n";
  for (const TraceRow& r : rows)
    out += std::to_string(r.step) + ',' + unit_kind_name(r.kind) + ',' + std::to_string(r.layer) +
           ',' + format_double(r.score) + '\n';
  return out;
}

}  // namespace dropforge
