#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dropforge/calibration.hpp"
#include "dropforge/checkpoint.hpp"
#include "dropforge/errors.hpp"
#include "dropforge/io_util.hpp"
#include "dropforge/model.hpp"
#include "dropforge/parallel.hpp"
#include "dropforge/rng.hpp"

namespace dropforge {

enum class Metric { cosine, cosine_no_residual, relative_magnitude, reverse_order, random };

inline const char* metric_name(Metric m) {
  switch (m) {
    case Metric::cosine: return "cosine";
    case Metric::cosine_no_residual: return "cosine_no_residual";
    case Metric::relative_magnitude: return "relative_magnitude";
    case Metric::reverse_order: return "reverse_order";
    case Metric::random: return "random";
  }
  return "?";
}

inline Metric metric_from_name(const std::string& s) {
  for (Metric m : {Metric::cosine, Metric::cosine_no_residual, Metric::relative_magnitude,
                   Metric::reverse_order, Metric::random})
    if (s == metric_name(m)) return m;
  throw InputError("unknown metric: " + s);
}

// Per-unit importance scores for one model and one calibration set.
// Units absent from a map are dropped in the scored checkpoint and carry
// no score.
struct ImportanceReport {
  Metric metric = Metric::cosine;
  std::int64_t n_layers = 0;
  std::map<std::int64_t, double> block_scores;
  std::map<std::int64_t, double> attn_scores;
  std::map<std::int64_t, double> mlp_scores;
  std::int64_t n_tokens = 0;
  std::int64_t undefined_rows = 0;
  std::string calib_digest;
  std::optional<std::uint64_t> seed;

  const std::map<std::int64_t, double>& scores(UnitKind k) const {
    switch (k) {
      case UnitKind::block: return block_scores;
      case UnitKind::attn: return attn_scores;
      case UnitKind::mlp: return mlp_scores;
    }
    throw UsageError("bad unit kind");
  }
  std::map<std::int64_t, double>& scores(UnitKind k) {
    return const_cast<std::map<std::int64_t, double>&>(
        static_cast<const ImportanceReport*>(this)->scores(k));
  }
};

namespace detail {

// Running statistics for one unit. Rows with no defined value are
// excluded from the mean but counted, never imputed.
struct UnitScoreAccum {
  double sum = 0.0;
  std::int64_t valid = 0;
  std::int64_t undefined = 0;

  void merge(const UnitScoreAccum& o) {
    sum += o.sum;
    valid += o.valid;
    undefined += o.undefined;
  }
};

template <typename T>
void accum_cosine(UnitScoreAccum& acc, const MatrixT<T>& x, const MatrixT<T>& y) {
  for (const auto& c : cosine_rows(x, y)) {
    if (c.has_value()) {
      acc.sum += *c;
      ++acc.valid;
    } else {
      ++acc.undefined;
    }
  }
}

// Row value ||f|| / ||x + f||; a row with zero update contributes 0.
template <typename T>
void accum_relative_magnitude(UnitScoreAccum& acc, const MatrixT<T>& f, const MatrixT<T>& y) {
  for (index_t i = 0; i < f.rows; ++i) {
    double nf = 0.0, ny = 0.0;
    for (index_t j = 0; j < f.cols; ++j) {
      const double a = static_cast<double>(f.at(i, j));
      const double b = static_cast<double>(y.at(i, j));
      nf += a * a;
      ny += b * b;
    }
    if (nf == 0.0) {
      ++acc.valid;  // contributes exactly 0
    } else if (ny == 0.0) {
      ++acc.undefined;
    } else {
      acc.sum += std::sqrt(nf) / std::sqrt(ny);
      ++acc.valid;
    }
  }
}

template <typename T>
MatrixT<T> subtract(const MatrixT<T>& a, const MatrixT<T>& b) {
  if (!a.same_shape(b)) throw ShapeError("subtract: shape mismatch");
  MatrixT<T> out(a.rows, a.cols);
  for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] - b.data[i];
  return out;
}

// Tap consumer that folds activations into per-unit statistics as the
// forward pass walks the layers, so only one layer's matrices are live.
template <typename T>
class ScoreTapAccumulator : public TapObserverT<T> {
 public:
  ScoreTapAccumulator(Metric metric, bool residual, const std::set<UnitKind>& targets)
      : metric_(metric), residual_(residual), targets_(targets) {}

  void on_sublayer(UnitKind kind, std::int64_t layer, const MatrixT<T>& x,
                   const MatrixT<T>& normed, const MatrixT<T>& sub,
                   const MatrixT<T>& y) override {
    if (!targets_.count(kind)) return;
    UnitScoreAccum& acc = accum(kind)[layer];
    if (metric_ == Metric::relative_magnitude) {
      accum_relative_magnitude(acc, sub, y);
    } else if (residual_) {
      accum_cosine(acc, x, y);
    } else {
      accum_cosine(acc, normed, sub);
    }
  }

  void on_block(std::int64_t layer, const MatrixT<T>& x, const MatrixT<T>& y) override {
    if (!targets_.count(UnitKind::block)) return;
    UnitScoreAccum& acc = accum(UnitKind::block)[layer];
    if (metric_ == Metric::relative_magnitude) {
      const MatrixT<T> f = subtract(y, x);
      accum_relative_magnitude(acc, f, y);
    } else if (residual_) {
      accum_cosine(acc, x, y);
    } else {
      // A block has no single norm; its bare mapping is the aggregate
      // residual update y - x measured against the stream input.
      const MatrixT<T> f = subtract(y, x);
      accum_cosine(acc, x, f);
    }
  }

  std::map<std::int64_t, UnitScoreAccum>& accum(UnitKind k) {
    return accums_[static_cast<std::size_t>(k)];
  }

 private:
  Metric metric_;
  bool residual_;
  std::set<UnitKind> targets_;
  std::array<std::map<std::int64_t, UnitScoreAccum>, 3> accums_;
};

inline double synthetic_random_score(std::uint64_t seed, UnitKind kind, std::int64_t layer) {
  const std::uint64_t mixed = seed ^ (0x100000001B3ULL * (static_cast<std::uint64_t>(kind) + 1)) ^
                              (0xD6E8FEB86659FD93ULL * (static_cast<std::uint64_t>(layer) + 1));
  Xoshiro256 rng(mixed);
  double v = rng.next_double();
  while (v == 0.0) v = rng.next_double();
  return v;
}

inline bool unit_scoreable(const ModelConfig& cfg, UnitKind kind, std::int64_t l) {
  switch (kind) {
    case UnitKind::block: return !cfg.block_dropped(l);
    case UnitKind::attn: return !cfg.attn_dropped(l);
    case UnitKind::mlp: return !cfg.mlp_dropped(l);
  }
  return false;
}

}  // namespace detail

// Importance of a single unit from its boundary taps: one minus the mean
// per-token cosine between input and output rows.
inline double cosine_importance(const std::vector<ActivationTap>& taps) {
  detail::UnitScoreAccum acc;
  for (const ActivationTap& tap : taps) detail::accum_cosine(acc, tap.input, tap.output);
  if (acc.valid == 0)
    throw ScoringError("cosine importance undefined: no token row has nonzero norms");
  return 1.0 - acc.sum / static_cast<double>(acc.valid);
}

// Scores every retained target unit over the whole batch plan. Batches
// may be processed by several workers; per-batch partial sums are folded
// in batch order, so the report is bitwise identical for any worker
// count.
inline ImportanceReport score_model(const Checkpoint& ckpt, const BatchPlan& batches,
                                    Metric metric, const std::set<UnitKind>& targets,
                                    bool residual = true,
                                    std::optional<std::uint64_t> seed = std::nullopt) {
  if (targets.empty()) throw UsageError("score_model: no target kinds");
  if (metric == Metric::random && !seed.has_value())
    throw UsageError("score_model: random metric needs a seed");
  if (metric == Metric::cosine_no_residual) residual = false;

  const ModelConfig& cfg = ckpt.config;
  ImportanceReport report;
  report.metric = (metric == Metric::cosine && !residual) ? Metric::cosine_no_residual : metric;
  report.n_layers = cfg.n_layers;
  report.calib_digest = batches.source_digest;
  if (metric == Metric::random) report.seed = seed;

  if (metric == Metric::reverse_order || metric == Metric::random) {
    for (UnitKind kind : {UnitKind::block, UnitKind::attn, UnitKind::mlp}) {
      if (!targets.count(kind)) continue;
      for (std::int64_t l = 0; l < cfg.n_layers; ++l) {
        if (!detail::unit_scoreable(cfg, kind, l)) continue;
        report.scores(kind)[l] = metric == Metric::reverse_order
                                     ? static_cast<double>(l + 1)
                                     : detail::synthetic_random_score(*seed, kind, l);
      }
    }
    return report;
  }

  const std::int64_t n_batches = static_cast<std::int64_t>(batches.batches.size());
  std::vector<detail::ScoreTapAccumulator<float>> partials(
      static_cast<std::size_t>(n_batches), detail::ScoreTapAccumulator<float>(metric, residual, targets));
  parallel_for(n_batches, 1, [&](std::int64_t b0, std::int64_t b1) {
    for (std::int64_t b = b0; b < b1; ++b) {
      const TokenBatch& batch = batches.batches[static_cast<std::size_t>(b)];
      auto& obs = partials[static_cast<std::size_t>(b)];
      for (std::int64_t r = 0; r < batch.rows; ++r)
        forward_hidden(batch.row(r), ckpt, static_cast<KVCache*>(nullptr), 0, &obs);
    }
  });

  for (UnitKind kind : {UnitKind::block, UnitKind::attn, UnitKind::mlp}) {
    if (!targets.count(kind)) continue;
    for (std::int64_t l = 0; l < cfg.n_layers; ++l) {
      if (!detail::unit_scoreable(cfg, kind, l)) continue;
      detail::UnitScoreAccum total;
      for (auto& p : partials) {
        auto it = p.accum(kind).find(l);
        if (it != p.accum(kind).end()) total.merge(it->second);
      }
      if (total.valid == 0)
        throw ScoringError(std::string("score undefined for ") + unit_kind_name(kind) + " " +
                           std::to_string(l) + ": every token row was excluded");
      report.undefined_rows += total.undefined;
      report.scores(kind)[l] = metric == Metric::relative_magnitude
                                   ? total.sum / static_cast<double>(total.valid)
                                   : 1.0 - total.sum / static_cast<double>(total.valid);
    }
  }
  report.n_tokens = batches.total_tokens();
  return report;
}

// Ablation metrics share the engine; reverse_order and random never run a
// forward pass.
inline ImportanceReport alt_metric_scores(
    const Checkpoint& ckpt, const BatchPlan& batches, Metric metric,
    std::optional<std::uint64_t> seed = std::nullopt,
    const std::set<UnitKind>& targets = {UnitKind::block, UnitKind::attn, UnitKind::mlp}) {
  if (metric != Metric::relative_magnitude && metric != Metric::reverse_order &&
      metric != Metric::random)
    throw UsageError("alt_metric_scores: use score_model for cosine metrics");
  return score_model(ckpt, batches, metric, targets, true, seed);
}

inline std::string report_to_csv(const ImportanceReport& report) {
  std::string out;
  if (report.seed.has_value()) out += "# seed=" + std::to_string(*report.seed) + "\n";
  out += "kind,layer,score,metric,n_tokens,calib_digest\n";
  for (UnitKind kind : {UnitKind::block, UnitKind::attn, UnitKind::mlp}) {
    for (const auto& [layer, score] : report.scores(kind)) {
      out += unit_kind_name(kind);
      out += ',' + std::to_string(layer) + ',' + format_double(score) + ',' +
             metric_name(report.metric) + ',' + std::to_string(report.n_tokens) + ',' +
             report.calib_digest + '\n';
    }
  }
  return out;
}

inline void write_report_csv(const ImportanceReport& report, const std::string& path) {
  atomic_write_file(path, report_to_csv(report));
}

inline ImportanceReport report_from_csv(const std::string& text) {
  ImportanceReport report;
  bool saw_header = false, saw_row = false;
  for (const std::string& line : split(text, '\n')) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.rfind("# seed=", 0) == 0) report.seed = static_cast<std::uint64_t>(parse_int(line.substr(7)));
      continue;
    }
    if (!saw_header) {
      if (line != "kind,layer,score,metric,n_tokens,calib_digest")
        throw InputError("score csv: unexpected header: " + line);
      saw_header = true;
      continue;
    }
    const auto fields = split(line, ',');
    if (fields.size() != 6) throw InputError("score csv: malformed row: " + line);
    const UnitKind kind = unit_kind_from_name(fields[0]);
    const std::int64_t layer = parse_int(fields[1]);
    const double score = parse_double(fields[2]);
    const Metric metric = metric_from_name(fields[3]);
    if (!saw_row) {
      report.metric = metric;
      report.n_tokens = parse_int(fields[4]);
      report.calib_digest = fields[5];
      saw_row = true;
    } else if (metric != report.metric) {
      throw InputError("score csv: mixed metrics in one file");
    }
    if (!report.scores(kind).emplace(layer, score).second)
      throw InputError("score csv: duplicate unit row: " + line);
    report.n_layers = std::max(report.n_layers, layer + 1);
  }
  if (!saw_row) throw InputError("score csv: no score rows");
  return report;
}

inline ImportanceReport load_report_csv(const std::string& path) {
  return report_from_csv(read_file_bytes(path));
}

inline std::string report_digest(const ImportanceReport& report) {
  return digest_hex(report_to_csv(report));
}

}  // namespace dropforge
