#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dropforge/checkpoint.hpp"
#include "dropforge/errors.hpp"
#include "dropforge/io_util.hpp"
#include "dropforge/scoring.hpp"

namespace dropforge {

enum class Strategy { one_shot, iterative, joint };

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::one_shot: return "one_shot";
    case Strategy::iterative: return "iterative";
    case Strategy::joint: return "joint";
  }
  return "?";
}

inline Strategy strategy_from_name(const std::string& s) {
  for (Strategy v : {Strategy::one_shot, Strategy::iterative, Strategy::joint})
    if (s == strategy_name(v)) return v;
  throw InputError("unknown strategy: " + s);
}

struct DropStep {
  UnitKind kind;
  std::int64_t layer;

  bool operator==(const DropStep& o) const { return kind == o.kind && layer == o.layer; }
};

// An ordered removal schedule. Steps are sorted by ascending importance
// at decision time. Block steps never mix with attn/mlp steps.
struct DropPlan {
  Strategy strategy = Strategy::one_shot;
  Metric metric = Metric::cosine;
  std::vector<DropStep> steps;
  std::vector<std::string> provenance;

  void validate() const {
    for (std::size_t i = 0; i < steps.size(); ++i) {
      for (std::size_t j = i + 1; j < steps.size(); ++j) {
        if (steps[i] == steps[j]) throw PlanError("plan has a duplicate step");
        if (steps[i].layer == steps[j].layer &&
            (steps[i].kind == UnitKind::block || steps[j].kind == UnitKind::block))
          throw PlanError("plan mixes a block step with unit steps at one layer");
      }
    }
  }
};

namespace detail {

// Raw reverse_order scores rank shallow layers lowest; the intended drop
// direction is deepest first, so the planner flips the sign for that
// metric.
inline double effective_score(Metric metric, double raw) {
  return metric == Metric::reverse_order ? -raw : raw;
}

struct RankedUnit {
  double score;
  UnitKind kind;
  std::int64_t layer;
};

// Ascending score; ties prefer attention over mlp, then the deeper layer.
inline bool rank_less(const RankedUnit& a, const RankedUnit& b) {
  if (a.score != b.score) return a.score < b.score;
  if (a.kind != b.kind) return a.kind == UnitKind::attn;
  return a.layer > b.layer;
}

inline std::vector<RankedUnit> ranked_units(const ImportanceReport& report,
                                            const std::vector<UnitKind>& kinds) {
  std::vector<RankedUnit> units;
  for (UnitKind kind : kinds)
    for (const auto& [layer, raw] : report.scores(kind))
      units.push_back({effective_score(report.metric, raw), kind, layer});
  std::stable_sort(units.begin(), units.end(), rank_less);
  return units;
}

}  // namespace detail

// The n lowest-scoring units of one kind, single ranking pass.
inline DropPlan plan_one_shot(const ImportanceReport& report, UnitKind kind, std::int64_t n) {
  const auto units = detail::ranked_units(report, {kind});
  if (n < 0 || n > static_cast<std::int64_t>(units.size()))
    throw PlanError("one-shot plan: budget " + std::to_string(n) + " exceeds " +
                    std::to_string(units.size()) + " scored units");
  DropPlan plan;
  plan.strategy = Strategy::one_shot;
  plan.metric = report.metric;
  plan.provenance = {report_digest(report)};
  for (std::int64_t i = 0; i < n; ++i) plan.steps.push_back({units[i].kind, units[i].layer});
  return plan;
}

// The n globally lowest units of the concatenated attention + mlp scores.
inline DropPlan plan_joint(const ImportanceReport& report, std::int64_t n) {
  if (report.attn_scores.empty() || report.mlp_scores.empty())
    throw PlanError("joint plan needs both attention and mlp scores");
  const auto units = detail::ranked_units(report, {UnitKind::attn, UnitKind::mlp});
  if (n < 0 || n > static_cast<std::int64_t>(units.size()))
    throw PlanError("joint plan: budget exceeds scored units");
  DropPlan plan;
  plan.strategy = Strategy::joint;
  plan.metric = report.metric;
  plan.provenance = {report_digest(report)};
  for (std::int64_t i = 0; i < n; ++i) plan.steps.push_back({units[i].kind, units[i].layer});
  return plan;
}

// New checkpoint with the plan's units removed: drop masks extended and
// the units' tensors (projections and norm weight together) omitted.
// The source checkpoint is untouched.
inline Checkpoint apply_drop(const Checkpoint& ckpt, const DropPlan& plan) {
  plan.validate();
  ModelConfig cfg = ckpt.config;
  for (const DropStep& step : plan.steps) {
    if (step.layer < 0 || step.layer >= cfg.n_layers)
      throw PlanError("drop step layer out of range");
    const bool attn_part = step.kind != UnitKind::mlp;
    const bool mlp_part = step.kind != UnitKind::attn;
    if (attn_part && !cfg.dropped_attn.insert(step.layer).second)
      throw PlanError("attention unit " + std::to_string(step.layer) + " already dropped");
    if (mlp_part && !cfg.dropped_mlp.insert(step.layer).second)
      throw PlanError("mlp unit " + std::to_string(step.layer) + " already dropped");
  }
  cfg.validate();

  Checkpoint pruned;
  pruned.config = cfg;
  for (const TensorSpec& spec : tensor_manifest(cfg))
    pruned.tensors.emplace(spec.name, ckpt.tensor(spec.name));
  return pruned;
}

// Re-scores the (progressively pruned) model before every removal, so
// exactly n scoring passes run for a budget of n. The same batches are
// used for every pass.
inline DropPlan plan_iterative(const Checkpoint& ckpt, const BatchPlan& batches, UnitKind kind,
                               std::int64_t n, Metric metric,
                               std::optional<std::uint64_t> seed = std::nullopt,
                               std::int64_t* scoring_passes = nullptr) {
  DropPlan plan;
  plan.strategy = Strategy::iterative;
  plan.metric = metric;
  if (scoring_passes) *scoring_passes = 0;

  Checkpoint current = ckpt;
  for (std::int64_t i = 0; i < n; ++i) {
    const ImportanceReport report = score_model(current, batches, metric, {kind}, true, seed);
    if (scoring_passes) ++(*scoring_passes);
    const auto units = detail::ranked_units(report, {kind});
    if (units.empty()) throw PlanError("iterative plan: no units left to drop");
    plan.provenance.push_back(report_digest(report));

    DropPlan single;
    single.strategy = Strategy::iterative;
    single.metric = metric;
    single.steps = {{units[0].kind, units[0].layer}};
    plan.steps.push_back(single.steps[0]);
    current = apply_drop(current, single);
  }
  return plan;
}

inline nlohmann::json plan_to_json(const DropPlan& plan) {
  nlohmann::json j;
  j["strategy"] = strategy_name(plan.strategy);
  j["metric"] = metric_name(plan.metric);
  j["steps"] = nlohmann::json::array();
  for (const DropStep& s : plan.steps)
    j["steps"].push_back(nlohmann::json::array({unit_kind_name(s.kind), s.layer}));
  j["provenance"] = plan.provenance;
  return j;
}

inline DropPlan plan_from_json(const nlohmann::json& j) {
  DropPlan plan;
  try {
    plan.strategy = strategy_from_name(j.at("strategy").get<std::string>());
    plan.metric = metric_from_name(j.at("metric").get<std::string>());
    for (const auto& s : j.at("steps"))
      plan.steps.push_back({unit_kind_from_name(s.at(0).get<std::string>()),
                            s.at(1).get<std::int64_t>()});
    for (const auto& p : j.at("provenance")) plan.provenance.push_back(p.get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("plan json: ") + e.what());
  }
  plan.validate();
  return plan;
}

inline void write_plan_json(const DropPlan& plan, const std::string& path) {
  atomic_write_file(path, plan_to_json(plan).dump(2) + "\n");
}

inline DropPlan load_plan_json(const std::string& path) {
  try {
    return plan_from_json(nlohmann::json::parse(read_file_bytes(path)));
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("plan json: ") + e.what());
  }
}

}  // namespace dropforge
