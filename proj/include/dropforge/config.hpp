#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dropforge/errors.hpp"

namespace dropforge {

enum class UnitKind { block, attn, mlp };

inline const char* unit_kind_name(UnitKind k) {
  switch (k) {
    case UnitKind::block: return "block";
    case UnitKind::attn: return "attn";
    case UnitKind::mlp: return "mlp";
  }
  return "?";
}

inline UnitKind unit_kind_from_name(const std::string& s) {
  if (s == "block") return UnitKind::block;
  if (s == "attn") return UnitKind::attn;
  if (s == "mlp") return UnitKind::mlp;
  throw InputError("unknown unit kind: " + s);
}

// Decoder-only pre-norm transformer shape plus the drop masks. A fully
// dropped block is represented as the same layer index present in both
// masks; there is no separate block mask.
struct ModelConfig {
  std::int64_t n_layers = 0;
  std::int64_t d_model = 0;
  std::int64_t n_heads = 0;
  std::int64_t n_kv_heads = 0;
  std::int64_t head_dim = 0;
  std::int64_t d_ff = 0;
  std::int64_t vocab_size = 0;
  std::int64_t max_seq = 0;
  float norm_eps = 1e-5f;
  bool use_rope = false;
  std::set<std::int64_t> dropped_attn;
  std::set<std::int64_t> dropped_mlp;

  bool attn_dropped(std::int64_t l) const { return dropped_attn.count(l) != 0; }
  bool mlp_dropped(std::int64_t l) const { return dropped_mlp.count(l) != 0; }
  bool block_dropped(std::int64_t l) const { return attn_dropped(l) && mlp_dropped(l); }

  std::int64_t retained_attn_layers() const {
    return n_layers - static_cast<std::int64_t>(dropped_attn.size());
  }
  std::int64_t retained_mlp_layers() const {
    return n_layers - static_cast<std::int64_t>(dropped_mlp.size());
  }

  void validate() const {
    if (n_layers < 1) throw InputError("config: n_layers must be >= 1");
    if (d_model < 1 || n_heads < 1 || n_kv_heads < 1 || head_dim < 1 || d_ff < 1)
      throw InputError("config: dimensions must be >= 1");
    if (vocab_size < 1) throw InputError("config: vocab_size must be >= 1");
    if (max_seq < 1) throw InputError("config: max_seq must be >= 1");
    if (n_heads % n_kv_heads != 0)
      throw InputError("config: n_kv_heads must divide n_heads");
    if (n_heads * head_dim != d_model)
      throw InputError("config: n_heads * head_dim must equal d_model");
    if (norm_eps < 0.0f) throw InputError("config: norm_eps must be >= 0");
    if (use_rope && head_dim % 2 != 0)
      throw InputError("config: rotary embedding needs even head_dim");
    for (auto l : dropped_attn)
      if (l < 0 || l >= n_layers) throw InputError("config: dropped_attn index out of range");
    for (auto l : dropped_mlp)
      if (l < 0 || l >= n_layers) throw InputError("config: dropped_mlp index out of range");
  }

  bool operator==(const ModelConfig& o) const {
    return n_layers == o.n_layers && d_model == o.d_model && n_heads == o.n_heads &&
           n_kv_heads == o.n_kv_heads && head_dim == o.head_dim && d_ff == o.d_ff &&
           vocab_size == o.vocab_size && max_seq == o.max_seq && norm_eps == o.norm_eps &&
           use_rope == o.use_rope && dropped_attn == o.dropped_attn && dropped_mlp == o.dropped_mlp;
  }
};

inline nlohmann::json config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["n_layers"] = c.n_layers;
  j["d_model"] = c.d_model;
  j["n_heads"] = c.n_heads;
  j["n_kv_heads"] = c.n_kv_heads;
  j["head_dim"] = c.head_dim;
  j["d_ff"] = c.d_ff;
  j["vocab_size"] = c.vocab_size;
  j["max_seq"] = c.max_seq;
  j["norm_eps"] = c.norm_eps;
  j["use_rope"] = c.use_rope;
  j["dropped_attn"] = std::vector<std::int64_t>(c.dropped_attn.begin(), c.dropped_attn.end());
  j["dropped_mlp"] = std::vector<std::int64_t>(c.dropped_mlp.begin(), c.dropped_mlp.end());
  return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<std::int64_t>();
    c.d_model = j.at("d_model").get<std::int64_t>();
    c.n_heads = j.at("n_heads").get<std::int64_t>();
    c.n_kv_heads = j.at("n_kv_heads").get<std::int64_t>();
    c.head_dim = j.at("head_dim").get<std::int64_t>();
    c.d_ff = j.at("d_ff").get<std::int64_t>();
    c.vocab_size = j.at("vocab_size").get<std::int64_t>();
    c.max_seq = j.at("max_seq").get<std::int64_t>();
    c.norm_eps = j.at("norm_eps").get<float>();
    c.use_rope = j.at("use_rope").get<bool>();
    for (auto& v : j.at("dropped_attn")) c.dropped_attn.insert(v.get<std::int64_t>());
    for (auto& v : j.at("dropped_mlp")) c.dropped_mlp.insert(v.get<std::int64_t>());
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

// Checkpoint tensor names.
namespace tensor_names {

inline std::string embed() { return "embed.weight"; }
inline std::string final_norm() { return "final_norm.weight"; }
inline std::string lm_head() { return "lm_head.weight"; }
inline std::string attn_norm(std::int64_t l) {
  return "layers." + std::to_string(l) + ".attn_norm.weight";
}
inline std::string attn_proj(std::int64_t l, char which) {
  return "layers." + std::to_string(l) + ".attn." + which + "_proj.weight";
}
inline std::string mlp_norm(std::int64_t l) {
  return "layers." + std::to_string(l) + ".mlp_norm.weight";
}
inline std::string mlp_proj(std::int64_t l, const char* which) {
  return "layers." + std::to_string(l) + ".mlp." + std::string(which) + "_proj.weight";
}

}  // namespace tensor_names

struct TensorSpec {
  std::string name;
  std::vector<std::int64_t> shape;  // 1-D for norm weights, 2-D otherwise

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

// Canonical tensor list for a config, in file order. Tensors of dropped
// units are omitted: a dropped unit loses its projections and its norm
// weight together.
inline std::vector<TensorSpec> tensor_manifest(const ModelConfig& c) {
  std::vector<TensorSpec> m;
  m.push_back({tensor_names::embed(), {c.vocab_size, c.d_model}});
  const std::int64_t q_dim = c.n_heads * c.head_dim;
  const std::int64_t kv_dim = c.n_kv_heads * c.head_dim;
  for (std::int64_t l = 0; l < c.n_layers; ++l) {
    if (!c.attn_dropped(l)) {
      m.push_back({tensor_names::attn_norm(l), {c.d_model}});
      m.push_back({tensor_names::attn_proj(l, 'q'), {q_dim, c.d_model}});
      m.push_back({tensor_names::attn_proj(l, 'k'), {kv_dim, c.d_model}});
      m.push_back({tensor_names::attn_proj(l, 'v'), {kv_dim, c.d_model}});
      m.push_back({tensor_names::attn_proj(l, 'o'), {c.d_model, q_dim}});
    }
    if (!c.mlp_dropped(l)) {
      m.push_back({tensor_names::mlp_norm(l), {c.d_model}});
      m.push_back({tensor_names::mlp_proj(l, "gate"), {c.d_ff, c.d_model}});
      m.push_back({tensor_names::mlp_proj(l, "up"), {c.d_ff, c.d_model}});
      m.push_back({tensor_names::mlp_proj(l, "down"), {c.d_model, c.d_ff}});
    }
  }
  m.push_back({tensor_names::final_norm(), {c.d_model}});
  m.push_back({tensor_names::lm_head(), {c.vocab_size, c.d_model}});
  return m;
}

}  // namespace dropforge
