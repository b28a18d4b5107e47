#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <type_traits>
#include <span>
#include <string>
#include <vector>

#include "dropforge/checkpoint.hpp"
#include "dropforge/config.hpp"
#include "dropforge/errors.hpp"
#include "dropforge/tensor.hpp"

namespace dropforge {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

// Boundary snapshot of one unit on one sequence: the residual-stream
// input and the post-residual output.
template <typename T>
struct ActivationTapT {
  UnitKind kind;
  std::int64_t layer;
  MatrixT<T> input;
  MatrixT<T> output;
};

using ActivationTap = ActivationTapT<float>;

// Observer for per-unit activations. Sublayer callbacks expose all four
// boundary matrices so consumers can look either at the residual-stream
// boundary (x, y) or at the bare sublayer mapping (normed, sub).
template <typename T>
struct TapObserverT {
  virtual ~TapObserverT() = default;
  virtual void on_sublayer(UnitKind /*kind*/, std::int64_t /*layer*/, const MatrixT<T>& /*x*/,
                           const MatrixT<T>& /*normed*/, const MatrixT<T>& /*sub*/,
                           const MatrixT<T>& /*y*/) {}
  virtual void on_block(std::int64_t /*layer*/, const MatrixT<T>& /*x*/, const MatrixT<T>& /*y*/) {}
};

using TapObserver = TapObserverT<float>;

// Key/value store for incremental decoding. One generation stream per
// cache. Layers in dropped_attn have no entry at all. Rows are tokens;
// within a row the layout is kv-head-major, head_dim contiguous. Each
// layer tracks its own fill position so the layers of one forward step
// stay in sync.
template <typename T>
struct KVCacheT {
  struct LayerKV {
    MatrixT<T> keys;
    MatrixT<T> values;
    std::int64_t filled = 0;
  };

  std::int64_t max_seq = 0;
  std::int64_t kv_dim = 0;
  std::map<std::int64_t, LayerKV> layers;

  explicit KVCacheT(const ModelConfig& config)
      : max_seq(config.max_seq), kv_dim(config.n_kv_heads * config.head_dim) {
    for (std::int64_t l = 0; l < config.n_layers; ++l) {
      if (config.attn_dropped(l)) continue;
      layers.emplace(l, LayerKV{MatrixT<T>(max_seq, kv_dim), MatrixT<T>(max_seq, kv_dim), 0});
    }
  }
};

using KVCache = KVCacheT<float>;

namespace detail {

template <typename T>
T causal_mask_value() {
  return static_cast<T>(-0.25) * std::numeric_limits<T>::max();
}

// In-place rotary embedding over per-head column slices. Pairs element t
// with element t + head_dim/2 of the same head. `backward` applies the
// transposed (inverse) rotation.
template <typename T>
void apply_rope(MatrixT<T>& m, std::int64_t n_heads, std::int64_t head_dim,
                std::int64_t start_pos, bool backward = false) {
  const std::int64_t half = head_dim / 2;
  std::vector<double> inv_freq(static_cast<std::size_t>(half));
  for (std::int64_t t = 0; t < half; ++t)
    inv_freq[static_cast<std::size_t>(t)] =
        std::pow(10000.0, -2.0 * static_cast<double>(t) / static_cast<double>(head_dim));
  for (std::int64_t i = 0; i < m.rows; ++i) {
    const double pos = static_cast<double>(start_pos + i);
    for (std::int64_t h = 0; h < n_heads; ++h) {
      T* base = m.data.data() + i * m.cols + h * head_dim;
      for (std::int64_t t = 0; t < half; ++t) {
        const double angle = pos * inv_freq[static_cast<std::size_t>(t)];
        const double c = std::cos(angle);
        const double s = backward ? -std::sin(angle) : std::sin(angle);
        const double a = static_cast<double>(base[t]);
        const double b = static_cast<double>(base[t + half]);
        base[t] = static_cast<T>(a * c - b * s);
        base[t + half] = static_cast<T>(a * s + b * c);
      }
    }
  }
}

template <typename T>
MatrixT<T> head_slice(const MatrixT<T>& m, std::int64_t n_rows, std::int64_t head,
                      std::int64_t head_dim) {
  MatrixT<T> out(n_rows, head_dim);
  for (std::int64_t i = 0; i < n_rows; ++i)
    for (std::int64_t t = 0; t < head_dim; ++t) out.at(i, t) = m.at(i, head * head_dim + t);
  return out;
}

}  // namespace detail

// One MLP unit: y = x + down(silu(gate(n)) * up(n)), n = rms_norm(x).
template <typename T>
MatrixT<T> forward_mlp_unit(const MatrixT<T>& x, std::int64_t layer, const CheckpointT<T>& ckpt,
                            TapObserverT<T>* obs = nullptr) {
  const ModelConfig& cfg = ckpt.config;
  if (layer < 0 || layer >= cfg.n_layers) throw UsageError("mlp unit: layer out of range");
  if (cfg.mlp_dropped(layer)) throw UsageError("mlp unit: layer is dropped");
  if (x.cols != cfg.d_model) throw ShapeError("mlp unit: input width != d_model");

  const MatrixT<T> n = rms_norm(x, ckpt.tensor(tensor_names::mlp_norm(layer)),
                                static_cast<T>(cfg.norm_eps));
  const MatrixT<T> gate = linear(n, ckpt.tensor(tensor_names::mlp_proj(layer, "gate")));
  const MatrixT<T> up = linear(n, ckpt.tensor(tensor_names::mlp_proj(layer, "up")));
  const MatrixT<T> h = gated_silu(gate, up);
  const MatrixT<T> sub = linear(h, ckpt.tensor(tensor_names::mlp_proj(layer, "down")));
  MatrixT<T> y = add(x, sub);
  if (obs) obs->on_sublayer(UnitKind::mlp, layer, x, n, sub, y);
  return y;
}

// One attention unit: y = x + o_proj(causal GQA attention over rms_norm(x)).
// With a cache, x holds only the new tokens at absolute positions
// start_pos onward and the cache must already hold exactly start_pos rows.
template <typename T>
MatrixT<T> forward_attention_unit(const MatrixT<T>& x, std::int64_t layer,
                                  const CheckpointT<T>& ckpt,
                                  std::type_identity_t<KVCacheT<T>*> cache,
                                  std::int64_t start_pos,
                                  std::type_identity_t<TapObserverT<T>*> obs = nullptr) {
  const ModelConfig& cfg = ckpt.config;
  if (layer < 0 || layer >= cfg.n_layers) throw UsageError("attention unit: layer out of range");
  if (cfg.attn_dropped(layer)) throw UsageError("attention unit: layer is dropped");
  if (x.cols != cfg.d_model) throw ShapeError("attention unit: input width != d_model");
  if (cache == nullptr && start_pos != 0)
    throw UsageError("attention unit: nonzero start_pos requires a cache");

  const std::int64_t n_new = x.rows;
  const std::int64_t total_len = start_pos + n_new;
  const std::int64_t hd = cfg.head_dim;
  const std::int64_t group = cfg.n_heads / cfg.n_kv_heads;

  const MatrixT<T> n = rms_norm(x, ckpt.tensor(tensor_names::attn_norm(layer)),
                                static_cast<T>(cfg.norm_eps));
  MatrixT<T> q = linear(n, ckpt.tensor(tensor_names::attn_proj(layer, 'q')));
  MatrixT<T> k = linear(n, ckpt.tensor(tensor_names::attn_proj(layer, 'k')));
  const MatrixT<T> v = linear(n, ckpt.tensor(tensor_names::attn_proj(layer, 'v')));
  if (cfg.use_rope) {
    detail::apply_rope(q, cfg.n_heads, hd, start_pos);
    detail::apply_rope(k, cfg.n_kv_heads, hd, start_pos);
  }

  const MatrixT<T>* keys = &k;
  const MatrixT<T>* values = &v;
  if (cache != nullptr) {
    if (total_len > cache->max_seq)
      throw CapacityError("attention unit: sequence exceeds max_seq");
    auto it = cache->layers.find(layer);
    if (it == cache->layers.end()) throw UsageError("attention unit: cache has no such layer");
    if (it->second.filled != start_pos)
      throw UsageError("attention unit: cache length != start_pos");
    for (std::int64_t i = 0; i < n_new; ++i)
      for (std::int64_t c = 0; c < cache->kv_dim; ++c) {
        it->second.keys.at(start_pos + i, c) = k.at(i, c);
        it->second.values.at(start_pos + i, c) = v.at(i, c);
      }
    it->second.filled = total_len;
    keys = &it->second.keys;
    values = &it->second.values;
  }

  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  const T mask = detail::causal_mask_value<T>();
  MatrixT<T> ctx(n_new, cfg.n_heads * hd);
  for (std::int64_t h = 0; h < cfg.n_heads; ++h) {
    const std::int64_t kvh = h / group;
    const MatrixT<T> q_head = detail::head_slice(q, n_new, h, hd);
    // k_head transposed on the fly: (head_dim x total_len)
    MatrixT<T> k_head_t(hd, total_len);
    for (std::int64_t j = 0; j < total_len; ++j)
      for (std::int64_t t = 0; t < hd; ++t) k_head_t.at(t, j) = keys->at(j, kvh * hd + t);
    MatrixT<T> scores = matmul(q_head, k_head_t);
    for (std::int64_t i = 0; i < n_new; ++i) {
      const std::int64_t visible = start_pos + i;
      for (std::int64_t j = 0; j < total_len; ++j)
        scores.at(i, j) = j <= visible ? scores.at(i, j) * scale : mask;
    }
    const MatrixT<T> probs = softmax_rows(scores);
    MatrixT<T> v_head(total_len, hd);
    for (std::int64_t j = 0; j < total_len; ++j)
      for (std::int64_t t = 0; t < hd; ++t) v_head.at(j, t) = values->at(j, kvh * hd + t);
    const MatrixT<T> ctx_head = matmul(probs, v_head);
    for (std::int64_t i = 0; i < n_new; ++i)
      for (std::int64_t t = 0; t < hd; ++t) ctx.at(i, h * hd + t) = ctx_head.at(i, t);
  }

  const MatrixT<T> sub = linear(ctx, ckpt.tensor(tensor_names::attn_proj(layer, 'o')));
  MatrixT<T> y = add(x, sub);
  if (obs) obs->on_sublayer(UnitKind::attn, layer, x, n, sub, y);
  return y;
}

template <typename T>
MatrixT<T> embed_tokens(std::span<const TokenId> tokens, const CheckpointT<T>& ckpt) {
  const ModelConfig& cfg = ckpt.config;
  const MatrixT<T>& table = ckpt.tensor(tensor_names::embed());
  MatrixT<T> x(static_cast<std::int64_t>(tokens.size()), cfg.d_model);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const TokenId id = tokens[i];
    if (id < 0 || static_cast<std::int64_t>(id) >= cfg.vocab_size)
      throw InputError("token id " + std::to_string(id) + " outside vocabulary");
    for (std::int64_t c = 0; c < cfg.d_model; ++c)
      x.at(static_cast<std::int64_t>(i), c) = table.at(id, c);
  }
  return x;
}

// Residual stream through all retained units. Units whose layer index is
// in a drop mask are skipped entirely; the stream passes through.
template <typename T>
MatrixT<T> forward_hidden(std::span<const TokenId> tokens, const CheckpointT<T>& ckpt,
                          std::type_identity_t<KVCacheT<T>*> cache, std::int64_t start_pos,
                          std::type_identity_t<TapObserverT<T>*> obs = nullptr) {
  const ModelConfig& cfg = ckpt.config;
  MatrixT<T> x = embed_tokens(tokens, ckpt);
  for (std::int64_t l = 0; l < cfg.n_layers; ++l) {
    MatrixT<T> block_in;
    const bool tap_block = obs != nullptr && !cfg.block_dropped(l);
    if (tap_block) block_in = x;
    if (!cfg.attn_dropped(l)) x = forward_attention_unit(x, l, ckpt, cache, start_pos, obs);
    if (!cfg.mlp_dropped(l)) x = forward_mlp_unit(x, l, ckpt, obs);
    if (tap_block) obs->on_block(l, block_in, x);
  }
  return x;
}

template <typename T>
MatrixT<T> final_logits(const MatrixT<T>& hidden, const CheckpointT<T>& ckpt) {
  const MatrixT<T> n = rms_norm(hidden, ckpt.tensor(tensor_names::final_norm()),
                                static_cast<T>(ckpt.config.norm_eps));
  return linear(n, ckpt.tensor(tensor_names::lm_head()));
}

// Logits for one sequence (or its continuation when a cache is passed).
template <typename T>
MatrixT<T> forward_logits(std::span<const TokenId> tokens, const CheckpointT<T>& ckpt,
                          std::type_identity_t<KVCacheT<T>*> cache = nullptr,
                          std::int64_t start_pos = 0,
                          std::type_identity_t<TapObserverT<T>*> obs = nullptr) {
  return final_logits(forward_hidden(tokens, ckpt, cache, start_pos, obs), ckpt);
}

// Batched from-scratch forward; one logits matrix (seq x vocab) per
// sequence. Sequences are independent, so any parallel evaluation must
// equal this sequential one.
template <typename T>
std::vector<MatrixT<T>> forward_model(const std::vector<TokenSeq>& batch,
                                      const CheckpointT<T>& ckpt,
                                      TapObserverT<T>* obs = nullptr) {
  std::vector<MatrixT<T>> out;
  out.reserve(batch.size());
  for (const TokenSeq& seq : batch)
    out.push_back(forward_logits(std::span<const TokenId>(seq), ckpt, nullptr, 0, obs));
  return out;
}

// Index of the row maximum; ties resolve to the lowest index.
template <typename T>
TokenId argmax_lowest(const MatrixT<T>& m, std::int64_t r) {
  TokenId best = 0;
  T best_v = m.at(r, 0);
  for (std::int64_t j = 1; j < m.cols; ++j) {
    if (m.at(r, j) > best_v) {
      best_v = m.at(r, j);
      best = static_cast<TokenId>(j);
    }
  }
  return best;
}

// Greedy decoding with a KV cache; argmax ties resolve to the lowest
// token id.
template <typename T>
TokenSeq generate(const TokenSeq& prompt, std::int64_t n_new, const CheckpointT<T>& ckpt) {
  const ModelConfig& cfg = ckpt.config;
  if (static_cast<std::int64_t>(prompt.size()) + n_new > cfg.max_seq)
    throw CapacityError("generate: prompt + n_new exceeds max_seq");
  TokenSeq out = prompt;
  if (n_new <= 0) return out;
  if (prompt.empty()) throw InputError("generate: empty prompt");

  KVCacheT<T> cache(cfg);
  MatrixT<T> logits = forward_logits(std::span<const TokenId>(prompt), ckpt, &cache, 0);
  TokenId next = argmax_lowest(logits, logits.rows - 1);
  out.push_back(next);
  for (std::int64_t i = 1; i < n_new; ++i) {
    const TokenId last = out.back();
    logits = forward_logits(std::span<const TokenId>(&last, 1), ckpt, &cache,
                            static_cast<std::int64_t>(out.size()) - 1);
    next = argmax_lowest(logits, 0);
    out.push_back(next);
  }
  return out;
}

}  // namespace dropforge
