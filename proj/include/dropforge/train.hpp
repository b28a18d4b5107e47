#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dropforge/calibration.hpp"
#include "dropforge/checkpoint.hpp"
#include "dropforge/errors.hpp"
#include "dropforge/model.hpp"
#include "dropforge/tensor.hpp"

namespace dropforge {

namespace detail {

// Backward of rms_norm for one matrix. Consumes the cached per-row
// scale r = sqrt(mean(x^2) + eps).
template <typename T>
MatrixT<T> rms_norm_backward(const MatrixT<T>& dn, const MatrixT<T>& x, const std::vector<T>& r,
                             const MatrixT<T>& w, MatrixT<T>& dw) {
  const index_t d = x.cols;
  MatrixT<T> dx(x.rows, d);
  for (index_t i = 0; i < x.rows; ++i) {
    const T inv_r = T(1) / r[static_cast<std::size_t>(i)];
    T dot = 0;
    for (index_t j = 0; j < d; ++j) {
      const T xhat = x.at(i, j) * inv_r;
      const T dxhat = dn.at(i, j) * w.data[static_cast<std::size_t>(j)];
      dw.data[static_cast<std::size_t>(j)] += dn.at(i, j) * xhat;
      dot += dxhat * xhat;
    }
    const T mean_dot = dot / static_cast<T>(d);
    for (index_t j = 0; j < d; ++j) {
      const T xhat = x.at(i, j) * inv_r;
      const T dxhat = dn.at(i, j) * w.data[static_cast<std::size_t>(j)];
      dx.at(i, j) = (dxhat - xhat * mean_dot) * inv_r;
    }
  }
  return dx;
}

template <typename T>
MatrixT<T> rms_norm_cached(const MatrixT<T>& x, const MatrixT<T>& w, T eps, std::vector<T>& r) {
  r.resize(static_cast<std::size_t>(x.rows));
  MatrixT<T> out(x.rows, x.cols);
  for (index_t i = 0; i < x.rows; ++i) {
    T ss = 0;
    for (index_t j = 0; j < x.cols; ++j) ss += x.at(i, j) * x.at(i, j);
    const T rr = std::sqrt(ss / static_cast<T>(x.cols) + eps);
    r[static_cast<std::size_t>(i)] = rr;
    for (index_t j = 0; j < x.cols; ++j)
      out.at(i, j) = x.at(i, j) / rr * w.data[static_cast<std::size_t>(j)];
  }
  return out;
}

template <typename T>
void add_inplace(MatrixT<T>& a, const MatrixT<T>& b) {
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

// dscores = p * (dp - rowsum(dp * p)), the Jacobian product of a row
// softmax. Masked positions carry p == 0 and stay zero.
template <typename T>
MatrixT<T> softmax_backward(const MatrixT<T>& p, const MatrixT<T>& dp) {
  MatrixT<T> ds(p.rows, p.cols);
  for (index_t i = 0; i < p.rows; ++i) {
    T dot = 0;
    for (index_t j = 0; j < p.cols; ++j) dot += dp.at(i, j) * p.at(i, j);
    for (index_t j = 0; j < p.cols; ++j) ds.at(i, j) = p.at(i, j) * (dp.at(i, j) - dot);
  }
  return ds;
}

template <typename T>
struct AttnRowTrace {
  MatrixT<T> x, n, q, k, v, ctx;
  std::vector<MatrixT<T>> probs;  // per query head
  std::vector<T> r;
};

template <typename T>
struct MlpRowTrace {
  MatrixT<T> x, n, gate, up, h;
  std::vector<T> r;
};

}  // namespace detail

// Plain SGD trainer with next-token cross entropy and global-norm
// gradient clipping. Instantiated with T = double it doubles as the
// reference for finite-difference gradient checks.
template <typename T>
class TrainerT {
 public:
  explicit TrainerT(CheckpointT<T> model) : model_(std::move(model)) {
    model_.config.validate();
    for (const auto& [name, tensor] : model_.tensors)
      grads_.emplace(name, MatrixT<T>(tensor.rows, tensor.cols));
  }

  const CheckpointT<T>& model() const { return model_; }
  CheckpointT<T>& model() { return model_; }
  const std::map<std::string, MatrixT<T>>& grads() const { return grads_; }

  void zero_grads() {
    for (auto& [name, g] : grads_) std::fill(g.data.begin(), g.data.end(), T(0));
  }

  // Mean cross entropy of the batch; no gradients.
  double loss(const TokenBatch& batch) const {
    double nll = 0.0;
    std::int64_t count = 0;
    for (std::int64_t rrow = 0; rrow < batch.rows; ++rrow) {
      const auto row = batch.row(rrow);
      const MatrixT<T> logits = forward_logits(row, model_);
      for (std::int64_t t = 0; t + 1 < batch.cols; ++t) {
        nll += row_nll(logits, t, row[static_cast<std::size_t>(t) + 1]);
        ++count;
      }
    }
    return nll / static_cast<double>(count);
  }

  // Forward + backward over the batch, accumulating into the gradient
  // buffers (call zero_grads first). Returns the mean cross entropy.
  double accumulate_loss_and_grads(const TokenBatch& batch) {
    if (batch.cols < 2) throw InputError("training needs sequences of at least 2 tokens");
    const std::int64_t targets_total = batch.rows * (batch.cols - 1);
    double nll = 0.0;
    for (std::int64_t rrow = 0; rrow < batch.rows; ++rrow)
      nll += row_loss_and_grads(batch.row(rrow), targets_total);
    return nll / static_cast<double>(targets_total);
  }

  // Scales gradients to global norm <= clip, then applies SGD. Returns
  // the pre-clip gradient norm.
  double sgd_step(T lr, double clip) {
    double total_sq = 0.0;
    for (const auto& [name, g] : grads_)
      for (T v : g.data) total_sq += static_cast<double>(v) * static_cast<double>(v);
    const double norm = std::sqrt(total_sq);
    const T scale = (clip > 0.0 && norm > clip) ? static_cast<T>(clip / norm) : T(1);
    for (auto& [name, w] : model_.tensors) {
      const MatrixT<T>& g = grads_.at(name);
      for (std::size_t i = 0; i < w.data.size(); ++i) w.data[i] -= lr * scale * g.data[i];
    }
    return norm;
  }

  double step(const TokenBatch& batch, T lr) {
    zero_grads();
    const double loss_value = accumulate_loss_and_grads(batch);
    if (!std::isfinite(loss_value)) throw TrainingError("loss diverged (non-finite)");
    sgd_step(lr, 1.0);
    return loss_value;
  }

 private:
  MatrixT<T>& grad(const std::string& name) { return grads_.at(name); }

  static double row_nll(const MatrixT<T>& logits, std::int64_t t, TokenId target) {
    const auto lr = logits.row(t);
    double mx = static_cast<double>(lr[0]);
    for (std::size_t j = 1; j < lr.size(); ++j) mx = std::max(mx, static_cast<double>(lr[j]));
    double sum = 0.0;
    for (std::size_t j = 0; j < lr.size(); ++j) sum += std::exp(static_cast<double>(lr[j]) - mx);
    return std::log(sum) + mx - static_cast<double>(lr[static_cast<std::size_t>(target)]);
  }

  double row_loss_and_grads(std::span<const TokenId> tokens, std::int64_t targets_total) {
    const ModelConfig& cfg = model_.config;
    const std::int64_t S = static_cast<std::int64_t>(tokens.size());
    const T eps = static_cast<T>(cfg.norm_eps);

    // ---- forward, keeping what backward needs
    MatrixT<T> x = embed_tokens(tokens, model_);
    std::vector<std::optional<detail::AttnRowTrace<T>>> attn_traces(
        static_cast<std::size_t>(cfg.n_layers));
    std::vector<std::optional<detail::MlpRowTrace<T>>> mlp_traces(
        static_cast<std::size_t>(cfg.n_layers));

    for (std::int64_t l = 0; l < cfg.n_layers; ++l) {
      if (!cfg.attn_dropped(l)) {
        detail::AttnRowTrace<T> tr;
        tr.x = x;
        tr.n = detail::rms_norm_cached(x, model_.tensor(tensor_names::attn_norm(l)), eps, tr.r);
        tr.q = linear(tr.n, model_.tensor(tensor_names::attn_proj(l, 'q')));
        tr.k = linear(tr.n, model_.tensor(tensor_names::attn_proj(l, 'k')));
        tr.v = linear(tr.n, model_.tensor(tensor_names::attn_proj(l, 'v')));
        if (cfg.use_rope) {
          detail::apply_rope(tr.q, cfg.n_heads, cfg.head_dim, 0);
          detail::apply_rope(tr.k, cfg.n_kv_heads, cfg.head_dim, 0);
        }
        run_attention_heads(tr, cfg, S);
        const MatrixT<T> sub = linear(tr.ctx, model_.tensor(tensor_names::attn_proj(l, 'o')));
        x = add(x, sub);
        attn_traces[static_cast<std::size_t>(l)] = std::move(tr);
      }
      if (!cfg.mlp_dropped(l)) {
        detail::MlpRowTrace<T> tr;
        tr.x = x;
        tr.n = detail::rms_norm_cached(x, model_.tensor(tensor_names::mlp_norm(l)), eps, tr.r);
        tr.gate = linear(tr.n, model_.tensor(tensor_names::mlp_proj(l, "gate")));
        tr.up = linear(tr.n, model_.tensor(tensor_names::mlp_proj(l, "up")));
        tr.h = gated_silu(tr.gate, tr.up);
        const MatrixT<T> sub = linear(tr.h, model_.tensor(tensor_names::mlp_proj(l, "down")));
        x = add(x, sub);
        mlp_traces[static_cast<std::size_t>(l)] = std::move(tr);
      }
    }

    std::vector<T> r_final;
    const MatrixT<T> n_final =
        detail::rms_norm_cached(x, model_.tensor(tensor_names::final_norm()), eps, r_final);
    const MatrixT<T> logits = linear(n_final, model_.tensor(tensor_names::lm_head()));

    // ---- loss and dlogits
    double nll = 0.0;
    MatrixT<T> dlogits(S, cfg.vocab_size);
    const double inv_total = 1.0 / static_cast<double>(targets_total);
    for (std::int64_t t = 0; t + 1 < S; ++t) {
      const auto lr = logits.row(t);
      double mx = static_cast<double>(lr[0]);
      for (std::size_t j = 1; j < lr.size(); ++j) mx = std::max(mx, static_cast<double>(lr[j]));
      double sum = 0.0;
      for (std::size_t j = 0; j < lr.size(); ++j) sum += std::exp(static_cast<double>(lr[j]) - mx);
      const TokenId target = tokens[static_cast<std::size_t>(t) + 1];
      nll += std::log(sum) + mx - static_cast<double>(lr[static_cast<std::size_t>(target)]);
      for (std::int64_t j = 0; j < cfg.vocab_size; ++j) {
        const double p = std::exp(static_cast<double>(lr[static_cast<std::size_t>(j)]) - mx) / sum;
        dlogits.at(t, j) = static_cast<T>((p - (j == target ? 1.0 : 0.0)) * inv_total);
      }
    }

    // ---- backward
    MatrixT<T> dn_final = matmul(dlogits, model_.tensor(tensor_names::lm_head()));
    detail::add_inplace(grad(tensor_names::lm_head()), matmul(transpose(dlogits), n_final));
    MatrixT<T> dx = detail::rms_norm_backward(dn_final, x, r_final,
                                              model_.tensor(tensor_names::final_norm()),
                                              grad(tensor_names::final_norm()));

    for (std::int64_t l = cfg.n_layers - 1; l >= 0; --l) {
      if (auto& tr = mlp_traces[static_cast<std::size_t>(l)]; tr.has_value())
        dx = mlp_unit_backward(l, *tr, dx);
      if (auto& tr = attn_traces[static_cast<std::size_t>(l)]; tr.has_value())
        dx = attn_unit_backward(l, *tr, dx, S);
    }

    // ---- embedding
    MatrixT<T>& dE = grad(tensor_names::embed());
    for (std::int64_t t = 0; t < S; ++t) {
      const TokenId id = tokens[static_cast<std::size_t>(t)];
      for (std::int64_t c = 0; c < cfg.d_model; ++c) dE.at(id, c) += dx.at(t, c);
    }
    return nll;
  }

  void run_attention_heads(detail::AttnRowTrace<T>& tr, const ModelConfig& cfg, std::int64_t S) {
    const std::int64_t hd = cfg.head_dim;
    const std::int64_t group = cfg.n_heads / cfg.n_kv_heads;
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
    const T mask = detail::causal_mask_value<T>();
    tr.ctx = MatrixT<T>(S, cfg.n_heads * hd);
    tr.probs.resize(static_cast<std::size_t>(cfg.n_heads));
    for (std::int64_t h = 0; h < cfg.n_heads; ++h) {
      const std::int64_t kvh = h / group;
      const MatrixT<T> q_head = detail::head_slice(tr.q, S, h, hd);
      MatrixT<T> k_head_t(hd, S);
      for (std::int64_t j = 0; j < S; ++j)
        for (std::int64_t t = 0; t < hd; ++t) k_head_t.at(t, j) = tr.k.at(j, kvh * hd + t);
      MatrixT<T> scores = matmul(q_head, k_head_t);
      for (std::int64_t i = 0; i < S; ++i)
        for (std::int64_t j = 0; j < S; ++j)
          scores.at(i, j) = j <= i ? scores.at(i, j) * scale : mask;
      MatrixT<T> probs = softmax_rows(scores);
      const MatrixT<T> v_head = detail::head_slice(tr.v, S, kvh, hd);
      const MatrixT<T> ctx_head = matmul(probs, v_head);
      for (std::int64_t i = 0; i < S; ++i)
        for (std::int64_t t = 0; t < hd; ++t) tr.ctx.at(i, h * hd + t) = ctx_head.at(i, t);
      tr.probs[static_cast<std::size_t>(h)] = std::move(probs);
    }
  }

  MatrixT<T> mlp_unit_backward(std::int64_t l, const detail::MlpRowTrace<T>& tr,
                               const MatrixT<T>& dy) {
    const MatrixT<T>& w_down = model_.tensor(tensor_names::mlp_proj(l, "down"));
    detail::add_inplace(grad(tensor_names::mlp_proj(l, "down")), matmul(transpose(dy), tr.h));
    const MatrixT<T> dh = matmul(dy, w_down);

    MatrixT<T> dgate(tr.gate.rows, tr.gate.cols);
    MatrixT<T> dup(tr.up.rows, tr.up.cols);
    for (std::size_t i = 0; i < dh.data.size(); ++i) {
      const T g = tr.gate.data[i];
      const T sg = T(1) / (T(1) + std::exp(-g));
      const T silu_g = g * sg;
      dup.data[i] = dh.data[i] * silu_g;
      dgate.data[i] = dh.data[i] * tr.up.data[i] * sg * (T(1) + g * (T(1) - sg));
    }

    detail::add_inplace(grad(tensor_names::mlp_proj(l, "gate")), matmul(transpose(dgate), tr.n));
    detail::add_inplace(grad(tensor_names::mlp_proj(l, "up")), matmul(transpose(dup), tr.n));
    MatrixT<T> dn = matmul(dgate, model_.tensor(tensor_names::mlp_proj(l, "gate")));
    detail::add_inplace(dn, matmul(dup, model_.tensor(tensor_names::mlp_proj(l, "up"))));

    MatrixT<T> dx = detail::rms_norm_backward(dn, tr.x, tr.r,
                                              model_.tensor(tensor_names::mlp_norm(l)),
                                              grad(tensor_names::mlp_norm(l)));
    detail::add_inplace(dx, dy);  // residual branch
    return dx;
  }

  MatrixT<T> attn_unit_backward(std::int64_t l, const detail::AttnRowTrace<T>& tr,
                                const MatrixT<T>& dy, std::int64_t S) {
    const ModelConfig& cfg = model_.config;
    const std::int64_t hd = cfg.head_dim;
    const std::int64_t group = cfg.n_heads / cfg.n_kv_heads;
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

    detail::add_inplace(grad(tensor_names::attn_proj(l, 'o')), matmul(transpose(dy), tr.ctx));
    const MatrixT<T> dctx = matmul(dy, model_.tensor(tensor_names::attn_proj(l, 'o')));

    MatrixT<T> dq(S, cfg.n_heads * hd);
    MatrixT<T> dk(S, cfg.n_kv_heads * hd);
    MatrixT<T> dv(S, cfg.n_kv_heads * hd);
    for (std::int64_t h = 0; h < cfg.n_heads; ++h) {
      const std::int64_t kvh = h / group;
      const MatrixT<T> dctx_head = detail::head_slice(dctx, S, h, hd);
      const MatrixT<T>& probs = tr.probs[static_cast<std::size_t>(h)];
      const MatrixT<T> v_head = detail::head_slice(tr.v, S, kvh, hd);
      const MatrixT<T> q_head = detail::head_slice(tr.q, S, h, hd);
      const MatrixT<T> k_head = detail::head_slice(tr.k, S, kvh, hd);

      const MatrixT<T> dp = linear(dctx_head, v_head);         // S x S
      const MatrixT<T> dv_head = matmul(transpose(probs), dctx_head);
      MatrixT<T> dscores = detail::softmax_backward(probs, dp);
      for (auto& v : dscores.data) v *= scale;
      const MatrixT<T> dq_head = matmul(dscores, k_head);
      const MatrixT<T> dk_head = matmul(transpose(dscores), q_head);

      for (std::int64_t i = 0; i < S; ++i)
        for (std::int64_t t = 0; t < hd; ++t) {
          dq.at(i, h * hd + t) = dq_head.at(i, t);
          dk.at(i, kvh * hd + t) += dk_head.at(i, t);
          dv.at(i, kvh * hd + t) += dv_head.at(i, t);
        }
    }
    if (cfg.use_rope) {
      detail::apply_rope(dq, cfg.n_heads, hd, 0, /*backward=*/true);
      detail::apply_rope(dk, cfg.n_kv_heads, hd, 0, /*backward=*/true);
    }

    detail::add_inplace(grad(tensor_names::attn_proj(l, 'q')), matmul(transpose(dq), tr.n));
    detail::add_inplace(grad(tensor_names::attn_proj(l, 'k')), matmul(transpose(dk), tr.n));
    detail::add_inplace(grad(tensor_names::attn_proj(l, 'v')), matmul(transpose(dv), tr.n));
    MatrixT<T> dn = matmul(dq, model_.tensor(tensor_names::attn_proj(l, 'q')));
    detail::add_inplace(dn, matmul(dk, model_.tensor(tensor_names::attn_proj(l, 'k'))));
    detail::add_inplace(dn, matmul(dv, model_.tensor(tensor_names::attn_proj(l, 'v'))));

    MatrixT<T> dx = detail::rms_norm_backward(dn, tr.x, tr.r,
                                              model_.tensor(tensor_names::attn_norm(l)),
                                              grad(tensor_names::attn_norm(l)));
    detail::add_inplace(dx, dy);  // residual branch
    return dx;
  }

  CheckpointT<T> model_;
  std::map<std::string, MatrixT<T>> grads_;
};

using Trainer = TrainerT<float>;

struct ToyTrainOptions {
  std::int64_t steps = 1;
  float lr = 0.1f;
  std::uint64_t seed = 0;
  std::int64_t snapshot_every = 500;
  std::string out_dir;
  std::int64_t batch_size = 4;
  std::int64_t seq_len = 64;
  std::function<void(std::int64_t step, double loss)> progress;
};

// Trains a fresh randomly initialized model on the corpus and writes
// snapshots (including the untrained step-0 state and the final state).
// Deterministic for a given seed: fixed batch order, fixed kernels.
inline std::vector<std::string> train_toy(const ModelConfig& config, const CalibrationSet& corpus,
                                          const ToyTrainOptions& opt) {
  if (opt.steps < 1) throw InputError("train_toy: steps must be >= 1");
  if (opt.snapshot_every < 1) throw InputError("train_toy: snapshot_every must be >= 1");
  if (opt.out_dir.empty()) throw InputError("train_toy: no output directory");

  const BatchPlan batches = make_batches(corpus, opt.batch_size, opt.seq_len);
  Trainer trainer(init_random(config, opt.seed));
  std::filesystem::create_directories(opt.out_dir);

  std::vector<std::string> paths;
  const auto snapshot = [&](std::int64_t step) {
    char name[32];
    std::snprintf(name, sizeof(name), "snap_%06lld.ckpt", static_cast<long long>(step));
    const std::string path = opt.out_dir + "/" + name;
    save_checkpoint(trainer.model(), path);
    paths.push_back(path);
  };

  snapshot(0);
  const std::int64_t n_batches = static_cast<std::int64_t>(batches.batches.size());
  for (std::int64_t step = 1; step <= opt.steps; ++step) {
    const TokenBatch& batch = batches.batches[static_cast<std::size_t>((step - 1) % n_batches)];
    const double loss = trainer.step(batch, opt.lr);
    if (opt.progress) opt.progress(step, loss);
    if (step % opt.snapshot_every == 0 || step == opt.steps) snapshot(step);
  }
  return paths;
}

}  // namespace dropforge
