#include "dropforge/model.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "dropforge/checkpoint.hpp"
#include "support/test_util.hpp"

namespace dropforge {
namespace {

using testsupport::bitwise_equal;
using testsupport::max_abs_diff;
using testsupport::random_matrix;
using testsupport::random_tokens;
using testsupport::tiny_config;

void zero_tensor(Checkpoint& ckpt, const std::string& name) {
  auto& t = ckpt.tensors.at(name);
  std::fill(t.data.begin(), t.data.end(), 0.0f);
}

Matrix identity_matrix(std::int64_t n) {
  Matrix m(n, n);
  for (std::int64_t i = 0; i < n; ++i) m.at(i, i) = 1.0f;
  return m;
}

TEST(MlpUnit, ZeroDownProjectionIsResidualIdentity) {
  Checkpoint ckpt = init_random(tiny_config(), 0);
  zero_tensor(ckpt, tensor_names::mlp_proj(1, "down"));
  const Matrix x = random_matrix(5, ckpt.config.d_model, 3, 0.5);
  EXPECT_TRUE(bitwise_equal(forward_mlp_unit(x, 1, ckpt), x));
}

// d_model = d_ff = 2, identity projections, unit norm weight, eps 0:
// n = [sqrt(2), 0], h = silu(sqrt(2)) * sqrt(2), y = x + h.
TEST(MlpUnit, ScalarOracleIdentityProjections) {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 2;
  cfg.n_heads = 1;
  cfg.n_kv_heads = 1;
  cfg.head_dim = 2;
  cfg.d_ff = 2;
  cfg.vocab_size = 4;
  cfg.max_seq = 8;
  cfg.norm_eps = 0.0f;
  cfg.validate();
  Checkpoint ckpt = init_random(cfg, 0);
  for (const char* p : {"gate", "up", "down"})
    ckpt.tensors.at(tensor_names::mlp_proj(0, p)) = identity_matrix(2);

  const Matrix x = [] {
    Matrix m(1, 2);
    m.at(0, 0) = 1.0f;
    return m;
  }();
  const Matrix y = forward_mlp_unit(x, 0, ckpt);

  const double n0 = std::sqrt(2.0);
  const double silu_n0 = n0 / (1.0 + std::exp(-n0));
  const double expected = 1.0 + silu_n0 * n0;
  EXPECT_NEAR(y.at(0, 0), expected, 1e-3);
  EXPECT_NEAR(y.at(0, 0), 2.609, 1e-3);
  EXPECT_NEAR(y.at(0, 1), 0.0, 1e-6);
}

// Straightforward re-implementation of the whole unit in double.
TEST(MlpUnit, MatchesNaiveReferenceOracle) {
  const ModelConfig cfg = tiny_config(2, 16, 2, 2, 24, 32);
  const Checkpoint ckpt = init_random(cfg, 0);
  const Matrix x = random_matrix(4, cfg.d_model, 9, 0.8);
  const Matrix y = forward_mlp_unit(x, 0, ckpt);

  const Matrix& wn = ckpt.tensor(tensor_names::mlp_norm(0));
  const Matrix& wg = ckpt.tensor(tensor_names::mlp_proj(0, "gate"));
  const Matrix& wu = ckpt.tensor(tensor_names::mlp_proj(0, "up"));
  const Matrix& wd = ckpt.tensor(tensor_names::mlp_proj(0, "down"));
  for (index_t i = 0; i < x.rows; ++i) {
    std::vector<double> n(cfg.d_model);
    double ss = 0;
    for (index_t j = 0; j < cfg.d_model; ++j) ss += double(x.at(i, j)) * x.at(i, j);
    const double r = std::sqrt(ss / cfg.d_model + cfg.norm_eps);
    for (index_t j = 0; j < cfg.d_model; ++j) n[j] = x.at(i, j) / r * wn.at(0, j);
    std::vector<double> h(cfg.d_ff);
    for (index_t f = 0; f < cfg.d_ff; ++f) {
      double g = 0, u = 0;
      for (index_t j = 0; j < cfg.d_model; ++j) {
        g += wg.at(f, j) * n[j];
        u += wu.at(f, j) * n[j];
      }
      h[f] = g / (1.0 + std::exp(-g)) * u;
    }
    for (index_t j = 0; j < cfg.d_model; ++j) {
      double out = x.at(i, j);
      for (index_t f = 0; f < cfg.d_ff; ++f) out += wd.at(j, f) * h[f];
      EXPECT_NEAR(y.at(i, j), out, 1e-5);
    }
  }
}

TEST(MlpUnit, DroppedLayerThrows) {
  ModelConfig cfg = tiny_config();
  cfg.dropped_mlp = {2};
  const Checkpoint ckpt = init_random(cfg, 0);
  const Matrix x = random_matrix(2, cfg.d_model, 1);
  EXPECT_THROW(forward_mlp_unit(x, 2, ckpt), UsageError);
}

TEST(AttentionUnit, ZeroOutputProjectionIsResidualIdentity) {
  Checkpoint ckpt = init_random(tiny_config(), 0);
  zero_tensor(ckpt, tensor_names::attn_proj(0, 'o'));
  const Matrix x = random_matrix(5, ckpt.config.d_model, 4, 0.5);
  EXPECT_TRUE(bitwise_equal(forward_attention_unit(x, 0, ckpt, nullptr, 0), x));
}

// Single token, single head: the only attention weight is 1, so:
// y = x + o_proj(v_proj(rms_norm(x))).
TEST(AttentionUnit, SingleTokenSingleHead) {
  const ModelConfig cfg = tiny_config(1, 8, 1, 1, 16, 16);
  const Checkpoint ckpt = init_random(cfg, 2);
  const Matrix x = random_matrix(1, cfg.d_model, 5, 0.7);
  const Matrix y = forward_attention_unit(x, 0, ckpt, nullptr, 0);

  const Matrix n = rms_norm(x, ckpt.tensor(tensor_names::attn_norm(0)), cfg.norm_eps);
  const Matrix v = linear(n, ckpt.tensor(tensor_names::attn_proj(0, 'v')));
  const Matrix o = linear(v, ckpt.tensor(tensor_names::attn_proj(0, 'o')));
  EXPECT_LE(max_abs_diff(y, add(x, o)), 1e-6);
}

TEST(AttentionUnit, CausalityExactUnderPerturbation) {
  for (bool rope : {false, true}) {
    const ModelConfig cfg = tiny_config(2, 32, 4, 2, 48, 64, 128, rope);
    const Checkpoint ckpt = init_random(cfg, 10);
    TokenSeq tokens = random_tokens(12, cfg.vocab_size, 3);
    const Matrix a = forward_logits(std::span<const TokenId>(tokens), ckpt);
    TokenSeq perturbed = tokens;
    perturbed[9] = (perturbed[9] + 1) % cfg.vocab_size;
    const Matrix b = forward_logits(std::span<const TokenId>(perturbed), ckpt);
    for (std::int64_t t = 0; t < 9; ++t)
      for (std::int64_t v = 0; v < cfg.vocab_size; ++v)
        EXPECT_EQ(a.at(t, v), b.at(t, v)) << "rope=" << rope << " t=" << t;
    bool tail_differs = false;
    for (std::int64_t v = 0; v < cfg.vocab_size; ++v)
      if (a.at(9, v) != b.at(9, v)) tail_differs = true;
    EXPECT_TRUE(tail_differs);
  }
}

TEST(AttentionUnit, CacheCapacityError) {
  const ModelConfig cfg = tiny_config(1, 8, 2, 2, 16, 16, /*max_seq=*/4);
  const Checkpoint ckpt = init_random(cfg, 0);
  KVCache cache(cfg);
  const Matrix x = random_matrix(5, cfg.d_model, 1);
  EXPECT_THROW(forward_attention_unit(x, 0, ckpt, &cache, 0), CapacityError);
}

TEST(AttentionUnit, CacheHasNoEntriesForDroppedLayers) {
  ModelConfig cfg = tiny_config();
  cfg.dropped_attn = {1, 3};
  KVCache cache(cfg);
  EXPECT_EQ(cache.layers.count(1), 0u);
  EXPECT_EQ(cache.layers.count(3), 0u);
  EXPECT_EQ(cache.layers.count(0), 1u);
  EXPECT_EQ(cache.layers.count(2), 1u);
}

TEST(ForwardModel, LogitsShapeContract) {
  const ModelConfig cfg = tiny_config();
  const Checkpoint ckpt = init_random(cfg, 0);
  const std::vector<TokenSeq> batch = {random_tokens(7, cfg.vocab_size, 1),
                                       random_tokens(7, cfg.vocab_size, 2)};
  const auto logits = forward_model(batch, ckpt);
  ASSERT_EQ(logits.size(), 2u);
  for (const Matrix& m : logits) {
    EXPECT_EQ(m.rows, 7);
    EXPECT_EQ(m.cols, cfg.vocab_size);
  }
}

TEST(ForwardModel, TokenOutOfVocabThrows) {
  const ModelConfig cfg = tiny_config();
  const Checkpoint ckpt = init_random(cfg, 0);
  TokenSeq bad = {0, 1, static_cast<TokenId>(cfg.vocab_size)};
  EXPECT_THROW(forward_logits(std::span<const TokenId>(bad), ckpt), InputError);
}

// With every attention unit dropped, the model must equal an oracle that
// never builds attention tensors at all.
TEST(ForwardModel, AllAttentionDroppedEqualsMlpOnlyOracle) {
  ModelConfig cfg = tiny_config();
  for (std::int64_t l = 0; l < cfg.n_layers; ++l) cfg.dropped_attn.insert(l);
  const Checkpoint ckpt = init_random(cfg, 6);
  const TokenSeq tokens = random_tokens(9, cfg.vocab_size, 4);

  const Matrix got = forward_logits(std::span<const TokenId>(tokens), ckpt);

  Matrix x = embed_tokens(std::span<const TokenId>(tokens), ckpt);
  for (std::int64_t l = 0; l < cfg.n_layers; ++l) x = forward_mlp_unit(x, l, ckpt);
  const Matrix want = final_logits(x, ckpt);
  EXPECT_TRUE(bitwise_equal(got, want));
}

TEST(ForwardModel, EmptyDropSetsEqualExplicitUnitLoop) {
  const ModelConfig cfg = tiny_config(3, 32, 4, 2, 48, 64);
  const Checkpoint ckpt = init_random(cfg, 8);
  const TokenSeq tokens = random_tokens(10, cfg.vocab_size, 5);
  const Matrix got = forward_logits(std::span<const TokenId>(tokens), ckpt);

  Matrix x = embed_tokens(std::span<const TokenId>(tokens), ckpt);
  for (std::int64_t l = 0; l < cfg.n_layers; ++l) {
    x = forward_attention_unit(x, l, ckpt, nullptr, 0);
    x = forward_mlp_unit(x, l, ckpt);
  }
  EXPECT_TRUE(bitwise_equal(got, final_logits(x, ckpt)));
}

TEST(Generate, ZeroNewTokensReturnsPrompt) {
  const Checkpoint ckpt = init_random(tiny_config(), 0);
  const TokenSeq prompt = {5, 6, 7};
  EXPECT_EQ(generate(prompt, 0, ckpt), prompt);
}

TEST(Generate, CachedEqualsUncachedOracle) {
  for (bool rope : {false, true}) {
    const ModelConfig cfg = tiny_config(3, 32, 4, 2, 48, 64, 64, rope);
    const Checkpoint ckpt = init_random(cfg, 11);
    const TokenSeq prompt = random_tokens(6, cfg.vocab_size, 7);
    const TokenSeq cached = generate(prompt, 12, ckpt);

    // cache-free oracle: full re-forward each step
    TokenSeq oracle = prompt;
    for (int i = 0; i < 12; ++i) {
      const Matrix logits = forward_logits(std::span<const TokenId>(oracle), ckpt);
      oracle.push_back(argmax_lowest(logits, logits.rows - 1));
    }
    EXPECT_EQ(cached, oracle) << "rope=" << rope;
  }
}

TEST(Generate, DeterministicAcrossRuns) {
  const ModelConfig cfg = tiny_config();
  const Checkpoint ckpt = init_random(cfg, 12);
  const TokenSeq prompt = random_tokens(5, cfg.vocab_size, 8);
  EXPECT_EQ(generate(prompt, 10, ckpt), generate(prompt, 10, ckpt));
}

TEST(Generate, CapacityErrorPastMaxSeq) {
  const ModelConfig cfg = tiny_config(2, 32, 4, 2, 48, 64, /*max_seq=*/16);
  const Checkpoint ckpt = init_random(cfg, 0);
  EXPECT_THROW(generate(random_tokens(10, cfg.vocab_size, 1), 7, ckpt), CapacityError);
}

TEST(ArgmaxLowest, TieBreaksToLowestId) {
  Matrix m(1, 4);
  m.data = {1.0f, 3.0f, 3.0f, 0.5f};
  EXPECT_EQ(argmax_lowest(m, 0), 1);
}

}  // namespace
}  // namespace dropforge
