#include "dropforge/checkpoint.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "support/test_util.hpp"

namespace dropforge {
namespace {

using testsupport::bitwise_equal;
using testsupport::scratch_dir;
using testsupport::tiny_config;

TEST(InitRandom, SameSeedBitIdentical) {
  const ModelConfig cfg = tiny_config();
  const Checkpoint a = init_random(cfg, 123);
  const Checkpoint b = init_random(cfg, 123);
  ASSERT_EQ(a.tensors.size(), b.tensors.size());
  for (const auto& [name, t] : a.tensors) EXPECT_TRUE(bitwise_equal(t, b.tensor(name)));
}

TEST(InitRandom, DifferentSeedsDiffer) {
  const ModelConfig cfg = tiny_config();
  const Checkpoint a = init_random(cfg, 1);
  const Checkpoint b = init_random(cfg, 2);
  bool any_diff = false;
  for (const auto& [name, t] : a.tensors)
    if (!bitwise_equal(t, b.tensor(name))) any_diff = true;
  EXPECT_TRUE(any_diff);
}

TEST(InitRandom, ProjectionShapes) {
  const ModelConfig cfg = tiny_config(2, 32, 4, 2, 64, 64);
  const Checkpoint ckpt = init_random(cfg, 0);
  const Matrix& q = ckpt.tensor(tensor_names::attn_proj(0, 'q'));
  EXPECT_EQ(q.rows, cfg.n_heads * cfg.head_dim);
  EXPECT_EQ(q.cols, cfg.d_model);
  const Matrix& k = ckpt.tensor(tensor_names::attn_proj(0, 'k'));
  EXPECT_EQ(k.rows, cfg.n_kv_heads * cfg.head_dim);
  EXPECT_EQ(k.cols, cfg.d_model);
  const Matrix& down = ckpt.tensor(tensor_names::mlp_proj(1, "down"));
  EXPECT_EQ(down.rows, cfg.d_model);
  EXPECT_EQ(down.cols, cfg.d_ff);
}

TEST(InitRandom, NormWeightsAreOne) {
  const Checkpoint ckpt = init_random(tiny_config(), 9);
  for (float v : ckpt.tensor(tensor_names::attn_norm(0)).data) EXPECT_EQ(v, 1.0f);
  for (float v : ckpt.tensor(tensor_names::final_norm()).data) EXPECT_EQ(v, 1.0f);
}

TEST(InitRandom, ValuesBoundedByFanInScale) {
  const ModelConfig cfg = tiny_config();
  const Checkpoint ckpt = init_random(cfg, 4);
  const Matrix& q = ckpt.tensor(tensor_names::attn_proj(0, 'q'));
  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  for (float v : q.data) EXPECT_LE(std::abs(v), bound);
}

TEST(CheckpointFile, RoundTripBitExact) {
  const std::string dir = scratch_dir("ckpt_roundtrip");
  const Checkpoint a = init_random(tiny_config(), 77);
  save_checkpoint(a, dir + "/m.ckpt");
  const Checkpoint b = load_checkpoint(dir + "/m.ckpt");
  EXPECT_TRUE(a.config == b.config);
  ASSERT_EQ(a.tensors.size(), b.tensors.size());
  for (const auto& [name, t] : a.tensors) EXPECT_TRUE(bitwise_equal(t, b.tensor(name)));
}

TEST(CheckpointFile, LayoutMagicAndHeader) {
  const Checkpoint a = init_random(tiny_config(1, 8, 2, 2, 16, 16), 0);
  const std::string bytes = checkpoint_to_bytes(a);
  ASSERT_GE(bytes.size(), 16u);
  EXPECT_EQ(bytes.substr(0, 8), "DROPCKPT");
  std::uint64_t header_len = 0;
  for (int i = 7; i >= 0; --i)
    header_len = (header_len << 8) | static_cast<unsigned char>(bytes[8 + i]);
  const auto header = nlohmann::json::parse(bytes.substr(16, header_len));
  EXPECT_TRUE(header.contains("config"));
  EXPECT_TRUE(header.contains("tensors"));
  const auto& first = header["tensors"][0];
  EXPECT_EQ(first["name"], "embed.weight");
  EXPECT_EQ(first["dtype"], "f32");
  EXPECT_EQ(first["offset"], 0);
  std::uint64_t blob_len = 0;
  for (const auto& t : header["tensors"]) blob_len += t["byte_length"].get<std::uint64_t>();
  EXPECT_EQ(bytes.size(), 16 + header_len + blob_len);
}

TEST(CheckpointFile, BadMagicRejected) {
  std::string bytes = checkpoint_to_bytes(init_random(tiny_config(1, 8, 2, 2, 16, 16), 0));
  bytes[0] = 'X';
  EXPECT_THROW(checkpoint_from_bytes(bytes), InputError);
}

TEST(CheckpointFile, NonFiniteRejected) {
  Checkpoint a = init_random(tiny_config(1, 8, 2, 2, 16, 16), 0);
  a.tensors.at(tensor_names::embed()).at(0, 0) = std::numeric_limits<float>::infinity();
  const std::string bytes = checkpoint_to_bytes(a);
  EXPECT_THROW(checkpoint_from_bytes(bytes), InputError);
}

TEST(CheckpointFile, DroppedUnitsHaveNoTensors) {
  ModelConfig cfg = tiny_config();
  cfg.dropped_attn = {1};
  cfg.dropped_mlp = {2};
  const Checkpoint ckpt = init_random(cfg, 5);
  EXPECT_FALSE(ckpt.has_tensor(tensor_names::attn_norm(1)));
  EXPECT_FALSE(ckpt.has_tensor(tensor_names::attn_proj(1, 'q')));
  EXPECT_FALSE(ckpt.has_tensor(tensor_names::mlp_norm(2)));
  EXPECT_TRUE(ckpt.has_tensor(tensor_names::attn_norm(0)));

  const std::string dir = scratch_dir("ckpt_dropped");
  save_checkpoint(ckpt, dir + "/p.ckpt");
  const Checkpoint back = load_checkpoint(dir + "/p.ckpt");
  EXPECT_EQ(back.config.dropped_attn, cfg.dropped_attn);
  EXPECT_FALSE(back.has_tensor(tensor_names::attn_proj(1, 'o')));
}

TEST(CheckpointFile, SaveIsDeterministic) {
  const Checkpoint a = init_random(tiny_config(), 31);
  EXPECT_EQ(checkpoint_to_bytes(a), checkpoint_to_bytes(a));
}

TEST(ConfigJson, RoundTrip) {
  ModelConfig cfg = tiny_config(3, 32, 4, 4, 48, 100, 64, true);
  cfg.dropped_mlp = {0, 2};
  const ModelConfig back = config_from_json(config_to_json(cfg));
  EXPECT_TRUE(cfg == back);
}

TEST(ConfigJson, InvalidConfigRejected) {
  ModelConfig cfg = tiny_config();
  cfg.n_kv_heads = 3;  // does not divide n_heads = 4
  EXPECT_THROW(cfg.validate(), InputError);
  cfg = tiny_config();
  cfg.dropped_attn = {99};
  EXPECT_THROW(cfg.validate(), InputError);
}

}  // namespace
}  // namespace dropforge
