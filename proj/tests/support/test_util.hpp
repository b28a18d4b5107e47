#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include "dropforge/checkpoint.hpp"
#include "dropforge/config.hpp"
#include "dropforge/model.hpp"
#include "dropforge/rng.hpp"
#include "dropforge/tensor.hpp"

namespace dropforge::testsupport {

inline ModelConfig tiny_config(std::int64_t layers = 4, std::int64_t d_model = 32,
                               std::int64_t heads = 4, std::int64_t kv_heads = 2,
                               std::int64_t d_ff = 64, std::int64_t vocab = 64,
                               std::int64_t max_seq = 128, bool rope = false) {
  ModelConfig cfg;
  cfg.n_layers = layers;
  cfg.d_model = d_model;
  cfg.n_heads = heads;
  cfg.n_kv_heads = kv_heads;
  cfg.head_dim = d_model / heads;
  cfg.d_ff = d_ff;
  cfg.vocab_size = vocab;
  cfg.max_seq = max_seq;
  cfg.use_rope = rope;
  cfg.validate();
  return cfg;
}

inline Matrix random_matrix(std::int64_t rows, std::int64_t cols, std::uint64_t seed,
                            double scale = 1.0) {
  Xoshiro256 rng(seed);
  Matrix m(rows, cols);
  for (auto& v : m.data) v = static_cast<float>(rng.next_symmetric() * scale);
  return m;
}

inline TokenSeq random_tokens(std::int64_t n, std::int64_t vocab, std::uint64_t seed) {
  Xoshiro256 rng(seed);
  TokenSeq out;
  for (std::int64_t i = 0; i < n; ++i)
    out.push_back(static_cast<TokenId>(rng.next_below(static_cast<std::uint64_t>(vocab))));
  return out;
}

template <typename T>
bool bitwise_equal(const MatrixT<T>& a, const MatrixT<T>& b) {
  if (a.rows != b.rows || a.cols != b.cols) return false;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    if (std::memcmp(&a.data[i], &b.data[i], sizeof(T)) != 0) return false;
  return true;
}

template <typename T>
double max_abs_diff(const MatrixT<T>& a, const MatrixT<T>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
  return m;
}

// Scratch directory under the build tree; unique per tag.
inline std::string scratch_dir(const std::string& tag) {
  const std::string dir = std::filesystem::temp_directory_path().string() + "/dropforge_test_" + tag;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Spearman rank correlation with averaged ranks for ties.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t n = a.size();
  const auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
    std::vector<double> r(v.size());
    std::size_t i = 0;
    while (i < idx.size()) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  return cov / std::sqrt(va * vb);
}

}  // namespace dropforge::testsupport
