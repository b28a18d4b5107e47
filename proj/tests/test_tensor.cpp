#include "dropforge/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "dropforge/rng.hpp"
#include "support/test_util.hpp"

namespace dropforge {
namespace {

using testsupport::bitwise_equal;
using testsupport::max_abs_diff;
using testsupport::random_matrix;

Matrix from_rows(std::vector<std::vector<float>> rows) {
  Matrix m(static_cast<index_t>(rows.size()), static_cast<index_t>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      m.at(static_cast<index_t>(i), static_cast<index_t>(j)) = rows[i][j];
  return m;
}

// Independent brute-force product, plain i-j-k dots in double.
Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows, b.cols);
  for (index_t i = 0; i < a.rows; ++i)
    for (index_t j = 0; j < b.cols; ++j) {
      double acc = 0.0;
      for (index_t k = 0; k < a.cols; ++k)
        acc += static_cast<double>(a.at(i, k)) * static_cast<double>(b.at(k, j));
      out.at(i, j) = static_cast<float>(acc);
    }
  return out;
}

TEST(Matmul, IdentityExamples) {
  const Matrix id = from_rows({{1, 0}, {0, 1}});
  const Matrix b = from_rows({{3, 4}, {5, 6}});
  EXPECT_TRUE(bitwise_equal(matmul(id, b), b));
  EXPECT_TRUE(bitwise_equal(matmul(b, id), b));
}

TEST(Matmul, SmallArithmetic) {
  const Matrix a = from_rows({{1, 2}});
  const Matrix b = from_rows({{3}, {4}});
  const Matrix c = matmul(a, b);
  ASSERT_EQ(c.rows, 1);
  ASSERT_EQ(c.cols, 1);
  EXPECT_FLOAT_EQ(c.at(0, 0), 11.0f);
}

TEST(Matmul, MatchesNaiveOracle) {
  const Matrix a = random_matrix(7, 5, 0);
  const Matrix b = random_matrix(5, 3, 1);
  EXPECT_LE(max_abs_diff(matmul(a, b), naive_matmul(a, b)), 1e-6);
}

TEST(Matmul, ShapeMismatchThrows) {
  const Matrix a = random_matrix(2, 3, 0);
  const Matrix b = random_matrix(4, 2, 1);
  EXPECT_THROW(matmul(a, b), ShapeError);
}

TEST(Matmul, DeterministicAcrossRunsAndThreads) {
  const Matrix a = random_matrix(33, 47, 5);
  const Matrix b = random_matrix(47, 29, 6);
  set_num_threads(1);
  const Matrix c1 = matmul(a, b);
  set_num_threads(4);
  const Matrix c2 = matmul(a, b);
  const Matrix c3 = matmul(a, b);
  set_num_threads(1);
  EXPECT_TRUE(bitwise_equal(c1, c2));
  EXPECT_TRUE(bitwise_equal(c2, c3));
}

TEST(Linear, MatchesTransposedMatmul) {
  const Matrix x = random_matrix(6, 10, 2);
  const Matrix w = random_matrix(4, 10, 3);
  const Matrix via_transpose = matmul(x, transpose(w));
  EXPECT_LE(max_abs_diff(linear(x, w), via_transpose), 1e-6);
}

TEST(SoftmaxRows, SymmetricRow) {
  const Matrix p = softmax_rows(from_rows({{0, 0}}));
  EXPECT_FLOAT_EQ(p.at(0, 0), 0.5f);
  EXPECT_FLOAT_EQ(p.at(0, 1), 0.5f);
}

TEST(SoftmaxRows, MaxShiftStability) {
  const Matrix p = softmax_rows(from_rows({{1000, 0}}));
  EXPECT_FLOAT_EQ(p.at(0, 0), 1.0f);
  EXPECT_NEAR(p.at(0, 1), 0.0f, 1e-30);
  EXPECT_TRUE(p.all_finite());
}

TEST(SoftmaxRows, MatchesDirectOracle) {
  const Matrix p = softmax_rows(from_rows({{1, 2, 3}}));
  const double e1 = std::exp(1.0), e2 = std::exp(2.0), e3 = std::exp(3.0);
  const double z = e1 + e2 + e3;
  EXPECT_NEAR(p.at(0, 0), e1 / z, 1e-6);
  EXPECT_NEAR(p.at(0, 1), e2 / z, 1e-6);
  EXPECT_NEAR(p.at(0, 2), e3 / z, 1e-6);
}

TEST(SoftmaxRows, EmptyMatrix) {
  const Matrix e(0, 0);
  EXPECT_EQ(softmax_rows(e).numel(), 0);
}

TEST(SoftmaxRows, RowsSumToOneProperty) {
  Xoshiro256 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix m(4, 9);
    for (auto& v : m.data) v = static_cast<float>(rng.next_symmetric() * 1e4);
    const Matrix p = softmax_rows(m);
    for (index_t i = 0; i < p.rows; ++i) {
      double sum = 0;
      for (index_t j = 0; j < p.cols; ++j) {
        sum += p.at(i, j);
        EXPECT_GE(p.at(i, j), 0.0f);
      }
      EXPECT_NEAR(sum, 1.0, 1e-6);
    }
  }
}

TEST(RmsNorm, TwoElementRow) {
  Matrix w(1, 2);
  w.data = {1.0f, 1.0f};
  const Matrix out = rms_norm(from_rows({{1, 0}}), w, 0.0f);
  EXPECT_NEAR(out.at(0, 0), 1.41421356f, 1e-5);
  EXPECT_FLOAT_EQ(out.at(0, 1), 0.0f);
}

TEST(RmsNorm, ConstantRowScaleInvariance) {
  Matrix w(1, 5);
  for (auto& v : w.data) v = 1.0f;
  for (float c : {0.25f, 1.0f, 3.5f, 1000.0f}) {
    Matrix x(1, 5);
    for (auto& v : x.data) v = c;
    const Matrix out = rms_norm(x, w, 0.0f);
    for (index_t j = 0; j < 5; ++j) EXPECT_NEAR(out.at(0, j), 1.0f, 1e-6);
  }
}

TEST(RmsNorm, MatchesScalarOracle) {
  const Matrix x = random_matrix(1, 16, 0);
  Matrix w = random_matrix(1, 16, 1);
  const float eps = 1e-5f;
  const Matrix out = rms_norm(x, w, eps);
  double ss = 0;
  for (index_t j = 0; j < 16; ++j) ss += double(x.at(0, j)) * double(x.at(0, j));
  const double r = std::sqrt(ss / 16.0 + eps);
  for (index_t j = 0; j < 16; ++j)
    EXPECT_NEAR(out.at(0, j), double(x.at(0, j)) / r * double(w.at(0, j)), 1e-6);
}

TEST(RmsNorm, LengthMismatchThrows) {
  Matrix w(1, 3);
  EXPECT_THROW(rms_norm(random_matrix(2, 4, 0), w, 1e-5f), ShapeError);
}

TEST(CosineRows, PinnedExamples) {
  const Matrix x = from_rows({{1, 0}, {1, 0}, {1, 0}});
  const Matrix y = from_rows({{1, 0}, {0, 1}, {-1, 0}});
  const auto c = cosine_rows(x, y);
  ASSERT_EQ(c.size(), 3u);
  EXPECT_EQ(*c[0], 1.0);  // identical rows are exactly 1
  EXPECT_EQ(*c[1], 0.0);
  EXPECT_EQ(*c[2], -1.0);
}

TEST(CosineRows, ZeroNormRowIsUndefined) {
  const Matrix x = from_rows({{0, 0}, {1, 1}});
  const Matrix y = from_rows({{1, 1}, {1, 1}});
  const auto c = cosine_rows(x, y);
  EXPECT_FALSE(c[0].has_value());
  EXPECT_TRUE(c[1].has_value());
}

TEST(CosineRows, ScaleInvarianceProperty) {
  Xoshiro256 rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix x = random_matrix(3, 8, rng.next());
    for (double c : {1e-3, 0.5, 7.0, 250.0}) {
      Matrix y(3, 8);
      for (std::size_t i = 0; i < x.data.size(); ++i)
        y.data[i] = static_cast<float>(x.data[i] * c);
      const auto cos = cosine_rows(x, y);
      for (const auto& v : cos) EXPECT_NEAR(*v, 1.0, 1e-6);
    }
  }
}

TEST(GatedSilu, MatchesScalarDefinition) {
  const Matrix g = from_rows({{1.4142135f, -2.0f}});
  const Matrix u = from_rows({{1.4142135f, 3.0f}});
  const Matrix h = gated_silu(g, u);
  const auto silu_ref = [](double z) { return z / (1.0 + std::exp(-z)); };
  EXPECT_NEAR(h.at(0, 0), silu_ref(1.4142135) * 1.4142135, 1e-6);
  EXPECT_NEAR(h.at(0, 1), silu_ref(-2.0) * 3.0, 1e-6);
}

TEST(Kernels, BitDeterministicRepeatedRuns) {
  const Matrix a = random_matrix(12, 20, 100);
  const Matrix w = random_matrix(8, 20, 101);
  Matrix nw(1, 20);
  for (auto& v : nw.data) v = 1.0f;
  EXPECT_TRUE(bitwise_equal(linear(a, w), linear(a, w)));
  EXPECT_TRUE(bitwise_equal(softmax_rows(a), softmax_rows(a)));
  EXPECT_TRUE(bitwise_equal(rms_norm(a, nw, 1e-5f), rms_norm(a, nw, 1e-5f)));
}

}  // namespace
}  // namespace dropforge
