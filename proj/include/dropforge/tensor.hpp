#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dropforge/errors.hpp"
#include "dropforge/parallel.hpp"

// Numeric kernels are pinned to a single code generation site. Inlined
// copies could be optimized differently per caller (contraction,
// vectorization), and the library promises that equal inputs give
// bit-equal outputs no matter which code path asks.
#if defined(__GNUC__) || defined(__clang__)
#define DROPFORGE_NOINLINE __attribute__((noinline))
#else
#define DROPFORGE_NOINLINE
#endif

namespace dropforge {

using index_t = std::int64_t;

// Dense row-major matrix. The scalar type is a template parameter so the
// same kernels serve the f32 inference path and the f64 oracle paths.
template <typename T>
struct MatrixT {
  index_t rows = 0;
  index_t cols = 0;
  std::vector<T> data;

  MatrixT() = default;
  MatrixT(index_t r, index_t c) : rows(r), cols(c), data(static_cast<std::size_t>(r * c), T(0)) {
    if (r < 0 || c < 0) throw ShapeError("negative matrix dimension");
  }

  T& at(index_t r, index_t c) { return data[static_cast<std::size_t>(r * cols + c)]; }
  const T& at(index_t r, index_t c) const { return data[static_cast<std::size_t>(r * cols + c)]; }

  std::span<T> row(index_t r) { return {data.data() + r * cols, static_cast<std::size_t>(cols)}; }
  std::span<const T> row(index_t r) const {
    return {data.data() + r * cols, static_cast<std::size_t>(cols)};
  }

  index_t numel() const { return rows * cols; }
  bool same_shape(const MatrixT& o) const { return rows == o.rows && cols == o.cols; }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }
};

using Matrix = MatrixT<float>;

namespace detail {

// Dot product with four independent accumulators. The lane structure is
// fixed, so results are reproducible run to run and thread count has no
// effect on the value of any output element.
template <typename T>
DROPFORGE_NOINLINE T dot4(const T* a, const T* b, index_t n) {
  T acc0 = 0, acc1 = 0, acc2 = 0, acc3 = 0;
  index_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc0 += a[i] * b[i];
    acc1 += a[i + 1] * b[i + 1];
    acc2 += a[i + 2] * b[i + 2];
    acc3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) acc0 += a[i] * b[i];
  return ((acc0 + acc1) + acc2) + acc3;
}

}  // namespace detail

template <typename T>
DROPFORGE_NOINLINE MatrixT<T> matmul(const MatrixT<T>& a, const MatrixT<T>& b) {
  if (a.cols != b.rows)
    throw ShapeError("matmul: inner dimensions differ (" + std::to_string(a.cols) + " vs " +
                     std::to_string(b.rows) + ")");
  MatrixT<T> out(a.rows, b.cols);
  const index_t inner = a.cols;
  const index_t bc = b.cols;
  parallel_for(a.rows, std::max<index_t>(1, 16384 / std::max<index_t>(1, inner * bc)),
               [&](index_t r0, index_t r1) {
                 for (index_t i = r0; i < r1; ++i) {
                   T* out_row = out.data.data() + i * bc;
                   const T* a_row = a.data.data() + i * inner;
                   for (index_t k = 0; k < inner; ++k) {
                     const T aik = a_row[k];
                     const T* b_row = b.data.data() + k * bc;
                     for (index_t j = 0; j < bc; ++j) out_row[j] += aik * b_row[j];
                   }
                 }
               });
  return out;
}

// y = x * transpose(w) with w stored as (out_features, in_features), the
// layout projection weights use on disk. Hot path of every forward.
template <typename T>
DROPFORGE_NOINLINE MatrixT<T> linear(const MatrixT<T>& x, const MatrixT<T>& w) {
  if (x.cols != w.cols)
    throw ShapeError("linear: feature dimensions differ (" + std::to_string(x.cols) + " vs " +
                     std::to_string(w.cols) + ")");
  MatrixT<T> out(x.rows, w.rows);
  const index_t in = x.cols;
  const index_t outc = w.rows;
  parallel_for(x.rows, std::max<index_t>(1, 32768 / std::max<index_t>(1, in * outc)),
               [&](index_t r0, index_t r1) {
                 for (index_t i = r0; i < r1; ++i) {
                   const T* xi = x.data.data() + i * in;
                   T* oi = out.data.data() + i * outc;
                   for (index_t o = 0; o < outc; ++o)
                     oi[o] = detail::dot4(xi, w.data.data() + o * in, in);
                 }
               });
  return out;
}

template <typename T>
MatrixT<T> transpose(const MatrixT<T>& a) {
  MatrixT<T> out(a.cols, a.rows);
  for (index_t i = 0; i < a.rows; ++i)
    for (index_t j = 0; j < a.cols; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

template <typename T>
DROPFORGE_NOINLINE MatrixT<T> add(const MatrixT<T>& a, const MatrixT<T>& b) {
  if (!a.same_shape(b)) throw ShapeError("add: shape mismatch");
  MatrixT<T> out(a.rows, a.cols);
  for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] + b.data[i];
  return out;
}

// Row-wise softmax, stabilized by subtracting the row maximum.
template <typename T>
DROPFORGE_NOINLINE MatrixT<T> softmax_rows(const MatrixT<T>& a) {
  MatrixT<T> out(a.rows, a.cols);
  for (index_t i = 0; i < a.rows; ++i) {
    const T* src = a.data.data() + i * a.cols;
    T* dst = out.data.data() + i * a.cols;
    if (a.cols == 0) continue;
    T mx = src[0];
    for (index_t j = 1; j < a.cols; ++j) mx = std::max(mx, src[j]);
    T sum = 0;
    for (index_t j = 0; j < a.cols; ++j) {
      dst[j] = std::exp(src[j] - mx);
      sum += dst[j];
    }
    for (index_t j = 0; j < a.cols; ++j) dst[j] /= sum;
  }
  return out;
}

// Root-mean-square normalization: row -> row / sqrt(mean(row^2) + eps),
// scaled elementwise by weight. The weight tensor may be stored 1 x d.
template <typename T>
DROPFORGE_NOINLINE MatrixT<T> rms_norm(const MatrixT<T>& x, const MatrixT<T>& weight, T eps) {
  if (weight.numel() != x.cols)
    throw ShapeError("rms_norm: weight length " + std::to_string(weight.numel()) +
                     " != row width " + std::to_string(x.cols));
  if (eps < T(0)) throw ShapeError("rms_norm: negative eps");
  MatrixT<T> out(x.rows, x.cols);
  const T* w = weight.data.data();
  for (index_t i = 0; i < x.rows; ++i) {
    const T* src = x.data.data() + i * x.cols;
    T* dst = out.data.data() + i * x.cols;
    T ss = 0;
    for (index_t j = 0; j < x.cols; ++j) ss += src[j] * src[j];
    const T inv = T(1) / std::sqrt(ss / static_cast<T>(x.cols) + eps);
    for (index_t j = 0; j < x.cols; ++j) dst[j] = src[j] * inv * w[j];
  }
  return out;
}

template <typename T>
T silu(T z) {
  return z / (T(1) + std::exp(-z));
}

// silu(gate) * up, elementwise. The nonlinearity of the gated MLP.
template <typename T>
DROPFORGE_NOINLINE MatrixT<T> gated_silu(const MatrixT<T>& gate, const MatrixT<T>& up) {
  if (!gate.same_shape(up)) throw ShapeError("gated_silu: shape mismatch");
  MatrixT<T> out(gate.rows, gate.cols);
  for (std::size_t i = 0; i < gate.data.size(); ++i)
    out.data[i] = silu(gate.data[i]) * up.data[i];
  return out;
}

// Per-row cosine between corresponding rows of x and y, accumulated in
// double. A row whose x or y has exactly zero norm has no defined cosine
// and is reported as nullopt; callers decide how to count those.
//
// The denominator is sqrt(nx * ny) in one square root so that bitwise
// identical rows produce exactly 1.0.
template <typename T>
std::vector<std::optional<double>> cosine_rows(const MatrixT<T>& x, const MatrixT<T>& y) {
  if (!x.same_shape(y)) throw ShapeError("cosine_rows: shape mismatch");
  std::vector<std::optional<double>> out(static_cast<std::size_t>(x.rows));
  for (index_t i = 0; i < x.rows; ++i) {
    const T* xr = x.data.data() + i * x.cols;
    const T* yr = y.data.data() + i * x.cols;
    double dot = 0.0, nx = 0.0, ny = 0.0;
    for (index_t j = 0; j < x.cols; ++j) {
      const double a = static_cast<double>(xr[j]);
      const double b = static_cast<double>(yr[j]);
      dot += a * b;
      nx += a * a;
      ny += b * b;
    }
    if (nx == 0.0 || ny == 0.0) {
      out[static_cast<std::size_t>(i)] = std::nullopt;
      continue;
    }
    double c = dot / std::sqrt(nx * ny);
    c = std::min(1.0, std::max(-1.0, c));
    out[static_cast<std::size_t>(i)] = c;
  }
  return out;
}

}  // namespace dropforge
