#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "sbt/tensor.hpp"

namespace sbt {

namespace detail {

// Describes a (possibly broadcast) stack of matrices inside a rank-2/3 tensor.
struct MatrixStack {
  std::size_t batch = 1;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

inline MatrixStack as_stack(const Shape& s) {
  if (s.rank() == 2) return {1, s[0], s[1]};
  if (s.rank() == 3) return {s[0], s[1], s[2]};
  throw ShapeError("matmul operands must be rank 2 or 3, got " + s.str());
}

[[noreturn]] inline void mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + a.str() + " and " + b.str());
}

}  // namespace detail

/// Matrix product over the trailing two axes; a rank-2 operand broadcasts
/// against a rank-3 one.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const auto sa = detail::as_stack(a.shape());
  const auto sb = detail::as_stack(b.shape());
  if (sa.cols != sb.rows) detail::mismatch("matmul", a.shape(), b.shape());
  const bool a_batched = a.rank() == 3;
  const bool b_batched = b.rank() == 3;
  if (a_batched && b_batched && sa.batch != sb.batch) detail::mismatch("matmul", a.shape(), b.shape());
  const std::size_t batch = a_batched ? sa.batch : sb.batch;
  const std::size_t n = sa.rows, k = sa.cols, p = sb.cols;

  BasicTensor<T> out(a_batched || b_batched ? Shape{batch, n, p} : Shape{n, p});
  for (std::size_t bi = 0; bi < batch; ++bi) {
    const T* ap = a.data() + (a_batched ? bi * n * k : 0);
    const T* bp = b.data() + (b_batched ? bi * k * p : 0);
    T* op = out.data() + bi * n * p;
    for (std::size_t i = 0; i < n; ++i) {
      T* orow = op + i * p;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const T av = ap[i * k + kk];
        if (av == T{0}) continue;
        const T* brow = bp + kk * p;
        for (std::size_t j = 0; j < p; ++j) orow[j] += av * brow[j];
      }
    }
  }
  return out;
}

/// Gradients of sum(g * matmul(a, b)): da = g b^T, db = a^T g. A broadcast
/// operand receives the sum over the batch.
template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> matmul_backward(const BasicTensor<T>& a, const BasicTensor<T>& b,
                                                          const BasicTensor<T>& g) {
  const auto sa = detail::as_stack(a.shape());
  const auto sb = detail::as_stack(b.shape());
  const bool a_batched = a.rank() == 3;
  const bool b_batched = b.rank() == 3;
  const std::size_t batch = a_batched ? sa.batch : sb.batch;
  const std::size_t n = sa.rows, k = sa.cols, p = sb.cols;
  if (g.size() != batch * n * p) detail::mismatch("matmul_backward", a.shape(), g.shape());

  BasicTensor<T> da(a.shape());
  BasicTensor<T> db(b.shape());
  for (std::size_t bi = 0; bi < batch; ++bi) {
    const T* ap = a.data() + (a_batched ? bi * n * k : 0);
    const T* bp = b.data() + (b_batched ? bi * k * p : 0);
    const T* gp = g.data() + bi * n * p;
    T* dap = da.data() + (a_batched ? bi * n * k : 0);
    T* dbp = db.data() + (b_batched ? bi * k * p : 0);
    for (std::size_t i = 0; i < n; ++i) {
      const T* grow = gp + i * p;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const T* brow = bp + kk * p;
        T acc{0};
        for (std::size_t j = 0; j < p; ++j) acc += grow[j] * brow[j];
        dap[i * k + kk] += acc;
        const T av = ap[i * k + kk];
        T* dbrow = dbp + kk * p;
        for (std::size_t j = 0; j < p; ++j) dbrow[j] += av * grow[j];
      }
    }
  }
  return {std::move(da), std::move(db)};
}

/// y = x W^T for x (n, in) and W (out, in), the layout every linear module uses.
template <typename T>
void linear_nt(std::span<const T> x, std::span<const T> w, std::span<T> y, std::size_t n, std::size_t in,
               std::size_t out) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* xr = x.data() + i * in;
    T* yr = y.data() + i * out;
    for (std::size_t o = 0; o < out; ++o) {
      const T* wr = w.data() + o * in;
      T acc{0};
      for (std::size_t k = 0; k < in; ++k) acc += xr[k] * wr[k];
      yr[o] = acc;
    }
  }
}

/// Accumulates dx += g W and dW += g^T x for y = x W^T.
template <typename T>
void linear_nt_backward(std::span<const T> x, std::span<const T> w, std::span<const T> g, std::span<T> dx,
                        std::span<T> dw, std::size_t n, std::size_t in, std::size_t out) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* xr = x.data() + i * in;
    const T* gr = g.data() + i * out;
    T* dxr = dx.empty() ? nullptr : dx.data() + i * in;
    for (std::size_t o = 0; o < out; ++o) {
      const T go = gr[o];
      if (go == T{0}) continue;
      const T* wr = w.data() + o * in;
      if (dxr)
        for (std::size_t k = 0; k < in; ++k) dxr[k] += go * wr[k];
      if (!dw.empty()) {
        T* dwr = dw.data() + o * in;
        for (std::size_t k = 0; k < in; ++k) dwr[k] += go * xr[k];
      }
    }
  }
}

/// Softmax over one row with an optional additive mask (entries 0 or -inf).
/// A row with every entry masked yields zeros.
template <typename T>
void softmax_row(std::span<T> row, std::span<const T> mask = {}) {
  const std::size_t n = row.size();
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    if (!mask.empty()) row[j] += mask[j];
    mx = std::max(mx, row[j]);
  }
  if (mx == -std::numeric_limits<T>::infinity()) {
    std::fill(row.begin(), row.end(), T{0});
    return;
  }
  T sum{0};
  for (std::size_t j = 0; j < n; ++j) {
    const T e = row[j] == -std::numeric_limits<T>::infinity() ? T{0} : std::exp(row[j] - mx);
    row[j] = e;
    sum += e;
  }
  const T inv = T{1} / sum;
  for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
}

/// Softmax along the last axis. The mask, when given, must match the trailing
/// dimensions of x and is broadcast over the leading ones.
template <typename T>
BasicTensor<T> softmax_last(const BasicTensor<T>& x, const BasicTensor<T>* additive_mask = nullptr) {
  BasicTensor<T> y = x;
  const std::size_t n = x.shape().back();
  if (n == 0) return y;
  const std::size_t rows = x.size() / n;
  std::size_t mask_rows = 0;
  if (additive_mask) {
    if (additive_mask->shape().back() != n || x.size() % additive_mask->size() != 0)
      detail::mismatch("softmax_last", x.shape(), additive_mask->shape());
    mask_rows = additive_mask->size() / n;
  }
  for (std::size_t r = 0; r < rows; ++r) {
    std::span<T> row(y.data() + r * n, n);
    if (additive_mask)
      softmax_row<T>(row, std::span<const T>(additive_mask->data() + (r % mask_rows) * n, n));
    else
      softmax_row<T>(row);
  }
  return y;
}

/// dx for y = softmax(x) given upstream g: dx = y * (g - <y, g>).
template <typename T>
void softmax_row_backward(std::span<const T> y, std::span<const T> g, std::span<T> dx) {
  T dot{0};
  for (std::size_t j = 0; j < y.size(); ++j) dot += y[j] * g[j];
  for (std::size_t j = 0; j < y.size(); ++j) dx[j] += y[j] * (g[j] - dot);
}

template <typename T>
BasicTensor<T> softmax_last_backward(const BasicTensor<T>& y, const BasicTensor<T>& g) {
  BasicTensor<T> dx(y.shape());
  const std::size_t n = y.shape().back();
  for (std::size_t r = 0; n && r < y.size() / n; ++r)
    softmax_row_backward<T>(std::span<const T>(y.data() + r * n, n), std::span<const T>(g.data() + r * n, n),
                            std::span<T>(dx.data() + r * n, n));
  return dx;
}

enum class NormKind { kLayer, kBatch };

/// Saved state of a normalize() call; enough to run the backward pass and to
/// update batch-norm running statistics.
template <typename T>
struct NormCache {
  BasicTensor<T> xhat;
  std::vector<T> mean;     // per row (layer) or per channel (batch)
  std::vector<T> inv_std;  // same indexing as mean
  std::vector<T> var;
};

/// Layer norm standardizes each row over the last axis; batch norm
/// standardizes each channel (last axis) over all rows using the statistics of
/// the current batch. Empty gain/bias mean unit gain and zero bias.
template <typename T>
BasicTensor<T> normalize(const BasicTensor<T>& x, NormKind kind, std::span<const T> gain, std::span<const T> bias,
                         T eps = T(1e-5), NormCache<T>* cache = nullptr) {
  const std::size_t d = x.shape().back();
  const std::size_t rows = d ? x.size() / d : 0;
  if ((!gain.empty() && gain.size() != d) || (!bias.empty() && bias.size() != d))
    throw ShapeError("normalize: gain/bias length does not match feature extent " + std::to_string(d));
  const std::size_t groups = kind == NormKind::kLayer ? rows : d;
  std::vector<T> mean(groups, T{0}), var(groups, T{0});
  const T* xp = x.data();
  if (kind == NormKind::kLayer) {
    for (std::size_t r = 0; r < rows; ++r) {
      T m{0};
      for (std::size_t j = 0; j < d; ++j) m += xp[r * d + j];
      m /= static_cast<T>(d);
      T v{0};
      for (std::size_t j = 0; j < d; ++j) v += (xp[r * d + j] - m) * (xp[r * d + j] - m);
      mean[r] = m;
      var[r] = v / static_cast<T>(d);
    }
  } else {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < d; ++j) mean[j] += xp[r * d + j];
    for (std::size_t j = 0; j < d; ++j) mean[j] /= static_cast<T>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < d; ++j) var[j] += (xp[r * d + j] - mean[j]) * (xp[r * d + j] - mean[j]);
    for (std::size_t j = 0; j < d; ++j) var[j] /= static_cast<T>(rows);
  }
  std::vector<T> inv_std(groups);
  for (std::size_t g = 0; g < groups; ++g) inv_std[g] = T{1} / std::sqrt(var[g] + eps);

  BasicTensor<T> xhat(x.shape());
  BasicTensor<T> y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < d; ++j) {
      const std::size_t g = kind == NormKind::kLayer ? r : j;
      const T h = (xp[r * d + j] - mean[g]) * inv_std[g];
      xhat[r * d + j] = h;
      y[r * d + j] = h * (gain.empty() ? T{1} : gain[j]) + (bias.empty() ? T{0} : bias[j]);
    }
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->mean = std::move(mean);
    cache->inv_std = std::move(inv_std);
    cache->var = std::move(var);
  }
  return y;
}

/// Batch norm at inference: per-channel affine map with fixed statistics.
template <typename T>
BasicTensor<T> normalize_with_stats(const BasicTensor<T>& x, std::span<const T> mean, std::span<const T> var,
                                    std::span<const T> gain, std::span<const T> bias, T eps = T(1e-5)) {
  const std::size_t d = x.shape().back();
  if (mean.size() != d || var.size() != d) throw ShapeError("normalize_with_stats: statistics length mismatch");
  BasicTensor<T> y(x.shape());
  for (std::size_t r = 0; d && r < x.size() / d; ++r)
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (x[r * d + j] - mean[j]) / std::sqrt(var[j] + eps);
      y[r * d + j] = h * (gain.empty() ? T{1} : gain[j]) + (bias.empty() ? T{0} : bias[j]);
    }
  return y;
}

template <typename T>
struct NormGrads {
  BasicTensor<T> dx;
  std::vector<T> dgain;
  std::vector<T> dbias;
};

template <typename T>
NormGrads<T> normalize_backward(const NormCache<T>& cache, NormKind kind, std::span<const T> gain,
                                const BasicTensor<T>& g) {
  const std::size_t d = g.shape().back();
  const std::size_t rows = d ? g.size() / d : 0;
  NormGrads<T> out{BasicTensor<T>(g.shape()), std::vector<T>(d, T{0}), std::vector<T>(d, T{0})};
  // dxhat = g * gain
  std::vector<T> dxhat(g.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) {
      const T gv = g[r * d + j];
      out.dgain[j] += gv * cache.xhat[r * d + j];
      out.dbias[j] += gv;
      dxhat[r * d + j] = gv * (gain.empty() ? T{1} : gain[j]);
    }
  if (kind == NormKind::kLayer) {
    for (std::size_t r = 0; r < rows; ++r) {
      T s1{0}, s2{0};
      for (std::size_t j = 0; j < d; ++j) {
        s1 += dxhat[r * d + j];
        s2 += dxhat[r * d + j] * cache.xhat[r * d + j];
      }
      const T inv_n = T{1} / static_cast<T>(d);
      for (std::size_t j = 0; j < d; ++j)
        out.dx[r * d + j] =
            cache.inv_std[r] * (dxhat[r * d + j] - inv_n * s1 - cache.xhat[r * d + j] * inv_n * s2);
    }
  } else {
    std::vector<T> s1(d, T{0}), s2(d, T{0});
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < d; ++j) {
        s1[j] += dxhat[r * d + j];
        s2[j] += dxhat[r * d + j] * cache.xhat[r * d + j];
      }
    const T inv_n = T{1} / static_cast<T>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < d; ++j)
        out.dx[r * d + j] =
            cache.inv_std[j] * (dxhat[r * d + j] - inv_n * s1[j] - cache.xhat[r * d + j] * inv_n * s2[j]);
  }
  return out;
}

/// 0/1 mask keeping the `keep` largest magnitudes; ties go to the lower index.
template <typename T>
std::vector<std::uint8_t> magnitude_topk_mask(std::span<const T> values, std::size_t keep) {
  const std::size_t n = values.size();
  std::vector<std::uint8_t> mask(n, 0);
  if (keep >= n) {
    std::fill(mask.begin(), mask.end(), std::uint8_t{1});
    return mask;
  }
  if (keep == 0) return mask;
  std::vector<std::uint32_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<std::uint32_t>(i);
  auto before = [&](std::uint32_t a, std::uint32_t b) {
    const T ma = std::abs(values[a]), mb = std::abs(values[b]);
    return ma > mb || (ma == mb && a < b);
  };
  std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep - 1), order.end(), before);
  for (std::size_t i = 0; i < keep; ++i) mask[order[i]] = 1;
  return mask;
}

template <typename T>
void relu_inplace(BasicTensor<T>& x) {
  for (auto& v : x.values()) v = v > T{0} ? v : T{0};
}

}  // namespace sbt
