#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sbt/linear.hpp"
#include "sbt/ops.hpp"
#include "sbt/tensor.hpp"

namespace sbt {

enum class AttentionVariant : std::uint8_t { kCanonical, kStepT, kQkvRandom, kQkvMagnitude, kIdentity };

/// Accepts both "step_t" and "step-t" spellings.
AttentionVariant parse_attention_variant(std::string_view name);
std::string to_string(AttentionVariant v);

/// Additive (w, w) mask: rows 0..w-2 see only themselves, row w-1 sees every
/// earlier step but not itself.
Tensor build_step_t_mask(std::size_t w);
/// Additive (w, w) mask with only the diagonal unmasked.
Tensor build_identity_mask(std::size_t w);

/// Fixed element-wise masks over (w, d) for the query, key and value
/// projections, in that order.
using QkvMasks = std::array<std::vector<std::uint8_t>, 3>;

/// Each mask keeps exactly kept_count(w*d, p_a) entries, drawn uniformly
/// without replacement.
QkvMasks sample_qkv_masks(std::size_t w, std::size_t d, double p_a, std::uint64_t seed);
std::uint64_t fingerprint(const QkvMasks& masks);

/// x *= mask, where mask covers the trailing (w, d) extent of x and is
/// repeated over the batch axis.
template <typename T>
void apply_activation_mask(BasicTensor<T>& x, std::span<const std::uint8_t> mask) {
  if (mask.empty() || x.size() % mask.size() != 0)
    throw ShapeError("activation mask of " + std::to_string(mask.size()) + " entries does not tile " +
                     x.shape().str());
  const std::size_t n = mask.size();
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!mask[i % n]) x[i] = T{0};
}

/// Per sample, keeps the top (1 - p_a) share of |x| over (w, d) and zeroes the
/// rest. Returns the concatenated per-sample masks.
template <typename T>
std::vector<std::uint8_t> apply_magnitude_mask(BasicTensor<T>& x, double p_a) {
  const std::size_t per = x.rank() == 3 ? x.dim(1) * x.dim(2) : x.size();
  std::vector<std::uint8_t> all;
  all.reserve(x.size());
  for (std::size_t b = 0; per && b < x.size() / per; ++b) {
    std::span<T> s(x.data() + b * per, per);
    const std::size_t keep = per - static_cast<std::size_t>(std::floor(static_cast<double>(per) * p_a));
    auto m = magnitude_topk_mask<T>(std::span<const T>(s.data(), per), keep);
    for (std::size_t i = 0; i < per; ++i)
      if (!m[i]) s[i] = T{0};
    all.insert(all.end(), m.begin(), m.end());
  }
  return all;
}

struct AttentionPlan {
  std::size_t heads = 2;
  std::size_t d = 0;
  std::size_t w = 0;
  AttentionVariant variant = AttentionVariant::kCanonical;
  double activation_prune_rate = 0.0;
  bool scale_per_head = true;  // 1/sqrt(d') when set, 1/sqrt(d) otherwise
  Tensor step_mask;            // (w, w) for step_t and identity, else empty
  QkvMasks qkv_masks;          // filled for qkv_random only

  static AttentionPlan make(std::size_t heads, std::size_t d, std::size_t w, AttentionVariant variant,
                            double activation_prune_rate, std::uint64_t mask_seed, bool scale_per_head = true);

  std::size_t head_dim() const { return d / heads; }
  double scale() const { return 1.0 / std::sqrt(static_cast<double>(scale_per_head ? head_dim() : d)); }
};

/// Scaled dot-product attention over pre-projected q, k, v of shape (B, w, d).
/// key_valid (B*w flags, optional) masks padded keys. When probs is given it
/// receives the attention weights as (B*h, w, w).
template <typename T>
BasicTensor<T> attention_core(const AttentionPlan& plan, const BasicTensor<T>& q, const BasicTensor<T>& k,
                              const BasicTensor<T>& v, std::span<const std::uint8_t> key_valid = {},
                              BasicTensor<T>* probs = nullptr) {
  if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape())
    throw ShapeError("attention: q/k/v shapes " + q.shape().str() + " " + k.shape().str() + " " + v.shape().str());
  const std::size_t B = q.dim(0), w = q.dim(1), d = q.dim(2), h = plan.heads;
  if (d != plan.d || d % h != 0) throw ShapeError("attention: width " + std::to_string(d) + " does not match plan");
  if (!plan.step_mask.empty() && plan.step_mask.dim(0) != w)
    throw ShapeError("attention: step mask built for w=" + std::to_string(plan.step_mask.dim(0)));
  if (!key_valid.empty() && key_valid.size() != B * w) throw ShapeError("attention: key mask length mismatch");
  const std::size_t dh = d / h;
  const T scale = static_cast<T>(plan.scale());
  const T ninf = -std::numeric_limits<T>::infinity();

  BasicTensor<T> out(q.shape());
  if (probs) *probs = BasicTensor<T>(Shape{B * h, w, w});
  std::vector<T> row(w), mask(w);
  for (std::size_t b = 0; b < B; ++b) {
    const T* qb = q.data() + b * w * d;
    const T* kb = k.data() + b * w * d;
    const T* vb = v.data() + b * w * d;
    T* ob = out.data() + b * w * d;
    for (std::size_t hh = 0; hh < h; ++hh) {
      const std::size_t off = hh * dh;
      for (std::size_t i = 0; i < w; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
          T m{0};
          if (!plan.step_mask.empty() && plan.step_mask(i, j) != 0.0) m = ninf;
          if (!key_valid.empty() && !key_valid[b * w + j]) m = ninf;
          mask[j] = m;
          if (m == ninf) {
            row[j] = T{0};
            continue;
          }
          T s{0};
          for (std::size_t c = 0; c < dh; ++c) s += qb[i * d + off + c] * kb[j * d + off + c];
          row[j] = s * scale;
        }
        softmax_row<T>(std::span<T>(row), std::span<const T>(mask));
        if (probs) std::copy(row.begin(), row.end(), probs->data() + ((b * h + hh) * w + i) * w);
        T* orow = ob + i * d + off;
        for (std::size_t j = 0; j < w; ++j) {
          const T a = row[j];
          if (a == T{0}) continue;
          const T* vr = vb + j * d + off;
          for (std::size_t c = 0; c < dh; ++c) orow[c] += a * vr[c];
        }
      }
    }
  }
  return out;
}

struct AttentionCoreGrads {
  Tensor dq, dk, dv;
};

AttentionCoreGrads attention_core_backward(const AttentionPlan& plan, const Tensor& q, const Tensor& k,
                                           const Tensor& v, const Tensor& probs, const Tensor& grad_out);

/// Trainable multi-head self-attention: projections, activation masks, core
/// attention and the output projection.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(AttentionPlan plan, Linear q, Linear k, Linear v, Linear o);

  /// z (B, w, d) -> (B, w, d).
  Tensor forward(const Tensor& z, std::span<const std::uint8_t> key_valid = {});
  Tensor backward(const Tensor& grad_out);
  void collect(std::vector<GradSlot*>& out);

  const AttentionPlan& plan() const { return plan_; }
  Linear& q() { return q_; }
  Linear& k() { return k_; }
  Linear& v() { return v_; }
  Linear& o() { return o_; }
  const Linear& q() const { return q_; }
  const Linear& k() const { return k_; }
  const Linear& v() const { return v_; }
  const Linear& o() const { return o_; }
  /// Attention weights of the last forward pass, (B*h, w, w).
  const Tensor& last_probs() const { return probs_; }

 private:
  AttentionPlan plan_;
  Linear q_, k_, v_, o_;
  Tensor qm_, km_, vm_, probs_;
  QkvMasks magnitude_masks_;
  std::vector<std::uint8_t> key_valid_;
};

}  // namespace sbt
