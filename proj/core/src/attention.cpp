#include "sbt/attention.hpp"

#include <algorithm>
#include <numeric>

#include "sbt/biprop.hpp"
#include "sbt/random.hpp"

namespace sbt {

AttentionVariant parse_attention_variant(std::string_view name) {
  std::string s(name);
  std::replace(s.begin(), s.end(), '-', '_');
  if (s == "canonical") return AttentionVariant::kCanonical;
  if (s == "step_t") return AttentionVariant::kStepT;
  if (s == "qkv_random") return AttentionVariant::kQkvRandom;
  if (s == "qkv_magnitude") return AttentionVariant::kQkvMagnitude;
  if (s == "identity") return AttentionVariant::kIdentity;
  throw ConfigError("unknown attention variant '" + std::string(name) + "'");
}

std::string to_string(AttentionVariant v) {
  switch (v) {
    case AttentionVariant::kCanonical:
      return "canonical";
    case AttentionVariant::kStepT:
      return "step_t";
    case AttentionVariant::kQkvRandom:
      return "qkv_random";
    case AttentionVariant::kQkvMagnitude:
      return "qkv_magnitude";
    case AttentionVariant::kIdentity:
      return "identity";
  }
  return "canonical";
}

Tensor build_step_t_mask(std::size_t w) {
  if (w < 2) throw ConfigError("step-T attention needs a window of at least 2 steps");
  const double ninf = -std::numeric_limits<double>::infinity();
  Tensor m(Shape{w, w}, ninf);
  for (std::size_t i = 0; i + 1 < w; ++i) m(i, i) = 0.0;
  for (std::size_t j = 0; j + 1 < w; ++j) m(w - 1, j) = 0.0;
  return m;
}

Tensor build_identity_mask(std::size_t w) {
  Tensor m(Shape{w, w}, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < w; ++i) m(i, i) = 0.0;
  return m;
}

QkvMasks sample_qkv_masks(std::size_t w, std::size_t d, double p_a, std::uint64_t seed) {
  if (!(p_a >= 0.0 && p_a < 1.0)) throw ConfigError("activation prune rate must lie in [0,1)");
  const std::size_t n = w * d;
  const std::size_t keep = kept_count(n, p_a);
  Rng rng(seed);
  QkvMasks out;
  for (auto& mask : out) {
    std::vector<std::uint32_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0u);
    // Partial Fisher-Yates: the first `keep` slots are a uniform sample.
    for (std::size_t i = 0; i < keep; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
    mask.assign(n, 0);
    for (std::size_t i = 0; i < keep; ++i) mask[idx[i]] = 1;
  }
  return out;
}

std::uint64_t fingerprint(const QkvMasks& masks) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& m : masks) {
    for (std::uint8_t b : m) {
      h ^= b;
      h *= 1099511628211ull;
    }
    h ^= 0xff;
    h *= 1099511628211ull;
  }
  return h;
}

AttentionPlan AttentionPlan::make(std::size_t heads, std::size_t d, std::size_t w, AttentionVariant variant,
                                  double activation_prune_rate, std::uint64_t mask_seed, bool scale_per_head) {
  if (heads == 0 || d % heads != 0)
    throw ConfigError("model width " + std::to_string(d) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  if (!(activation_prune_rate >= 0.0 && activation_prune_rate < 1.0))
    throw ConfigError("activation prune rate must lie in [0,1)");
  AttentionPlan p;
  p.heads = heads;
  p.d = d;
  p.w = w;
  p.variant = variant;
  p.activation_prune_rate = activation_prune_rate;
  p.scale_per_head = scale_per_head;
  if (variant == AttentionVariant::kStepT) p.step_mask = build_step_t_mask(w);
  if (variant == AttentionVariant::kIdentity) p.step_mask = build_identity_mask(w);
  if (variant == AttentionVariant::kQkvRandom) p.qkv_masks = sample_qkv_masks(w, d, activation_prune_rate, mask_seed);
  return p;
}

AttentionCoreGrads attention_core_backward(const AttentionPlan& plan, const Tensor& q, const Tensor& k,
                                           const Tensor& v, const Tensor& probs, const Tensor& g) {
  const std::size_t B = q.dim(0), w = q.dim(1), d = q.dim(2), h = plan.heads, dh = d / h;
  const double scale = plan.scale();
  AttentionCoreGrads out{Tensor(q.shape()), Tensor(k.shape()), Tensor(v.shape())};
  std::vector<double> da(w), ds(w);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t base = b * w * d;
    for (std::size_t hh = 0; hh < h; ++hh) {
      const std::size_t off = hh * dh;
      for (std::size_t i = 0; i < w; ++i) {
        const double* a = probs.data() + ((b * h + hh) * w + i) * w;
        const double* gi = g.data() + base + i * d + off;
        for (std::size_t j = 0; j < w; ++j) {
          const double* vj = v.data() + base + j * d + off;
          double acc = 0.0;
          for (std::size_t c = 0; c < dh; ++c) acc += gi[c] * vj[c];
          da[j] = acc;
          if (a[j] != 0.0) {
            double* dvj = out.dv.data() + base + j * d + off;
            for (std::size_t c = 0; c < dh; ++c) dvj[c] += a[j] * gi[c];
          }
        }
        std::fill(ds.begin(), ds.end(), 0.0);
        softmax_row_backward<double>(std::span<const double>(a, w), da, ds);
        const double* qi = q.data() + base + i * d + off;
        double* dqi = out.dq.data() + base + i * d + off;
        for (std::size_t j = 0; j < w; ++j) {
          const double s = ds[j] * scale;
          if (s == 0.0) continue;
          const double* kj = k.data() + base + j * d + off;
          double* dkj = out.dk.data() + base + j * d + off;
          for (std::size_t c = 0; c < dh; ++c) {
            dqi[c] += s * kj[c];
            dkj[c] += s * qi[c];
          }
        }
      }
    }
  }
  return out;
}

MultiHeadAttention::MultiHeadAttention(AttentionPlan plan, Linear q, Linear k, Linear v, Linear o)
    : plan_(std::move(plan)), q_(std::move(q)), k_(std::move(k)), v_(std::move(v)), o_(std::move(o)) {
  for (const Linear* l : {&q_, &k_, &v_, &o_})
    if (l->in_features() != plan_.d || l->out_features() != plan_.d)
      throw ShapeError("attention projection '" + l->id() + "' must be d x d");
}

Tensor MultiHeadAttention::forward(const Tensor& z, std::span<const std::uint8_t> key_valid) {
  qm_ = q_.forward(z);
  km_ = k_.forward(z);
  vm_ = v_.forward(z);
  if (plan_.variant == AttentionVariant::kQkvRandom) {
    apply_activation_mask<double>(qm_, plan_.qkv_masks[0]);
    apply_activation_mask<double>(km_, plan_.qkv_masks[1]);
    apply_activation_mask<double>(vm_, plan_.qkv_masks[2]);
  } else if (plan_.variant == AttentionVariant::kQkvMagnitude) {
    magnitude_masks_[0] = apply_magnitude_mask<double>(qm_, plan_.activation_prune_rate);
    magnitude_masks_[1] = apply_magnitude_mask<double>(km_, plan_.activation_prune_rate);
    magnitude_masks_[2] = apply_magnitude_mask<double>(vm_, plan_.activation_prune_rate);
  }
  key_valid_.assign(key_valid.begin(), key_valid.end());
  Tensor ctx = attention_core<double>(plan_, qm_, km_, vm_, key_valid_, &probs_);
  return o_.forward(ctx);
}

Tensor MultiHeadAttention::backward(const Tensor& g) {
  Tensor dctx = o_.backward(g);
  AttentionCoreGrads cg = attention_core_backward(plan_, qm_, km_, vm_, probs_, dctx);
  if (plan_.variant == AttentionVariant::kQkvRandom) {
    apply_activation_mask<double>(cg.dq, plan_.qkv_masks[0]);
    apply_activation_mask<double>(cg.dk, plan_.qkv_masks[1]);
    apply_activation_mask<double>(cg.dv, plan_.qkv_masks[2]);
  } else if (plan_.variant == AttentionVariant::kQkvMagnitude) {
    apply_activation_mask<double>(cg.dq, magnitude_masks_[0]);
    apply_activation_mask<double>(cg.dk, magnitude_masks_[1]);
    apply_activation_mask<double>(cg.dv, magnitude_masks_[2]);
  }
  Tensor dz = q_.backward(cg.dq);
  const Tensor dzk = k_.backward(cg.dk);
  const Tensor dzv = v_.backward(cg.dv);
  for (std::size_t i = 0; i < dz.size(); ++i) dz[i] += dzk[i] + dzv[i];
  return dz;
}

void MultiHeadAttention::collect(std::vector<GradSlot*>& out) {
  q_.collect(out);
  k_.collect(out);
  v_.collect(out);
  o_.collect(out);
}

}  // namespace sbt
