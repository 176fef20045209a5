#include "sbt/biprop.hpp"

#include <algorithm>
#include <cmath>

#include "sbt/log.hpp"

namespace sbt {

std::vector<std::uint8_t> compute_mask(std::span<const double> scores, double prune_rate) {
  if (scores.empty()) throw ShapeError("compute_mask: empty score tensor");
  if (!(prune_rate >= 0.0 && prune_rate < 1.0))
    throw ConfigError("prune rate must lie in [0,1), got " + std::to_string(prune_rate));
  return magnitude_topk_mask<double>(scores, kept_count(scores.size(), prune_rate));
}

double compute_alpha(std::span<const double> weights, std::span<const std::uint8_t> mask) {
  if (weights.size() != mask.size()) throw ShapeError("compute_alpha: weights and mask differ in size");
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    if (!mask[k]) continue;
    sum += std::abs(weights[k]);
    ++count;
  }
  return count ? sum / static_cast<double>(count) : 0.0;
}

std::size_t EffectiveWeights::nonzeros() const {
  if (alpha == 0.0f) return 0;
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

BipropLayer BipropLayer::linear(std::size_t out, std::size_t in, const Options& opt, Rng& rng, std::string id) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(in));
  Tensor w(Shape{out, in});
  Tensor s(Shape{out, in});
  for (auto& v : w.values()) v = rng.normal(0.0, stddev);
  for (auto& v : s.values()) v = rng.normal(0.0, stddev);
  return from_tensors(BipropKind::kLinear, std::move(w), std::move(s), opt, std::move(id));
}

BipropLayer BipropLayer::layernorm_gain(std::size_t d, const Options& opt, Rng& rng, std::string id) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(d));
  Tensor w(Shape{d}, 1.0);
  Tensor s(Shape{d});
  for (auto& v : s.values()) v = rng.normal(0.0, stddev);
  return from_tensors(BipropKind::kLayerNormGain, std::move(w), std::move(s), opt, std::move(id));
}

BipropLayer BipropLayer::from_tensors(BipropKind kind, Tensor weights, Tensor scores, const Options& opt,
                                      std::string id) {
  if (weights.shape() != scores.shape())
    throw ShapeError("scores " + scores.shape().str() + " must match weights " + weights.shape().str());
  if (!(opt.prune_rate >= 0.0 && opt.prune_rate < 1.0))
    throw ConfigError("prune rate must lie in [0,1), got " + std::to_string(opt.prune_rate));
  BipropLayer layer;
  layer.kind_ = kind;
  layer.opt_ = opt;
  layer.weights_ = std::move(weights);
  layer.scores_ = GradSlot(id.empty() ? std::string("scores") : std::move(id), std::move(scores));
  layer.refresh();
  return layer;
}

void BipropLayer::refresh() {
  mask_ = compute_mask(scores_.value.values(), opt_.prune_rate);
  alpha_ = compute_alpha(weights_.values(), mask_);
  if (alpha_ == 0.0 && !warned_empty_) {
    warn("biprop module '" + scores_.id + "' has no surviving weight; its output is identically zero");
    warned_empty_ = true;
  }
  effective_ = Tensor(weights_.shape());
  for (std::size_t k = 0; k < mask_.size(); ++k)
    effective_[k] = mask_[k] ? (weights_[k] >= 0.0 ? alpha_ : -alpha_) : 0.0;
}

Tensor BipropLayer::forward(const Tensor& x) {
  if (kind_ != BipropKind::kLinear) throw ShapeError("forward() applies to linear biprop modules only");
  const std::size_t in = in_features(), out = out_features();
  if (x.shape().back() != in)
    throw ShapeError("biprop forward: input " + x.shape().str() + " vs weights " + weights_.shape().str());
  refresh();
  cached_input_ = x;
  const std::size_t n = x.size() / in;
  Shape os = x.rank() == 3 ? Shape{x.dim(0), x.dim(1), out} : x.rank() == 2 ? Shape{x.dim(0), out} : Shape{out};
  Tensor y(os);
  linear_nt<double>(x.values(), effective_.values(), y.values(), n, in, out);
  return y;
}

Tensor BipropLayer::backward(const Tensor& grad_out) {
  const std::size_t in = in_features(), out = out_features();
  const std::size_t n = cached_input_.size() / in;
  if (grad_out.size() != n * out) throw ShapeError("biprop backward: gradient " + grad_out.shape().str());
  Tensor dx(cached_input_.shape());
  Tensor dw(weights_.shape());
  linear_nt_backward<double>(cached_input_.values(), effective_.values(), grad_out.values(), dx.values(),
                             dw.values(), n, in, out);
  accumulate_effective_grad(dw.values());
  return dx;
}

void BipropLayer::accumulate_effective_grad(std::span<const double> g) {
  if (g.size() != weights_.size()) throw ShapeError("effective gradient length mismatch");
  const std::size_t n = g.size();
  double dalpha = 0.0;
  std::size_t kept = 0;
  if (opt_.alpha_gradient) {
    for (std::size_t k = 0; k < n; ++k) {
      if (!mask_[k]) continue;
      dalpha += g[k] * (weights_[k] >= 0.0 ? 1.0 : -1.0);
      ++kept;
    }
  }
  for (std::size_t k = 0; k < n; ++k) {
    const double b = weights_[k] >= 0.0 ? 1.0 : -1.0;
    const double s_sign = scores_.value[k] >= 0.0 ? 1.0 : -1.0;
    double gs = 0.0;
    switch (opt_.rule) {
      case ScoreGradRule::kEffectiveWeight:
        gs = g[k];
        break;
      case ScoreGradRule::kMaskChain:
        gs = g[k] * alpha_ * b * s_sign;
        break;
    }
    if (opt_.alpha_gradient && kept > 0) {
      // d alpha / d M_k = (|W_k| - alpha) / ||M||_1 with the identity STE on M.
      double ga = dalpha * (std::abs(weights_[k]) - alpha_) / static_cast<double>(kept);
      if (opt_.rule == ScoreGradRule::kMaskChain) ga *= s_sign;
      gs += ga;
    }
    scores_.grad[k] += gs;
  }
}

EffectiveWeights BipropLayer::freeze() const {
  EffectiveWeights e;
  e.shape = weights_.shape();
  // Recomputed from the scores so an optimizer step after the last forward
  // pass is reflected.
  e.mask = compute_mask(scores_.value.values(), opt_.prune_rate);
  e.sign.resize(weights_.size());
  for (std::size_t k = 0; k < weights_.size(); ++k) e.sign[k] = weights_[k] >= 0.0 ? 1 : 0;
  e.alpha = static_cast<float>(compute_alpha(weights_.values(), e.mask));
  return e;
}

}  // namespace sbt
