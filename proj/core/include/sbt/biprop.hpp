#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "sbt/adam.hpp"
#include "sbt/ops.hpp"
#include "sbt/random.hpp"
#include "sbt/tensor.hpp"

namespace sbt {

enum class BipropKind : std::uint8_t { kLinear, kLayerNormGain };

/// How the upstream gradient of the effective weights reaches the scores.
///  - kEffectiveWeight: dL/dS = dL/dW_eff, i.e. W_eff is treated as a free
///    parameter and the straight-through estimator bypasses both the top-k
///    selection and the sign.
///  - kMaskChain: dL/dS = dL/dW_eff * alpha * B * sign(S), the chain rule
///    through W_eff = alpha * B * M(|S|) with the identity STE on M.
enum class ScoreGradRule : std::uint8_t { kEffectiveWeight, kMaskChain };

/// Number of entries that survive pruning at rate p.
inline std::size_t kept_count(std::size_t total, double prune_rate) {
  return total - static_cast<std::size_t>(std::floor(static_cast<double>(total) * prune_rate));
}

/// Top-k mask over |scores|: the kept_count() largest magnitudes get 1; ties
/// go to the lower flat index.
std::vector<std::uint8_t> compute_mask(std::span<const double> scores, double prune_rate);

/// Mean absolute latent weight over the surviving entries; 0 when nothing
/// survives.
double compute_alpha(std::span<const double> weights, std::span<const std::uint8_t> mask);

/// Frozen sparse-binary weights: W_eff = alpha * (B .* M) with B in {-1,+1}.
struct EffectiveWeights {
  Shape shape;
  std::vector<std::uint8_t> mask;  // 1 = kept
  std::vector<std::uint8_t> sign;  // 1 = +1, 0 = -1
  float alpha = 0.0f;

  std::size_t elements() const { return mask.size(); }
  std::size_t nonzeros() const;

  template <typename T>
  BasicTensor<T> materialize() const {
    BasicTensor<T> w(shape);
    const T a = static_cast<T>(alpha);
    for (std::size_t k = 0; k < mask.size(); ++k) w[k] = mask[k] ? (sign[k] ? a : -a) : T{0};
    return w;
  }
};

/// Latent weights, trainable scores and the derived mask/sign/alpha of one
/// sparse-binary module. Latent weights are never updated; only scores train.
class BipropLayer {
 public:
  struct Options {
    double prune_rate = 0.5;
    ScoreGradRule rule = ScoreGradRule::kMaskChain;
    bool alpha_gradient = false;
  };

  BipropLayer() = default;
  /// Linear module (out x in) with Kaiming-normal weights and independently
  /// drawn scores of the same distribution.
  static BipropLayer linear(std::size_t out, std::size_t in, const Options& opt, Rng& rng, std::string id = {});
  /// Layer-norm gain vector (length d): latent weights are ones, scores are
  /// drawn from a Kaiming-normal distribution with fan-in d.
  static BipropLayer layernorm_gain(std::size_t d, const Options& opt, Rng& rng, std::string id = {});
  static BipropLayer from_tensors(BipropKind kind, Tensor weights, Tensor scores, const Options& opt,
                                  std::string id = {});

  BipropKind kind() const { return kind_; }
  const Options& options() const { return opt_; }
  double prune_rate() const { return opt_.prune_rate; }
  std::size_t out_features() const { return weights_.dim(0); }
  std::size_t in_features() const { return weights_.rank() == 2 ? weights_.dim(1) : 1; }
  std::size_t elements() const { return weights_.size(); }

  const Tensor& weights() const { return weights_; }
  GradSlot& scores() { return scores_; }
  const GradSlot& scores() const { return scores_; }

  /// Recomputes M, alpha and W_eff from the current scores.
  void refresh();
  const std::vector<std::uint8_t>& mask() const { return mask_; }
  double alpha() const { return alpha_; }
  const Tensor& effective() const { return effective_; }

  /// x (..., in) -> (..., out) through W_eff (refreshes first). Caches x.
  Tensor forward(const Tensor& x);
  /// Accumulates the score gradient, returns dL/dx.
  Tensor backward(const Tensor& grad_out);
  /// Applies the straight-through rule to a gradient already expressed with
  /// respect to W_eff (used when W_eff is a normalization gain).
  void accumulate_effective_grad(std::span<const double> grad_eff);

  /// Forward in arbitrary precision with W_eff rounded to T; no caching.
  template <typename T>
  BasicTensor<T> effective_forward(const BasicTensor<T>& x) const;

  EffectiveWeights freeze() const;

 private:
  BipropKind kind_ = BipropKind::kLinear;
  Options opt_;
  Tensor weights_;
  GradSlot scores_;
  std::vector<std::uint8_t> mask_;
  double alpha_ = 0.0;
  Tensor effective_;
  Tensor cached_input_;
  bool warned_empty_ = false;
};

/// W_eff in precision T exactly as freeze() followed by materialize<T>() would
/// produce it.
template <typename T>
BasicTensor<T> effective_weights_as(const BipropLayer& layer) {
  return layer.freeze().template materialize<T>();
}

template <typename T>
BasicTensor<T> BipropLayer::effective_forward(const BasicTensor<T>& x) const {
  const BasicTensor<T> w = effective_weights_as<T>(*this);
  if (kind_ == BipropKind::kLayerNormGain) {
    if (x.shape().back() != w.size()) throw ShapeError("gain length does not match " + x.shape().str());
    return normalize<T>(x, NormKind::kLayer, w.values(), {}, T(1e-5));
  }
  const std::size_t in = in_features(), out = out_features();
  if (x.shape().back() != in)
    throw ShapeError("biprop forward: input " + x.shape().str() + " vs weights " + weights_.shape().str());
  const std::size_t n = x.size() / in;
  Shape os = x.rank() == 3 ? Shape{x.dim(0), x.dim(1), out} : x.rank() == 2 ? Shape{x.dim(0), out} : Shape{out};
  BasicTensor<T> y(os);
  linear_nt<T>(x.values(), w.values(), y.values(), n, in, out);
  return y;
}

}  // namespace sbt
