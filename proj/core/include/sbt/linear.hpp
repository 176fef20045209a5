#pragma once

#include <optional>
#include <string>
#include <vector>

#include "sbt/biprop.hpp"

namespace sbt {

/// A linear module that is either dense FP (weights + optional bias, all
/// trainable) or sparse-binary (Biprop, no bias, scores trainable).
class Linear {
 public:
  Linear() = default;
  /// Dense weights and bias drawn from U(-1/sqrt(in), 1/sqrt(in)).
  static Linear dense(std::size_t out, std::size_t in, bool bias, Rng& rng, const std::string& id);
  static Linear binary(std::size_t out, std::size_t in, const BipropLayer::Options& opt, Rng& rng,
                       const std::string& id);

  bool is_binary() const { return binary_.has_value(); }
  bool has_bias() const { return bias_.has_value(); }
  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }
  const std::string& id() const { return id_; }

  /// x (..., in) -> (..., out); caches x for backward().
  Tensor forward(const Tensor& x);
  /// Accumulates parameter gradients and returns dL/dx.
  Tensor backward(const Tensor& grad_out);

  void collect(std::vector<GradSlot*>& out);

  BipropLayer& biprop() { return *binary_; }
  const BipropLayer& biprop() const { return *binary_; }
  GradSlot& weight() { return weight_; }
  const GradSlot& weight() const { return weight_; }
  const GradSlot* bias() const { return bias_ ? &*bias_ : nullptr; }
  GradSlot* bias() { return bias_ ? &*bias_ : nullptr; }

  /// Weight matrix actually used by forward(): W for dense, W_eff for binary.
  const Tensor& current_weight() const { return binary_ ? binary_->effective() : weight_.value; }

 private:
  std::string id_;
  std::size_t in_ = 0;
  std::size_t out_ = 0;
  GradSlot weight_;
  std::optional<GradSlot> bias_;
  std::optional<BipropLayer> binary_;
  Tensor cached_input_;
};

}  // namespace sbt
