#pragma once

#include <cstdint>
#include <string>

#include "sbt/tensor.hpp"

namespace sbt {

/// A trainable parameter together with its gradient and Adam moments.
struct GradSlot {
  std::string id;
  Tensor value;
  Tensor grad;
  Tensor m;
  Tensor v;
  std::int64_t step = 0;

  GradSlot() = default;
  GradSlot(std::string name, Tensor init)
      : id(std::move(name)), value(std::move(init)), grad(value.shape()), m(value.shape()), v(value.shape()) {}

  void zero_grad() { grad.fill(0.0); }
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update; clears the gradient afterwards.
void adam_step(GradSlot& slot, const AdamOptions& opt = {});

}  // namespace sbt
