#include "sbt/adam.hpp"

#include <cmath>

namespace sbt {

void adam_step(GradSlot& slot, const AdamOptions& opt) {
  if (slot.grad.shape() != slot.value.shape())
    throw ShapeError("adam_step: gradient shape " + slot.grad.shape().str() + " differs from value shape " +
                     slot.value.shape().str());
  ++slot.step;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(slot.step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(slot.step));
  for (std::size_t i = 0; i < slot.value.size(); ++i) {
    const double g = slot.grad[i];
    slot.m[i] = opt.beta1 * slot.m[i] + (1.0 - opt.beta1) * g;
    slot.v[i] = opt.beta2 * slot.v[i] + (1.0 - opt.beta2) * g * g;
    const double mhat = slot.m[i] / c1;
    const double vhat = slot.v[i] / c2;
    slot.value[i] -= opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
  }
  slot.zero_grad();
}

}  // namespace sbt
