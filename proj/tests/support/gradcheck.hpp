#pragma once

// Central finite differences against TransformerModel::backward in FP64.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "sbt/model.hpp"

namespace sbt::testing {

struct GradCheck {
  double input_error = 0.0;  // max relative error over dL/dx
  double param_error = 0.0;  // max relative error over dense parameters
  std::size_t checked = 0;
};

/// Relative error |a-b| / max(|a|, |b|, floor); the floor keeps entries whose
/// true gradient is ~0 from dominating.
inline double rel_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// L = sum_i y_i * c_i with fixed pseudo-random weights c. Biprop score
/// slots are skipped: the mask is frozen and the loss is flat in them.
inline GradCheck check_gradients(TransformerModel& model, const Tensor& x, std::span<const std::uint8_t> valid,
                                 double h = 1e-5, std::size_t params_per_slot = 8) {
  auto weights = [](std::size_t n) {
    std::vector<double> c(n);
    for (std::size_t i = 0; i < n; ++i) c[i] = std::sin(0.37 * static_cast<double>(i) + 1.0);
    return c;
  };
  auto loss = [&](const Tensor& xx) {
    const Tensor y = model.forward(xx, valid, true);
    const auto c = weights(y.size());
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * c[i];
    return s;
  };
  const Tensor y = model.forward(x, valid, true);
  Tensor g(y.shape());
  const auto c = weights(y.size());
  std::copy(c.begin(), c.end(), g.values().begin());
  for (GradSlot* p : model.parameters()) p->zero_grad();
  const Tensor dx = model.backward(g);

  GradCheck out;
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor a = x, b = x;
    a[i] += h;
    b[i] -= h;
    out.input_error = std::max(out.input_error, rel_error((loss(a) - loss(b)) / (2 * h), dx[i]));
    ++out.checked;
  }
  std::vector<const GradSlot*> scores;
  for (const BipropLayer* b : model.biprop_modules()) scores.push_back(&b->scores());
  for (GradSlot* p : model.parameters()) {
    if (std::find(scores.begin(), scores.end(), p) != scores.end()) continue;
    const std::size_t n = std::min(p->value.size(), params_per_slot);
    for (std::size_t k = 0; k < n; ++k) {
      // Spread the probes over the slot.
      const std::size_t i = k * p->value.size() / n;
      const double keep = p->value[i];
      p->value[i] = keep + h;
      const double up = loss(x);
      p->value[i] = keep - h;
      const double down = loss(x);
      p->value[i] = keep;
      out.param_error = std::max(out.param_error, rel_error((up - down) / (2 * h), p->grad[i]));
      ++out.checked;
    }
  }
  return out;
}

}  // namespace sbt::testing
