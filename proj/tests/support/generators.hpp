#pragma once

// Small hand-rolled generators for property tests. Each draws from an
// sbt::Rng so failures reproduce from the printed seed.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "sbt/model.hpp"
#include "sbt/random.hpp"
#include "sbt/tensor.hpp"

namespace sbt::testing {

inline std::size_t gen_size(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

inline double gen_prune_rate(Rng& rng) {
  // Mix of grid rates and arbitrary ones, including the edges.
  static constexpr double kGrid[] = {0.0, 0.25, 0.5, 0.75, 0.9, 0.99};
  if (rng.below(2)) return kGrid[rng.below(std::size(kGrid))];
  return rng.uniform(0.0, 0.999);
}

inline std::vector<double> gen_values(Rng& rng, std::size_t n, bool with_ties = false) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  if (with_ties)
    for (auto& x : v)
      if (rng.below(3) == 0) x = std::round(x * 2.0) / 2.0;
  return v;
}

template <typename T = double>
BasicTensor<T> gen_tensor(Rng& rng, Shape s, double scale = 1.0) {
  BasicTensor<T> t(s);
  for (auto& x : t.values()) x = static_cast<T>(scale * rng.normal());
  return t;
}

inline std::vector<std::uint8_t> gen_flags(Rng& rng, std::size_t n, double rate) {
  std::vector<std::uint8_t> f(n);
  for (auto& x : f) x = rng.uniform() < rate ? 1 : 0;
  return f;
}

/// Anomaly labels made of a few contiguous segments.
inline std::vector<std::uint8_t> gen_segments(Rng& rng, std::size_t n, std::size_t count, std::size_t max_len) {
  std::vector<std::uint8_t> f(n, 0);
  for (std::size_t s = 0; s < count; ++s) {
    const std::size_t begin = rng.below(n);
    const std::size_t len = 1 + rng.below(max_len);
    for (std::size_t i = begin; i < std::min(n, begin + len); ++i) f[i] = 1;
  }
  return f;
}

/// Small random model configuration of the given task.
inline ModelConfig gen_config(Rng& rng, Task task, bool dense) {
  ModelConfig c;
  c.name = "generated";
  c.task = task;
  c.heads = 1 + rng.below(2);
  c.d = c.heads * gen_size(rng, 2, 6);
  c.m = gen_size(rng, 1, 4);
  c.w = gen_size(rng, 2, 8);
  c.ff = gen_size(rng, 4, 16);
  c.layers = gen_size(rng, 1, 2);
  c.classes = task == Task::kClassification ? gen_size(rng, 2, 4) : 0;
  c.dense = dense;
  c.prune_rate = 0.25 + 0.5 * rng.uniform();
  return c;
}

/// Validity flags with at least one valid step per sample.
inline std::vector<std::uint8_t> gen_valid(Rng& rng, std::size_t batch, std::size_t w) {
  std::vector<std::uint8_t> v(batch * w, 1);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t len = 1 + rng.below(w);
    for (std::size_t t = len; t < w; ++t) v[b * w + t] = 0;
  }
  return v;
}

}  // namespace sbt::testing
