#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "generators.hpp"
#include "sbt/attention.hpp"
#include "sbt/biprop.hpp"

using namespace sbt;
using sbt::testing::gen_size;
using sbt::testing::gen_tensor;

TEST(AttentionVariant, ParsesBothSpellings) {
  EXPECT_EQ(parse_attention_variant("step-t"), AttentionVariant::kStepT);
  EXPECT_EQ(parse_attention_variant("step_t"), AttentionVariant::kStepT);
  EXPECT_EQ(parse_attention_variant("qkv-random"), AttentionVariant::kQkvRandom);
  EXPECT_EQ(parse_attention_variant("identity"), AttentionVariant::kIdentity);
  EXPECT_THROW(parse_attention_variant("bogus"), ConfigError);
  for (auto v : {AttentionVariant::kCanonical, AttentionVariant::kStepT, AttentionVariant::kQkvRandom,
                 AttentionVariant::kQkvMagnitude, AttentionVariant::kIdentity})
    EXPECT_EQ(parse_attention_variant(to_string(v)), v);
}

TEST(StepTMask, Structure) {
  for (std::size_t w : {2u, 3u, 8u, 50u}) {
    const Tensor m = build_step_t_mask(w);
    for (std::size_t i = 0; i < w; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const bool open = (i + 1 < w) ? i == j : j + 1 < w;
        EXPECT_EQ(m(i, j) == 0.0, open) << "w=" << w << " (" << i << "," << j << ")";
      }
  }
  EXPECT_THROW(build_step_t_mask(1), ConfigError);
}

TEST(QkvMasks, ExactCountsAndDeterminism) {
  Rng rng(4);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t w = gen_size(rng, 1, 20), d = gen_size(rng, 1, 20);
    const double pa = sbt::testing::gen_prune_rate(rng);
    const std::uint64_t seed = rng.next();
    const QkvMasks a = sample_qkv_masks(w, d, pa, seed);
    for (const auto& m : a) {
      ASSERT_EQ(m.size(), w * d);
      EXPECT_EQ(std::accumulate(m.begin(), m.end(), std::size_t{0}), kept_count(w * d, pa));
    }
    EXPECT_EQ(fingerprint(a), fingerprint(sample_qkv_masks(w, d, pa, seed)));
  }
  EXPECT_NE(fingerprint(sample_qkv_masks(16, 16, 0.5, 1)), fingerprint(sample_qkv_masks(16, 16, 0.5, 2)));
}

TEST(ActivationMask, TilesOverBatch) {
  Tensor x(Shape{2, 2, 2}, 1.0);
  apply_activation_mask<double>(x, std::vector<std::uint8_t>{1, 0, 0, 1});
  EXPECT_EQ(x.storage(), (std::vector<double>{1, 0, 0, 1, 1, 0, 0, 1}));
  EXPECT_THROW(apply_activation_mask<double>(x, std::vector<std::uint8_t>{1, 0, 1}), ShapeError);
}

TEST(MagnitudeMask, KeepsTopShareEachSample) {
  Rng rng(8);
  Tensor x = gen_tensor(rng, Shape{3, 4, 5});
  const auto masks = apply_magnitude_mask<double>(x, 0.75);
  ASSERT_EQ(masks.size(), 60u);
  for (std::size_t b = 0; b < 3; ++b) {
    std::size_t nz = 0;
    for (std::size_t i = 0; i < 20; ++i) nz += x[b * 20 + i] != 0.0;
    EXPECT_EQ(nz, 5u);
  }
}

class StepTCore : public ::testing::TestWithParam<std::size_t> {};

TEST_P(StepTCore, EarlierRowsCopyValuesAndLastRowSkipsItself) {
  const std::size_t w = GetParam(), d = 6, heads = 2;
  Rng rng(w);
  const AttentionPlan plan = AttentionPlan::make(heads, d, w, AttentionVariant::kStepT, 0.0, 0);
  const Tensor q = gen_tensor(rng, Shape{2, w, d}), k = gen_tensor(rng, Shape{2, w, d}), v = gen_tensor(rng, Shape{2, w, d});
  Tensor probs;
  const Tensor out = attention_core<double>(plan, q, k, v, {}, &probs);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t t = 0; t + 1 < w; ++t)
      for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(out(b, t, c), v(b, t, c), 1e-12);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t row = ((b * heads + h) * w + (w - 1)) * w;
      EXPECT_EQ(probs[row + w - 1], 0.0);
      double s = 0.0;
      for (std::size_t j = 0; j < w; ++j) s += probs[row + j];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Windows, StepTCore, ::testing::Values(2, 3, 8, 50));

TEST(AttentionCore, IdentityReturnsValues) {
  Rng rng(6);
  const AttentionPlan plan = AttentionPlan::make(2, 4, 5, AttentionVariant::kIdentity, 0.0, 0);
  const Tensor q = gen_tensor(rng, Shape{1, 5, 4}), k = gen_tensor(rng, Shape{1, 5, 4}), v = gen_tensor(rng, Shape{1, 5, 4});
  const Tensor out = attention_core<double>(plan, q, k, v);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(out[i], v[i], 1e-15);
}

TEST(AttentionCore, PaddedKeysGetZeroWeight) {
  Rng rng(7);
  const std::size_t w = 6, d = 4;
  const AttentionPlan plan = AttentionPlan::make(1, d, w, AttentionVariant::kCanonical, 0.0, 0);
  const Tensor q = gen_tensor(rng, Shape{1, w, d}), k = gen_tensor(rng, Shape{1, w, d}), v = gen_tensor(rng, Shape{1, w, d});
  const std::vector<std::uint8_t> valid = {1, 1, 1, 0, 0, 0};
  Tensor probs;
  attention_core<double>(plan, q, k, v, valid, &probs);
  for (std::size_t i = 0; i < w; ++i)
    for (std::size_t j = 3; j < w; ++j) EXPECT_EQ(probs[i * w + j], 0.0);
}

TEST(AttentionCore, CanonicalMatchesNaiveSoftmax) {
  Rng rng(12);
  const std::size_t w = 4, d = 6, heads = 3, dh = 2;
  const AttentionPlan plan = AttentionPlan::make(heads, d, w, AttentionVariant::kCanonical, 0.0, 0);
  const Tensor q = gen_tensor(rng, Shape{1, w, d}), k = gen_tensor(rng, Shape{1, w, d}), v = gen_tensor(rng, Shape{1, w, d});
  const Tensor out = attention_core<double>(plan, q, k, v);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < w; ++i) {
      std::vector<double> s(w);
      double z = 0.0;
      for (std::size_t j = 0; j < w; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < dh; ++c) dot += q(0, i, h * dh + c) * k(0, j, h * dh + c);
        s[j] = std::exp(dot / std::sqrt(static_cast<double>(dh)));
        z += s[j];
      }
      for (std::size_t c = 0; c < dh; ++c) {
        double o = 0.0;
        for (std::size_t j = 0; j < w; ++j) o += s[j] / z * v(0, j, h * dh + c);
        EXPECT_NEAR(out(0, i, h * dh + c), o, 1e-12);
      }
    }
}

TEST(AttentionCore, BackwardMatchesFiniteDifferences) {
  Rng rng(13);
  for (auto variant : {AttentionVariant::kCanonical, AttentionVariant::kStepT}) {
    const std::size_t w = 4, d = 4;
    const AttentionPlan plan = AttentionPlan::make(2, d, w, variant, 0.0, 0);
    Tensor q = gen_tensor(rng, Shape{1, w, d}), k = gen_tensor(rng, Shape{1, w, d}), v = gen_tensor(rng, Shape{1, w, d});
    const Tensor g = gen_tensor(rng, Shape{1, w, d});
    Tensor probs;
    attention_core<double>(plan, q, k, v, {}, &probs);
    const AttentionCoreGrads grads = attention_core_backward(plan, q, k, v, probs, g);
    auto loss = [&] {
      const Tensor o = attention_core<double>(plan, q, k, v);
      double l = 0.0;
      for (std::size_t i = 0; i < o.size(); ++i) l += o[i] * g[i];
      return l;
    };
    for (auto [x, dx] : {std::pair{&q, &grads.dq}, std::pair{&k, &grads.dk}, std::pair{&v, &grads.dv}})
      for (std::size_t i = 0; i < x->size(); ++i) {
        const double keep = (*x)[i];
        (*x)[i] = keep + 1e-6;
        const double up = loss();
        (*x)[i] = keep - 1e-6;
        const double down = loss();
        (*x)[i] = keep;
        EXPECT_NEAR((*dx)[i], (up - down) / 2e-6, 1e-6);
      }
  }
}
