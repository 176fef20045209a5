#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "generators.hpp"
#include "gradcheck.hpp"
#include "sbt/model.hpp"

using namespace sbt;
using sbt::testing::gen_config;
using sbt::testing::gen_tensor;
using sbt::testing::gen_valid;

namespace {

struct PaperParams {
  double dense_k;   // FP32 params, thousands
  double binary_k;  // binary params, thousands
};

// Dense and SBT parameter columns of the published cost table.
const std::map<std::string, PaperParams> kPaperParams = {
    {"heartbeat", {169.6, 102.3}}, {"insect_wingbeats", {555.5, 420.1}}, {"arabic_digits", {167.1, 100.0}},
    {"japanese_vowels", {75.5, 41.6}}, {"face_detection", {414.9, 281.3}}, {"msl", {223.7, 221.5}},
    {"smap", {75.2, 73.7}},        {"smd", {132.8, 129.8}},             {"ecl", {1569.4, 1563.9}},
    {"weather", {188.0, 185.6}},   {"ettm1", {102.0, 100.0}},
};

}  // namespace

TEST(Presets, AllElevenShip) {
  const auto names = preset_names();
  EXPECT_EQ(names.size(), 11u);
  for (const auto& [name, _] : kPaperParams) EXPECT_NE(std::find(names.begin(), names.end(), name), names.end()) << name;
  EXPECT_THROW(preset_document("nope"), ConfigError);
}

TEST(Census, MatchesPublishedParamsWithinFivePercent) {
  for (const auto& [name, paper] : kPaperParams) {
    const Census dense = count_params(preset_config(name, true));
    const Census sbt = count_params(preset_config(name, false));
    EXPECT_NEAR(dense.fp32_params() / 1e3, paper.dense_k, 0.05 * paper.dense_k) << name;
    EXPECT_NEAR(sbt.binary_params() / 1e3, paper.binary_k, 0.05 * paper.binary_k) << name;
  }
}

TEST(Census, ExactCountsForSmd) {
  // m=38, w=200, d=76, ff=256, two layers, no norm, dense biases everywhere.
  const std::size_t m = 38, d = 76, ff = 256;
  const std::size_t per_layer = 4 * (d * d + d) + (ff * d + ff) + (d * ff + d);
  const std::size_t dense = (d * m + d) + 2 * per_layer + (m * d + m);
  EXPECT_EQ(count_params(preset_config("smd", true)).fp32_params(), dense);
  const Census sbt = count_params(preset_config("smd", false));
  EXPECT_EQ(sbt.binary_params(), d * m + 2 * (4 * d * d + 2 * ff * d) + m * d);
  EXPECT_EQ(sbt.fp32_params(), 0u);
  EXPECT_EQ(sbt.alpha_count(), 14u);
}

TEST(Census, ModuleCountPerTask) {
  EXPECT_EQ(count_params(preset_config("smd", false)).binarized_modules(), 14u);
  EXPECT_EQ(count_params(preset_config("ecl", false)).binarized_modules(), 18u);  // plus four LN gains
  EXPECT_EQ(count_params(preset_config("heartbeat", false)).binarized_modules(), 14u);
}

TEST(Census, AgreesWithInstantiatedModel) {
  Rng rng(21);
  for (int trial = 0; trial < 30; ++trial) {
    ModelConfig c = gen_config(rng, static_cast<Task>(trial % 3), trial % 2 == 0);
    TransformerModel model(c, trial);
    const Census census = count_params(c);
    EXPECT_EQ(model.parameter_count(), census.fp32_params() + census.binary_params()) << c.to_json().dump();
  }
}

TEST(ModelConfig, ResolvedDefaults) {
  ModelConfig c = preset_config("heartbeat", false).resolved();
  EXPECT_EQ(*c.attention, AttentionVariant::kQkvRandom);
  EXPECT_EQ(*c.norm, NormPolicy::kBatch);
  EXPECT_EQ(*c.pos, PosEncoding::kSinusoidal);
  EXPECT_DOUBLE_EQ(*c.activation_prune_rate, 0.5);
  c = preset_config("heartbeat", true).resolved();
  EXPECT_EQ(*c.attention, AttentionVariant::kCanonical);
  EXPECT_EQ(*c.pos, PosEncoding::kLearnable);
  EXPECT_DOUBLE_EQ(*c.activation_prune_rate, 0.0);
  c = preset_config("smd", false).resolved();
  EXPECT_EQ(*c.attention, AttentionVariant::kStepT);
  EXPECT_EQ(*c.norm, NormPolicy::kNone);
  EXPECT_EQ(*preset_config("ecl", false).resolved().norm, NormPolicy::kLayer);
}

TEST(ModelConfig, JsonRoundTrip) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    ModelConfig c = gen_config(rng, static_cast<Task>(trial % 3), trial % 2 == 1).resolved();
    const ModelConfig back = ModelConfig::from_json(c.to_json());
    EXPECT_EQ(back.to_json(), c.to_json());
  }
}

TEST(ModelConfig, ValidationErrors) {
  ModelConfig c = preset_config("smd", false);
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = preset_config("heartbeat", false);
  c.classes = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = preset_config("smd", false);
  c.prune_rate = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(TransformerModel, OutputShapes) {
  Rng rng(1);
  for (int t = 0; t < 3; ++t) {
    ModelConfig c = gen_config(rng, static_cast<Task>(t), false);
    TransformerModel model(c, 1);
    const Tensor y = model.forward(gen_tensor(rng, Shape{3, c.w, c.m}), {}, false);
    if (c.task == Task::kClassification)
      EXPECT_EQ(y.shape(), (Shape{3, c.classes}));
    else
      EXPECT_EQ(y.shape(), (Shape{3, c.w, c.m}));
  }
}

TEST(TransformerModel, RejectsShapeMismatch) {
  ModelConfig c = preset_config("smap", false);
  c.w = 8;
  c.d = 8;
  TransformerModel model(c, 0);
  EXPECT_THROW(model.forward(Tensor(Shape{1, 7, c.m}), {}, false), ShapeError);
}

TEST(TransformerModel, AllPaddedSampleIsAnError) {
  ModelConfig c;
  c.task = Task::kClassification;
  c.m = 2;
  c.w = 3;
  c.d = 4;
  c.ff = 4;
  c.classes = 2;
  TransformerModel model(c, 0);
  const std::vector<std::uint8_t> valid = {1, 1, 0, 0, 0, 0};
  EXPECT_THROW(model.forward(Tensor(Shape{2, 3, 2}), valid, false), DataError);
}

TEST(TransformerModel, SameSeedSameModel) {
  const ModelConfig c = preset_config("japanese_vowels", false);
  TransformerModel a(c, 5), b(c, 5), other(c, 6);
  Rng rng(0);
  const Tensor x = gen_tensor(rng, Shape{2, c.w, c.m});
  const Tensor ya = a.forward(x, {}, false), yb = b.forward(x, {}, false), yo = other.forward(x, {}, false);
  EXPECT_EQ(ya.storage(), yb.storage());
  EXPECT_NE(ya.storage(), yo.storage());
  EXPECT_NE(fingerprint(a.layers()[0].attn.plan().qkv_masks), fingerprint(a.layers()[1].attn.plan().qkv_masks));
}

TEST(TransformerModel, GradientsMatchFiniteDifferences) {
  Rng rng(17);
  for (int trial = 0; trial < 12; ++trial) {
    const Task task = static_cast<Task>(trial % 3);
    ModelConfig c = gen_config(rng, task, trial % 2 == 0);
    TransformerModel model(c, trial);
    const Tensor x = gen_tensor(rng, Shape{2, c.w, c.m});
    std::vector<std::uint8_t> valid;
    if (task == Task::kClassification) valid = gen_valid(rng, 2, c.w);
    const auto r = sbt::testing::check_gradients(model, x, valid);
    EXPECT_LT(r.input_error, 1e-4) << c.to_json().dump();
    EXPECT_LT(r.param_error, 1e-4) << c.to_json().dump();
  }
}

TEST(FrozenModel, MatchesTrainingPathInEval) {
  Rng rng(19);
  for (int trial = 0; trial < 12; ++trial) {
    ModelConfig c = gen_config(rng, static_cast<Task>(trial % 3), trial % 2 == 0);
    TransformerModel model(c, trial);
    const Tensor x = gen_tensor(rng, Shape{3, c.w, c.m});
    std::vector<std::uint8_t> valid;
    if (c.task == Task::kClassification) valid = gen_valid(rng, 3, c.w);
    const Tensor ref = model.forward(x, valid, false);
    const TensorF got = model.freeze().forward(x.cast<float>(), valid);
    double scale = 0.0, err = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
      scale = std::max(scale, std::abs(ref[i]));
      err = std::max(err, std::abs(ref[i] - got[i]));
    }
    EXPECT_LE(err, 1e-5 * std::max(1.0, scale)) << c.to_json().dump();
  }
}

TEST(FrozenModel, PaddedStepsDoNotLeakIntoClassification) {
  Rng rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    ModelConfig c = gen_config(rng, Task::kClassification, trial % 2 == 0);
    c.head = trial % 4 < 2 ? ClassHead::kStepAverage : ClassHead::kFeatureMean;
    TransformerModel model(c, trial);
    const FrozenModel f = model.freeze();
    TensorF x = gen_tensor<float>(rng, Shape{2, c.w, c.m});
    const auto valid = gen_valid(rng, 2, c.w);
    const TensorF a = f.forward(x, valid);
    for (std::size_t i = 0; i < 2 * c.w; ++i)
      if (!valid[i])
        for (std::size_t k = 0; k < c.m; ++k) x[i * c.m + k] = 100.0f;
    const TensorF b = f.forward(x, valid);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-5f) << "trial " << trial;
  }
}

TEST(SinusoidalEncoding, KnownValues) {
  const Tensor pe = sinusoidal_encoding<double>(3, 4);
  EXPECT_DOUBLE_EQ(pe(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(pe(0, 1), 1.0);
  EXPECT_NEAR(pe(1, 0), std::sin(1.0), 1e-15);
  EXPECT_NEAR(pe(1, 1), std::cos(1.0), 1e-15);
  EXPECT_NEAR(pe(2, 2), std::sin(2.0 / 100.0), 1e-15);
}
