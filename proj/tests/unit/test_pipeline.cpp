#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "generators.hpp"
#include "sbt/artifact.hpp"
#include "sbt/pipeline.hpp"

using namespace sbt;
namespace fs = std::filesystem;
using sbt::testing::gen_size;
using sbt::testing::gen_tensor;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("sbt_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

WindowSource tiny_classification(std::size_t n, std::uint64_t seed) {
  auto s = make_sinusoid_classification(n, 8, 2, seed);
  return WindowSource::from_samples(std::move(s.x), {}, std::move(s.labels));
}

ModelConfig tiny_classifier(bool dense) {
  ModelConfig c;
  c.task = Task::kClassification;
  c.m = 2;
  c.w = 8;
  c.d = 4;
  c.ff = 8;
  c.classes = 2;
  c.dense = dense;
  return c;
}

}  // namespace

TEST(NormStats, SpecExample) {
  Tensor train(Shape{2, 1});
  train[0] = 1.0;
  train[1] = 3.0;
  const NormStats st = NormStats::fit(train);
  EXPECT_DOUBLE_EQ(st.mean[0], 2.0);
  EXPECT_DOUBLE_EQ(st.stddev[0], 1.0);
  Tensor x(Shape{1, 1}, 5.0);
  st.apply(x);
  EXPECT_DOUBLE_EQ(x[0], 3.0);
}

TEST(NormStats, PropertyStandardizesAndInverts) {
  Rng rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = gen_size(rng, 2, 100), m = gen_size(rng, 1, 5);
    Tensor data = gen_tensor(rng, Shape{n, m}, rng.uniform(0.1, 50.0));
    for (auto& v : data.values()) v += 7.0;
    const Tensor orig = data;
    const NormStats st = NormStats::fit(data);
    st.apply(data);
    for (std::size_t j = 0; j < m; ++j) {
      double mean = 0.0, var = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += data(i, j);
      mean /= n;
      for (std::size_t i = 0; i < n; ++i) var += (data(i, j) - mean) * (data(i, j) - mean);
      var /= n;
      EXPECT_LT(std::abs(mean), 1e-9);
      EXPECT_NEAR(std::sqrt(var), 1.0, 1e-9);
    }
    st.invert(data);
    for (std::size_t i = 0; i < data.size(); ++i) EXPECT_NEAR(data[i], orig[i], 1e-12 * std::max(1.0, std::abs(orig[i])));
  }
}

TEST(NormStats, ConstantFeatureIsFloored) {
  Tensor data(Shape{3, 1}, 4.0);
  const NormStats st = NormStats::fit(data);
  EXPECT_GE(st.stddev[0], 1e-8);
  st.apply(data);
  for (double v : data.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(NormStats, JsonRoundTrip) {
  NormStats st{{1.5, -2.0}, {0.25, 3.0}};
  const NormStats back = NormStats::from_json(st.to_json());
  EXPECT_EQ(back.mean, st.mean);
  EXPECT_EQ(back.stddev, st.stddev);
}

TEST(Windows, SpecExamples) {
  EXPECT_EQ(make_windows(5, 3), (std::vector<std::size_t>{2, 3, 4}));
  const std::vector<std::uint8_t> flags = {0, 1, 0, 0, 0};
  EXPECT_EQ(make_windows(5, 3, 1, flags, true), (std::vector<std::size_t>{4}));
  EXPECT_THROW(make_windows(2, 3), DataError);
}

TEST(Windows, PropertyCountsAndBenignFilter) {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t len = gen_size(rng, 1, 80), w = gen_size(rng, 1, 10);
    if (len < w) continue;
    EXPECT_EQ(make_windows(len, w).size(), len - w + 1);
    const auto flags = sbt::testing::gen_flags(rng, len, 0.05);
    for (std::size_t t : make_windows(len, w, 1, flags, true))
      for (std::size_t i = t + 1 - w; i < t; ++i) ASSERT_EQ(flags[i], 0) << "window ending at " << t;
  }
}

TEST(Windows, SeriesWindowsAreIndexStable) {
  Rng rng(6);
  Tensor series = gen_tensor(rng, Shape{20, 3});
  const WindowSource src = WindowSource::from_series(Task::kAnomaly, series, 5);
  const WindowBatch b = src.range(0, src.size());
  for (std::size_t n = 0; n < src.size(); ++n) {
    const std::size_t t = b.ends[n];
    for (std::size_t r = 0; r < 5; ++r)
      for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(b.x(n, r, j), series(t - 4 + r, j));
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(b.target(n, j), series(t, j));
  }
}

TEST(ForecastMask, SpecExampleAndIdempotence) {
  Tensor w(Shape{2, 1});
  w[0] = 3.0;
  w[1] = 5.0;
  const Tensor target = forecast_mask_input(w);
  EXPECT_EQ(w.storage(), (std::vector<double>{3.0, 0.0}));
  EXPECT_EQ(target[0], 5.0);
  forecast_mask_input(w);
  EXPECT_EQ(w.storage(), (std::vector<double>{3.0, 0.0}));
}

TEST(ForecastMask, ZeroIsTheFeatureMeanAfterNormalization) {
  Rng rng(8);
  Tensor series = gen_tensor(rng, Shape{30, 2}, 4.0);
  for (auto& v : series.values()) v += 10.0;
  const NormStats st = NormStats::fit(series);
  st.apply(series);
  const WindowSource src = WindowSource::from_series(Task::kForecasting, series, 6);
  const WindowBatch b = src.range(0, 1);
  Tensor last(Shape{1, 2});
  for (std::size_t j = 0; j < 2; ++j) last(0, j) = b.x(0, 5, j);
  st.invert(last);
  for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(last(0, j), st.mean[j], 1e-12);
}

TEST(StepLoss, SpecExamples) {
  WindowBatch batch;
  batch.target = Tensor(Shape{1, 2});
  batch.target[0] = 3.0;
  batch.target[1] = 4.0;
  Tensor out(Shape{1, 3, 2});
  EXPECT_DOUBLE_EQ(step_loss(Task::kForecasting, out, batch).loss, 12.5);
  out(0, 2, 0) = 3.0;
  out(0, 2, 1) = 4.0;
  EXPECT_DOUBLE_EQ(step_loss(Task::kAnomaly, out, batch).loss, 0.0);

  WindowBatch cls;
  cls.labels = {4};
  EXPECT_NEAR(step_loss(Task::kClassification, Tensor(Shape{1, 9}), cls).loss, std::log(9.0), 1e-15);
}

TEST(StepLoss, OnlyTheLastStepMatters) {
  Rng rng(10);
  WindowBatch batch;
  batch.target = gen_tensor(rng, Shape{3, 2});
  Tensor out = gen_tensor(rng, Shape{3, 5, 2});
  const LossResult a = step_loss(Task::kAnomaly, out, batch);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t j = 0; j < 2; ++j) out(b, t, j) = rng.normal();
  EXPECT_EQ(step_loss(Task::kAnomaly, out, batch).loss, a.loss);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t j = 0; j < 2; ++j) EXPECT_EQ(a.grad(b, t, j), 0.0);
}

TEST(Csv, RoundTrip) {
  const fs::path dir = scratch_dir("csv");
  Table t;
  t.columns = {"a", "b"};
  t.rows = {{1.0, -2.5}, {0.1, 1e-20}};
  write_csv(dir / "t.csv", t);
  const Table back = read_csv(dir / "t.csv");
  EXPECT_EQ(back.columns, t.columns);
  EXPECT_EQ(back.rows, t.rows);
  EXPECT_THROW(back.column("zzz"), DataError);
  EXPECT_THROW(read_csv(dir / "missing.csv"), DataError);
}

TEST(Dataset, ManifestLoadsAndSplitsTail) {
  const fs::path dir = scratch_dir("manifest");
  Table t;
  t.columns = {"x", "y", "label"};
  for (int i = 0; i < 50; ++i) t.rows.push_back({double(i), double(i % 7), 0.0});
  write_csv(dir / "train.csv", t);
  write_csv(dir / "test.csv", t);
  std::ofstream(dir / "m.json") << R"({"task":"anomaly","train":"train.csv","test":"test.csv",)"
                                << R"("features":["x","y"],"label":"label","window":5})";
  const DatasetSplits s = load_dataset(DatasetManifest::load(dir / "m.json"));
  EXPECT_EQ(s.train.size(), 40u - 5 + 1);
  EXPECT_EQ(s.val.size(), 10u - 5 + 1);
  EXPECT_EQ(s.test.size(), 50u - 5 + 1);
  EXPECT_NEAR(s.stats.mean[0], 19.5, 1e-12);  // fit on the first 40 rows only
}

TEST(Dataset, ClassificationGroupsAndPadsSeries) {
  const fs::path dir = scratch_dir("cls");
  Table t;
  t.columns = {"series", "label", "f"};
  for (int s = 0; s < 4; ++s)
    for (int r = 0; r < 2 + s; ++r) t.rows.push_back({double(s), double(s % 2), double(r)});
  write_csv(dir / "train.csv", t);
  std::ofstream(dir / "m.json") << R"({"task":"classification","train":"train.csv","features":["f"],)"
                                << R"("label":"label","window":6})";
  const DatasetSplits s = load_dataset(DatasetManifest::load(dir / "m.json"));
  EXPECT_EQ(s.classes, 2u);
  ASSERT_EQ(s.train.size(), 4u);
  const WindowBatch b = s.train.range(0, 4);
  ASSERT_EQ(b.valid.size(), 24u);
  for (int n = 0; n < 4; ++n)
    for (int r = 0; r < 6; ++r) EXPECT_EQ(b.valid[n * 6 + r], r < 2 + n ? 1 : 0);
  EXPECT_EQ(b.labels, (std::vector<int>{0, 1, 0, 1}));
}

TEST(Train, ZeroEpochsLeavesModelUnchanged) {
  TransformerModel model(tiny_classifier(false), 3);
  const auto before = pack(model.freeze());
  TrainConfig cfg;
  cfg.epochs = 0;
  train(model, tiny_classification(16, 1), nullptr, cfg);
  EXPECT_EQ(pack(model.freeze()), before);
}

TEST(Train, SameSeedGivesIdenticalLogsAndCheckpoints) {
  const WindowSource data = tiny_classification(32, 2), val = tiny_classification(16, 3);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.seed = 9;
  auto run = [&](std::string& log) {
    TransformerModel model(tiny_classifier(false), 4);
    train(model, data, &val, cfg, [&](const EpochRecord& e) { log += e.to_json().dump() + "\n"; });
    return pack(model.freeze());
  };
  std::string la, lb;
  const auto a = run(la), b = run(lb);
  EXPECT_EQ(a, b);
  EXPECT_EQ(la, lb);
  EXPECT_FALSE(la.empty());
}

TEST(Train, LogsChurnAndAlphas) {
  TransformerModel model(tiny_classifier(false), 1);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.lr = 0.05;
  const TrainResult r = train(model, tiny_classification(32, 5), nullptr, cfg);
  ASSERT_EQ(r.log.size(), 2u);
  EXPECT_EQ(r.log[0].alphas.size(), model.biprop_modules().size());
  EXPECT_GE(r.log[0].mask_churn, 0.0);
  EXPECT_LE(r.log[0].mask_churn, 1.0);
}

TEST(Train, NonFiniteLossIsANumericError) {
  ModelConfig c = tiny_classifier(true);
  c.task = Task::kAnomaly;
  c.classes = 0;
  TransformerModel model(c, 1);
  Tensor series = make_ar1_series(40, 2, 0.5, 1);
  series(20, 1) = std::nan("");
  TrainConfig cfg;
  cfg.epochs = 1;
  EXPECT_THROW(train(model, WindowSource::from_series(Task::kAnomaly, series, 8), nullptr, cfg), NumericError);
}

TEST(Evaluate, AccuracyFromPerfectAndConstantPredictors) {
  const WindowSource data = tiny_classification(20, 1);
  const Predictor perfect = [](const WindowBatch& b) {
    Tensor y(Shape{b.labels.size(), 2});
    for (std::size_t i = 0; i < b.labels.size(); ++i) y(i, b.labels[i]) = 1.0;
    return y;
  };
  EXPECT_DOUBLE_EQ(evaluate_classification(perfect, data, 2).accuracy, 1.0);
  const Predictor constant = [](const WindowBatch& b) {
    Tensor y(Shape{b.labels.size(), 2});
    for (std::size_t i = 0; i < b.labels.size(); ++i) y(i, 0) = 1.0;
    return y;
  };
  const ClassificationReport r = evaluate_classification(constant, data, 2);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.5);
  EXPECT_EQ(r.per_class_total, (std::vector<std::size_t>{10, 10}));
  EXPECT_EQ(r.per_class_correct, (std::vector<std::size_t>{10, 0}));
}

TEST(Evaluate, RandomLogitsNearChance) {
  auto s = make_sinusoid_classification(4000, 2, 1, 3);
  std::vector<int> labels(4000);
  Rng rng(1);
  for (auto& l : labels) l = static_cast<int>(rng.below(4));
  const WindowSource data = WindowSource::from_samples(s.x, {}, labels);
  const Predictor random = [&rng](const WindowBatch& b) { return gen_tensor(rng, Shape{b.labels.size(), 4}); };
  EXPECT_NEAR(evaluate_classification(random, data, 4).accuracy, 0.25, 0.03);
}

TEST(Sweep, RowsPerWidthAndMonotoneParams) {
  auto s = make_sinusoid_classification(16, 8, 2, 1);
  DatasetSplits data;
  data.classes = 2;
  data.train = WindowSource::from_samples(s.x, {}, s.labels);
  TrainConfig cfg;
  cfg.epochs = 1;
  const std::vector<std::size_t> widths = {2, 4, 8};
  const auto rows = sweep_model_size(tiny_classifier(false), widths, data, cfg);
  ASSERT_EQ(rows.size(), 3u);
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_GE(rows[i].params, rows[i - 1].params);
  const std::vector<std::size_t> one = {4};
  EXPECT_THROW(sweep_model_size(tiny_classifier(false), one, data, cfg), ConfigError);
}

TEST(Sweep, PlateauIndex) {
  const std::vector<SweepRow> acc = {{8, 0.6}, {16, 0.9}, {32, 0.91}, {64, 0.905}};
  EXPECT_EQ(plateau_index(acc, 0.02, true), 1u);
  const std::vector<SweepRow> loss = {{8, 1.0}, {16, 0.5}, {32, 0.2}, {64, 0.21}};
  EXPECT_EQ(plateau_index(loss, 0.02, false), 2u);
}

TEST(Synthetic, Ar1NoiseFloor) {
  const double phi = 0.9;
  const Tensor x = make_ar1_series(200000, 1, phi, 3);
  double var = 0.0, err = 0.0;
  for (std::size_t t = 1; t < x.dim(0); ++t) {
    var += x(t, 0) * x(t, 0);
    err += (x(t, 0) - phi * x(t - 1, 0)) * (x(t, 0) - phi * x(t - 1, 0));
  }
  // One-step error relative to the series variance approaches 1 - phi^2.
  EXPECT_NEAR(err / var, 1.0 - phi * phi, 0.01);
}
