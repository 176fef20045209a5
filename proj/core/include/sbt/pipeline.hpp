#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sbt/model.hpp"

namespace sbt {

// ---------------------------------------------------------------------------
// Tables and manifests

/// Numeric CSV with a header row.
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  std::size_t column(const std::string& name) const;  // throws DataError
};

Table read_csv(const std::filesystem::path& path);
void write_csv(const std::filesystem::path& path, const Table& table);

/// JSON manifest describing one dataset. Relative paths resolve against the
/// manifest's directory.
///   {"task": "classification|anomaly|forecasting",
///    "train": "train.csv", "val": "val.csv" (optional), "test": "test.csv",
///    "features": ["f0", ...], "label": "label" (classification/anomaly),
///    "series": "series" (classification sample id), "window": 50, "stride": 1}
struct DatasetManifest {
  Task task = Task::kAnomaly;
  std::filesystem::path train, val, test;
  std::vector<std::string> features;
  std::string label;
  std::string series = "series";
  std::size_t window = 0;
  std::size_t stride = 1;

  static DatasetManifest load(const std::filesystem::path& path);
  static DatasetManifest from_json(const nlohmann::json& j, const std::filesystem::path& base);
};

// ---------------------------------------------------------------------------
// Normalization

struct NormStats {
  std::vector<double> mean;
  std::vector<double> stddev;

  /// rows x features matrix.
  static NormStats fit(const Tensor& data, std::span<const std::uint8_t> row_valid = {});
  void apply(Tensor& data) const;
  void invert(Tensor& data) const;

  nlohmann::json to_json() const;
  static NormStats from_json(const nlohmann::json& j);
};

// ---------------------------------------------------------------------------
// Windows

struct WindowBatch {
  Tensor x;                          // (B, w, m) model input
  std::vector<std::uint8_t> valid;   // B*w flags, empty if all valid
  std::vector<int> labels;           // classification
  Tensor target;                     // (B, m) x_t for anomaly/forecasting
  std::vector<std::size_t> ends;     // window end index t per sample
};

/// End indices t of all windows [t-w+1 .. t] with the given stride. With a
/// benign filter, windows containing an anomaly flag before t are dropped.
std::vector<std::size_t> make_windows(std::size_t length, std::size_t w, std::size_t stride = 1,
                                      std::span<const std::uint8_t> anomaly_flags = {}, bool benign_filter = false);

/// Zeroes the last row of a (w, m) or (B, w, m) window in place and returns
/// the original last rows as (B, m).
Tensor forecast_mask_input(Tensor& window);

/// Random-access batches over either fixed samples (classification) or a
/// normalized series cut into sliding windows.
class WindowSource {
 public:
  WindowSource() = default;
  /// x (N, w, m), valid N*w flags (may be empty), one label per sample.
  static WindowSource from_samples(Tensor x, std::vector<std::uint8_t> valid, std::vector<int> labels);
  /// series (T, m); anomaly flags per row (may be empty).
  static WindowSource from_series(Task task, Tensor series, std::size_t w, std::size_t stride = 1,
                                  std::vector<std::uint8_t> anomaly_flags = {}, bool benign_filter = false);

  Task task() const { return task_; }
  std::size_t size() const;
  std::size_t window() const { return w_; }
  std::size_t features() const { return m_; }
  const std::vector<std::size_t>& ends() const { return ends_; }
  const Tensor& series() const { return series_; }
  const std::vector<std::uint8_t>& anomaly_flags() const { return flags_; }
  const std::vector<int>& labels() const { return labels_; }

  WindowBatch gather(std::span<const std::size_t> indices) const;
  WindowBatch range(std::size_t begin, std::size_t end) const;

 private:
  Task task_ = Task::kClassification;
  std::size_t w_ = 0, m_ = 0;
  Tensor samples_;
  std::vector<std::uint8_t> valid_;
  std::vector<int> labels_;
  Tensor series_;
  std::vector<std::uint8_t> flags_;
  std::vector<std::size_t> ends_;
};

struct DatasetSplits {
  DatasetManifest manifest;
  NormStats stats;
  std::size_t classes = 0;
  WindowSource train, val, test;
};

/// Reads the manifest's tables, fits NormStats on the training split and cuts
/// windows. Anomaly data without a validation table uses the last 20% of the
/// training rows; so does forecasting.
DatasetSplits load_dataset(const DatasetManifest& manifest, bool benign_filter = false,
                           const NormStats* stats = nullptr);

// ---------------------------------------------------------------------------
// Loss, training, evaluation

struct LossResult {
  double loss = 0.0;
  Tensor grad;  // dL/d(output)
};

/// Classification: mean cross-entropy of (B, l) logits. Anomaly and
/// forecasting: mean over batch and features of the squared error at the
/// last step of (B, w, m) reconstructions.
LossResult step_loss(Task task, const Tensor& output, const WindowBatch& batch);

struct TrainConfig {
  double lr = 1e-3;
  std::size_t epochs = 50;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  bool scheduler = false;
  double gamma = 0.75;
  std::size_t replicates = 3;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double train_accuracy = -1.0;  // classification only
  double val_accuracy = -1.0;
  double lr = 0.0;
  double mask_churn = 0.0;  // fraction of mask entries flipped during the epoch
  std::vector<double> alphas;

  nlohmann::json to_json() const;
};

struct TrainResult {
  std::vector<EpochRecord> log;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Adam training. The model ends at the checkpoint with the lowest validation
/// loss (training loss when no validation source is given).
TrainResult train(TransformerModel& model, const WindowSource& train_set, const WindowSource* val_set,
                  const TrainConfig& cfg, const EpochCallback& on_epoch = {});

using Predictor = std::function<Tensor(const WindowBatch&)>;
Predictor predictor(TransformerModel& model);
Predictor predictor(const FrozenModel& model);

struct ClassificationReport {
  double accuracy = 0.0;
  std::size_t samples = 0;
  std::vector<std::size_t> per_class_total;
  std::vector<std::size_t> per_class_correct;

  nlohmann::json to_json() const;
};

ClassificationReport evaluate_classification(const Predictor& predict, const WindowSource& split,
                                             std::size_t classes, std::size_t batch_size = 256);

/// Mean loss of step_loss over a split.
double evaluate_loss(const Predictor& predict, const WindowSource& split, std::size_t batch_size = 256);

/// Squared reconstruction error at t averaged over features, one per window.
std::vector<double> anomaly_scores(const Predictor& predict, const WindowSource& split,
                                   std::size_t batch_size = 256);

struct ForecastRow {
  std::size_t t = 0;
  std::vector<double> predicted, actual;
};

/// Predictions for x_t, optionally mapped back to raw units.
std::vector<ForecastRow> forecast(const Predictor& predict, const WindowSource& split,
                                  const NormStats* stats = nullptr, std::size_t batch_size = 256);

// ---------------------------------------------------------------------------
// Model-size sweep

struct SweepRow {
  std::size_t d = 0;
  double metric = 0.0;  // validation accuracy (classification) or loss
  std::size_t params = 0;
  double bits = 0.0;
  double flops = 0.0;
};

SweepRow sweep_point(const ModelConfig& base, std::size_t d, const DatasetSplits& data, const TrainConfig& cfg);
std::vector<SweepRow> sweep_model_size(const ModelConfig& base, std::span<const std::size_t> widths,
                                       const DatasetSplits& data, const TrainConfig& cfg);
/// First index whose metric is within `tolerance` of the best metric over
/// all later widths. higher_is_better selects accuracy vs loss.
std::size_t plateau_index(std::span<const SweepRow> rows, double tolerance, bool higher_is_better);

// ---------------------------------------------------------------------------
// Synthetic generators

struct SyntheticClassification {
  Tensor x;  // (N, w, m)
  std::vector<int> labels;
};

/// Two classes told apart by the frequency of the sinusoid shared by all
/// channels (1 vs 3 cycles per window); random phase, amplitude and noise.
SyntheticClassification make_sinusoid_classification(std::size_t n, std::size_t w, std::size_t m,
                                                     std::uint64_t seed, double noise = 0.3);

/// Independent AR(1) channels x_t = phi x_{t-1} + e_t with unit-variance
/// noise. The one-step noise floor in standardized units is 1 - phi^2.
Tensor make_ar1_series(std::size_t length, std::size_t m, double phi, std::uint64_t seed);

}  // namespace sbt
