#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sbt/attention.hpp"
#include "sbt/biprop.hpp"
#include "sbt/linear.hpp"

namespace sbt {

enum class Task : std::uint8_t { kClassification, kAnomaly, kForecasting };
enum class NormPolicy : std::uint8_t { kBatch, kLayer, kNone };
enum class PosEncoding : std::uint8_t { kSinusoidal, kLearnable };
/// kStepAverage: per-step d -> l logits averaged over valid steps.
/// kFeatureMean: a w -> l map applied along time, then averaged over d.
enum class ClassHead : std::uint8_t { kStepAverage, kFeatureMean };

Task parse_task(const std::string& s);
std::string to_string(Task t);
NormPolicy parse_norm(const std::string& s);
std::string to_string(NormPolicy n);
PosEncoding parse_pos_encoding(const std::string& s);
std::string to_string(PosEncoding p);
ClassHead parse_class_head(const std::string& s);
std::string to_string(ClassHead h);
ScoreGradRule parse_score_rule(const std::string& s);
std::string to_string(ScoreGradRule r);

struct ModelConfig {
  std::string name = "custom";
  Task task = Task::kClassification;
  std::size_t m = 1;
  std::size_t w = 2;
  std::size_t d = 16;
  std::size_t heads = 2;
  std::size_t layers = 2;
  std::size_t ff = 256;
  std::size_t classes = 0;
  bool dense = false;
  double prune_rate = 0.5;
  // Unset fields take the task/mode default; see resolved().
  std::optional<double> activation_prune_rate;
  std::optional<AttentionVariant> attention;
  std::optional<NormPolicy> norm;
  std::optional<PosEncoding> pos;
  ClassHead head = ClassHead::kStepAverage;
  bool scale_per_head = true;
  std::size_t pos_table_rows = 1024;
  ScoreGradRule score_rule = ScoreGradRule::kMaskChain;
  bool alpha_gradient = false;

  /// Copy with every optional field filled:
  ///  attention: canonical when dense; SBT uses step_t for anomaly and
  ///  forecasting and qkv_random for classification.
  ///  norm: batch (classification), layer (forecasting), none (anomaly).
  ///  pos: learnable for dense classification, sinusoidal otherwise.
  ///  activation prune rate: the weight prune rate (0 when dense).
  ModelConfig resolved() const;
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// Names of the shipped dataset presets.
std::vector<std::string> preset_names();
/// Full preset document (model fields plus training defaults).
nlohmann::json preset_document(const std::string& name);
/// Model configuration of a preset, SBT or dense.
ModelConfig preset_config(const std::string& name, bool dense);

/// Sinusoidal table (rows, d): even columns sin, odd columns cos.
template <typename T>
BasicTensor<T> sinusoidal_encoding(std::size_t rows, std::size_t d) {
  BasicTensor<T> pe(Shape{rows, d});
  for (std::size_t pos = 0; pos < rows; ++pos)
    for (std::size_t i = 0; i < d; ++i) {
      const double expo = static_cast<double>(i - i % 2) / static_cast<double>(d);
      const double angle = static_cast<double>(pos) / std::pow(10000.0, expo);
      pe(pos, i) = static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  return pe;
}

struct ModuleCensus {
  std::string name;
  std::string kind;  // binary_linear, binary_gain, dense_linear, norm, pos_table
  std::size_t elements = 0;  // weight entries (binary or FP32)
  std::size_t fp32 = 0;      // FP32 values including biases and norm affine
  std::size_t binary = 0;    // 1-bit weights
  std::size_t alpha = 0;     // FP32 alpha scalars
  double keep_rate = 1.0;
};

struct Census {
  std::vector<ModuleCensus> modules;
  std::size_t fp32_params() const;
  std::size_t binary_params() const;
  std::size_t alpha_count() const;
  std::size_t binarized_modules() const;
  /// Weights that remain after pruning (binary entries times keep rate)
  /// plus every FP32 value.
  double surviving_params() const;
};

Census count_params(const ModelConfig& cfg);

/// FP32 frozen linear: materialized weights for the reference path plus the
/// packed triple when binary.
struct FrozenLinear {
  std::string name;
  std::size_t out = 0, in = 0;
  std::optional<EffectiveWeights> binary;
  TensorF weight;  // (out, in)
  std::vector<float> bias;
};

struct FrozenNorm {
  std::string name;
  NormKind kind = NormKind::kLayer;
  std::optional<EffectiveWeights> binary_gain;
  std::vector<float> gain, bias;         // gain always materialized
  std::vector<float> mean, var;          // batch norm running statistics
};

struct FrozenLayer {
  AttentionPlan plan;  // per layer: each attention module owns its Q/K/V masks
  FrozenLinear q, k, v, o, ff1, ff2;
  std::optional<FrozenNorm> norm1, norm2;
};

/// Replacement kernels for FrozenModel::forward. `linear` replaces every
/// projection; `attention`, when set, returns layer `i`'s attention output
/// before W_o or nullopt to use the default path.
struct ForwardHooks {
  std::function<TensorF(const FrozenLinear&, const TensorF&)> linear;
  std::function<std::optional<TensorF>(std::size_t, const TensorF&, std::span<const std::uint8_t>)> attention;
};

/// Immutable inference model. forward() is the reference FP32 path with
/// materialized {-alpha, +alpha} weights.
struct FrozenModel {
  ModelConfig config;  // resolved
  FrozenLinear input;
  TensorF pos;  // (rows, d); sinusoidal rows are recomputed, learnable stored
  std::vector<FrozenLayer> layers;
  FrozenLinear decoder;

  /// x (B, w, m). Classification -> (B, l); otherwise (B, w, m).
  TensorF forward(const TensorF& x, std::span<const std::uint8_t> valid = {}) const;
  TensorF forward(const TensorF& x, std::span<const std::uint8_t> valid, const ForwardHooks& hooks) const;
  /// Rebuilds derived state (step masks, materialized weights, sinusoidal
  /// table) from the config and the stored triples. qkv_random masks are
  /// kept as stored.
  void rebuild();
};

struct NormModule {
  std::string name;
  NormKind kind = NormKind::kLayer;
  std::optional<BipropLayer> binary_gain;  // SBT layer norm
  std::optional<GradSlot> gain, bias;      // dense or batch norm
  std::vector<double> running_mean, running_var;
  double momentum = 0.1;
  NormCache<double> cache;

  Tensor forward(const Tensor& x, bool training);
  Tensor backward(const Tensor& g);
  void collect(std::vector<GradSlot*>& out);
  FrozenNorm freeze() const;
};

struct EncoderLayer {
  MultiHeadAttention attn;
  Linear ff1, ff2;
  std::optional<NormModule> norm1, norm2;
  Tensor hidden;  // ff1 output before ReLU
};

/// Trainable FP64 encoder.
class TransformerModel {
 public:
  TransformerModel(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  /// x (B, w, m); valid holds B*w step flags (classification padding) or is
  /// empty when every step is real.
  Tensor forward(const Tensor& x, std::span<const std::uint8_t> valid = {}, bool training = true);
  /// Backpropagates dL/d(output); returns dL/dx.
  Tensor backward(const Tensor& grad_out);

  std::vector<GradSlot*> parameters();
  std::vector<BipropLayer*> biprop_modules();
  std::vector<const BipropLayer*> biprop_modules() const;
  std::size_t parameter_count() const;
  FrozenModel freeze() const;

  std::vector<EncoderLayer>& layers() { return layers_; }
  Linear& input() { return input_; }
  Linear& decoder() { return decoder_; }
  std::optional<GradSlot>& pos_table() { return pos_table_; }

 private:
  ModelConfig cfg_;
  Linear input_;
  std::optional<GradSlot> pos_table_;
  Tensor sinusoid_;
  std::vector<EncoderLayer> layers_;
  Linear decoder_;

  // Forward caches.
  std::size_t batch_ = 0;
  std::vector<std::uint8_t> valid_;
  Tensor pre_relu_;  // encoder output before the final ReLU
  Tensor head_in_;   // after the final ReLU
  std::vector<Tensor> residual_in_;
};

}  // namespace sbt
