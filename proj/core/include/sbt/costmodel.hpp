#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sbt/model.hpp"

namespace sbt {

/// Multiply-adds of a linear layer outside attention, counted once per
/// sample: out * in * kr.
double linear_flops(std::size_t out, std::size_t in, double keep_rate);

struct AttentionFlops {
  double proj = 0.0;      // Q, K and V projections together
  double qk = 0.0;        // Q K^T over all heads
  double av = 0.0;        // A V over all heads
  double out_proj = 0.0;  // W_o, reported separately
  double softmax = 0.0;   // exponentials over unmasked scores
  double q_scale = 0.0;   // 1/sqrt(d') scaling of Q

  double mha() const { return proj + qk + av; }
};

/// Closed forms per variant with keep rates kr (weights) and kr_a
/// (activations). Rows whose mask leaves a single entry cost nothing in
/// Q K^T since their softmax is known to be one-hot.
AttentionFlops attention_flops(AttentionVariant variant, std::size_t d, std::size_t w, std::size_t heads,
                               double keep_rate, double activation_keep_rate);

struct CostItem {
  std::string name;
  double flops = 0.0;
  bool simplified = true;  // part of 2L + N(2L + MHA)
  bool extra = false;      // softmax, Q scaling, positional add, norms
};

struct FlopsBreakdown {
  std::vector<CostItem> items;
  double simplified = 0.0;  // 2L + N(2L + MHA)
  double extras = 0.0;
  double total = 0.0;       // simplified + extras; the headline figure
  double out_proj = 0.0;    // W_o multiply-adds, not in total
  double complete = 0.0;    // total + out_proj

  nlohmann::json to_json() const;
};

FlopsBreakdown model_flops(const ModelConfig& cfg);

enum class SizeScenario : std::uint8_t { kDenseFp32, kSbt, kPrunedFp32, kPruned8 };
std::string to_string(SizeScenario s);
SizeScenario parse_size_scenario(const std::string& s);

/// dense-FP32: 32 bits for every stored value. SBT: one bit per binary
/// weight plus 32 per alpha and FP32 residual. Pruned scenarios store the
/// surviving weights (and FP32 residuals) at 32 or 8 bits with no index cost.
double bit_size(const Census& census, SizeScenario scenario);
/// Binary weights plus alphas, without FP32 residuals.
double sbt_weight_bits(const Census& census);

struct CostReport {
  ModelConfig sbt;    // resolved
  ModelConfig dense;  // resolved dense counterpart
  Census sbt_census, dense_census;
  FlopsBreakdown sbt_flops, dense_flops;
  double dense_bits = 0.0, sbt_bits = 0.0, sbt_weight_bits = 0.0, pruned32_bits = 0.0, pruned8_bits = 0.0;

  double size_ratio() const { return dense_bits / sbt_bits; }
  double flops_ratio() const { return dense_flops.total / sbt_flops.total; }
  nlohmann::json to_json() const;
};

/// Cost of an SBT configuration and of the dense model with the same shape.
CostReport cost_report(const ModelConfig& sbt_config);

/// Markdown table with one row per report: m, w, d, params, bits, FLOPs and
/// the approximate savings.
std::string render_cost_table(std::span<const CostReport> reports);

/// Counted multiply-adds per bucket ("input", "layers.0.qkv_proj",
/// "layers.0.qk", "layers.0.av", "layers.0.o", "layers.0.ff1", ...).
struct InstrumentedCount {
  std::map<std::string, std::uint64_t> buckets;
  std::uint64_t simplified() const;  // every bucket except the W_o ones
  std::uint64_t total() const;
};

/// Walks every multiply-add of one sample's forward pass through a frozen
/// model and counts those whose weight is nonzero and whose activation is
/// not forced to zero by a fixed mask (activation masks or attention masks).
/// Non-attention linears count a single row, matching the closed form.
InstrumentedCount instrumented_count(const FrozenModel& model);

/// Nonzero products of x (rows, in) against W (out, in) with values taken
/// literally.
std::uint64_t count_linear_macs(const TensorF& weight, const TensorF& x);

}  // namespace sbt
