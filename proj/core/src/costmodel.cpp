#include "sbt/costmodel.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace sbt {

double linear_flops(std::size_t out, std::size_t in, double keep_rate) {
  return static_cast<double>(out) * static_cast<double>(in) * keep_rate;
}

AttentionFlops attention_flops(AttentionVariant variant, std::size_t d, std::size_t w, std::size_t heads,
                               double kr, double kra) {
  if (heads == 0 || d % heads != 0) throw ConfigError("attention_flops: d must be divisible by h");
  const double D = static_cast<double>(d), W = static_cast<double>(w), H = static_cast<double>(heads);
  const double dh = D / H;
  AttentionFlops f;
  f.proj = 3.0 * D * D * W * kr;
  f.out_proj = D * D * W * kr;
  f.q_scale = W * D;
  switch (variant) {
    case AttentionVariant::kCanonical:
      f.qk = dh * W * W * H;
      f.av = dh * W * W * H;
      f.softmax = W * W * H;
      break;
    case AttentionVariant::kStepT:
      if (w < 2) throw ConfigError("step-T attention needs w >= 2");
      f.qk = w == 2 ? 0.0 : (W - 1) * dh * H;  // one open key is a one-hot softmax
      f.av = 2.0 * (W - 1) * dh * H;
      f.softmax = (W - 1) * H;
      break;
    case AttentionVariant::kQkvRandom:
    case AttentionVariant::kQkvMagnitude:
      f.qk = dh * (W * kra) * (W * kra) * H;
      f.av = dh * W * W * kra * H;
      f.softmax = W * W * H;
      f.q_scale = W * D * kra;
      break;
    case AttentionVariant::kIdentity:
      f.qk = 0.0;
      f.av = W * dh * H;
      f.softmax = 0.0;
      break;
  }
  return f;
}

nlohmann::json FlopsBreakdown::to_json() const {
  nlohmann::json items_j = nlohmann::json::array();
  for (const auto& i : items)
    items_j.push_back({{"name", i.name}, {"flops", i.flops}, {"simplified", i.simplified}, {"extra", i.extra}});
  return {{"items", items_j},   {"simplified", simplified}, {"extras", extras},
          {"total", total},     {"out_proj", out_proj},     {"complete", complete}};
}

FlopsBreakdown model_flops(const ModelConfig& raw) {
  const ModelConfig cfg = raw.resolved();
  cfg.validate();
  // Realized keep fraction of an out x in mask; 1 - p when out*in*p is whole.
  auto kr = [&](std::size_t out, std::size_t in) {
    return cfg.dense ? 1.0 : static_cast<double>(kept_count(out * in, cfg.prune_rate)) / static_cast<double>(out * in);
  };
  const double kra = 1.0 - *cfg.activation_prune_rate;
  const double wd = static_cast<double>(cfg.w * cfg.d);
  FlopsBreakdown r;
  auto add = [&](std::string name, double flops, bool simplified, bool extra) {
    r.items.push_back({std::move(name), flops, simplified, extra});
  };
  add("input", linear_flops(cfg.d, cfg.m, kr(cfg.d, cfg.m)), true, false);
  add("pos_add", wd, false, true);
  const AttentionFlops af = attention_flops(*cfg.attention, cfg.d, cfg.w, cfg.heads, kr(cfg.d, cfg.d), kra);
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    add(p + "qkv_proj", af.proj, true, false);
    add(p + "qk", af.qk, true, false);
    add(p + "av", af.av, true, false);
    add(p + "o", af.out_proj, false, false);
    add(p + "softmax", af.softmax, false, true);
    add(p + "q_scale", af.q_scale, false, true);
    add(p + "ff1", linear_flops(cfg.ff, cfg.d, kr(cfg.ff, cfg.d)), true, false);
    add(p + "ff2", linear_flops(cfg.d, cfg.ff, kr(cfg.d, cfg.ff)), true, false);
    if (*cfg.norm != NormPolicy::kNone) {
      add(p + "norm1", wd, false, true);
      add(p + "norm2", wd, false, true);
    }
  }
  const std::size_t dec_in = cfg.task == Task::kClassification && cfg.head == ClassHead::kFeatureMean ? cfg.w : cfg.d;
  const std::size_t dec_out = cfg.task == Task::kClassification ? cfg.classes : cfg.m;
  add("decoder", linear_flops(dec_out, dec_in, kr(dec_out, dec_in)), true, false);
  for (const auto& i : r.items) {
    if (i.simplified) r.simplified += i.flops;
    if (i.extra) r.extras += i.flops;
    if (!i.simplified && !i.extra) r.out_proj += i.flops;
  }
  r.total = r.simplified + r.extras;
  r.complete = r.total + r.out_proj;
  return r;
}

std::string to_string(SizeScenario s) {
  switch (s) {
    case SizeScenario::kDenseFp32:
      return "dense";
    case SizeScenario::kSbt:
      return "sbt";
    case SizeScenario::kPrunedFp32:
      return "pruned32";
    case SizeScenario::kPruned8:
      return "pruned8";
  }
  return "dense";
}

SizeScenario parse_size_scenario(const std::string& s) {
  if (s == "dense") return SizeScenario::kDenseFp32;
  if (s == "sbt") return SizeScenario::kSbt;
  if (s == "pruned32") return SizeScenario::kPrunedFp32;
  if (s == "pruned8") return SizeScenario::kPruned8;
  throw ConfigError("unknown size scenario '" + s + "'");
}

double bit_size(const Census& c, SizeScenario s) {
  switch (s) {
    case SizeScenario::kDenseFp32:
      return 32.0 * static_cast<double>(c.fp32_params() + c.binary_params());
    case SizeScenario::kSbt:
      return static_cast<double>(c.binary_params()) + 32.0 * static_cast<double>(c.alpha_count() + c.fp32_params());
    case SizeScenario::kPrunedFp32:
      return 32.0 * c.surviving_params();
    case SizeScenario::kPruned8:
      return 8.0 * c.surviving_params();
  }
  return 0.0;
}

double sbt_weight_bits(const Census& c) {
  return static_cast<double>(c.binary_params()) + 32.0 * static_cast<double>(c.alpha_count());
}

CostReport cost_report(const ModelConfig& cfg) {
  CostReport r;
  ModelConfig s = cfg;
  s.dense = false;
  ModelConfig d = cfg;
  d.dense = true;
  d.attention.reset();
  d.pos.reset();
  d.activation_prune_rate.reset();
  r.sbt = s.resolved();
  r.dense = d.resolved();
  r.sbt_census = count_params(r.sbt);
  r.dense_census = count_params(r.dense);
  r.sbt_flops = model_flops(r.sbt);
  r.dense_flops = model_flops(r.dense);
  r.dense_bits = bit_size(r.dense_census, SizeScenario::kDenseFp32);
  r.sbt_bits = bit_size(r.sbt_census, SizeScenario::kSbt);
  r.sbt_weight_bits = sbt_weight_bits(r.sbt_census);
  r.pruned32_bits = bit_size(r.sbt_census, SizeScenario::kPrunedFp32);
  r.pruned8_bits = bit_size(r.sbt_census, SizeScenario::kPruned8);
  return r;
}

nlohmann::json CostReport::to_json() const {
  return {{"name", sbt.name},
          {"m", sbt.m},
          {"w", sbt.w},
          {"d", sbt.d},
          {"prune_rate", sbt.prune_rate},
          {"attention", to_string(*sbt.attention)},
          {"dense",
           {{"params", dense_census.fp32_params()}, {"bits", dense_bits}, {"flops", dense_flops.to_json()}}},
          {"sbt",
           {{"binary_params", sbt_census.binary_params()},
            {"alpha", sbt_census.alpha_count()},
            {"fp32_residuals", sbt_census.fp32_params()},
            {"binarized_modules", sbt_census.binarized_modules()},
            {"bits", sbt_bits},
            {"weight_bits", sbt_weight_bits},
            {"flops", sbt_flops.to_json()}}},
          {"pruned32_bits", pruned32_bits},
          {"pruned8_bits", pruned8_bits},
          {"size_ratio", size_ratio()},
          {"flops_ratio", flops_ratio()}};
}

std::string render_cost_table(std::span<const CostReport> reports) {
  std::ostringstream os;
  os << "| Dataset | m | w | d | Dense params (K) | Dense bits (M) | Dense FLOPs (M) | p | SBT params (K) "
        "| SBT bits (M) | SBT FLOPs (M) | ~Size savings | ~FLOPs savings |\n";
  os << "|---|---|---|---|---|---|---|---|---|---|---|---|---|\n";
  char buf[512];
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof buf,
                  "| %s | %zu | %zu | %zu | %.1f | %.2f | %.2f | %.2f | %.1f | %.3f | %.2f | ~x%.1f | ~x%.1f |\n",
                  r.sbt.name.c_str(), r.sbt.m, r.sbt.w, r.sbt.d,
                  static_cast<double>(r.dense_census.fp32_params()) / 1e3, r.dense_bits / 1e6,
                  r.dense_flops.total / 1e6, r.sbt.prune_rate,
                  static_cast<double>(r.sbt_census.binary_params()) / 1e3, r.sbt_bits / 1e6, r.sbt_flops.total / 1e6,
                  r.size_ratio(), r.flops_ratio());
    os << buf;
  }
  return os.str();
}

std::uint64_t InstrumentedCount::simplified() const {
  std::uint64_t n = 0;
  for (const auto& [k, v] : buckets)
    if (k.size() < 2 || k.compare(k.size() - 2, 2, ".o") != 0) n += v;
  return n;
}

std::uint64_t InstrumentedCount::total() const {
  std::uint64_t n = 0;
  for (const auto& [k, v] : buckets) n += v;
  return n;
}

std::uint64_t count_linear_macs(const TensorF& weight, const TensorF& x) {
  const std::size_t out = weight.dim(0), in = weight.dim(1);
  if (x.shape().back() != in) throw ShapeError("count_linear_macs: input " + x.shape().str());
  std::uint64_t n = 0;
  for (std::size_t r = 0; r < x.size() / in; ++r)
    for (std::size_t o = 0; o < out; ++o)
      for (std::size_t i = 0; i < in; ++i) n += weight(o, i) != 0.0f && x[r * in + i] != 0.0f;
  return n;
}

namespace {

/// MACs of one row through W with the given input support.
std::uint64_t row_macs(const TensorF& w, std::span<const std::uint8_t> support) {
  std::uint64_t n = 0;
  const std::size_t out = w.dim(0), in = w.dim(1);
  for (std::size_t o = 0; o < out; ++o)
    for (std::size_t i = 0; i < in; ++i) n += w(o, i) != 0.0f && support[i];
  return n;
}

}  // namespace

InstrumentedCount instrumented_count(const FrozenModel& model) {
  const ModelConfig& cfg = model.config;
  const std::size_t w = cfg.w, d = cfg.d;
  InstrumentedCount c;
  const std::vector<std::uint8_t> full_m(cfg.m, 1), full_d(d, 1), full_ff(cfg.ff, 1), full_w(w, 1);
  c.buckets["input"] = row_macs(model.input.weight, full_m);
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    const FrozenLayer& l = model.layers[li];
    const std::string p = "layers." + std::to_string(li) + ".";
    const AttentionPlan& plan = l.plan;
    const std::size_t h = plan.heads, dh = plan.head_dim();

    std::uint64_t proj = 0;
    for (std::size_t t = 0; t < w; ++t) {
      proj += row_macs(l.q.weight, full_d);
      proj += row_macs(l.k.weight, full_d);
      proj += row_macs(l.v.weight, full_d);
    }
    c.buckets[p + "qkv_proj"] = proj;

    // Structural support of the projected activations.
    std::vector<std::uint8_t> qs(w * d, 1), ks(w * d, 1), vs(w * d, 1);
    if (plan.variant == AttentionVariant::kQkvRandom) {
      qs = plan.qkv_masks[0];
      ks = plan.qkv_masks[1];
      vs = plan.qkv_masks[2];
    }
    auto allowed = [&](std::size_t i, std::size_t j) { return plan.step_mask.empty() || plan.step_mask(i, j) == 0.0; };
    std::uint64_t qk = 0, av = 0;
    for (std::size_t hh = 0; hh < h; ++hh) {
      for (std::size_t i = 0; i < w; ++i) {
        std::size_t open = 0;
        for (std::size_t j = 0; j < w; ++j) open += allowed(i, j);
        for (std::size_t j = 0; j < w; ++j) {
          if (!allowed(i, j)) continue;
          for (std::size_t cc = hh * dh; cc < (hh + 1) * dh; ++cc) {
            if (open > 1) qk += qs[i * d + cc] && ks[j * d + cc];
            av += vs[j * d + cc];
          }
        }
      }
    }
    c.buckets[p + "qk"] = qk;
    c.buckets[p + "av"] = av;
    std::uint64_t o = 0;
    for (std::size_t t = 0; t < w; ++t) o += row_macs(l.o.weight, full_d);
    c.buckets[p + "o"] = o;
    c.buckets[p + "ff1"] = row_macs(l.ff1.weight, full_d);
    c.buckets[p + "ff2"] = row_macs(l.ff2.weight, full_ff);
  }
  c.buckets["decoder"] = row_macs(model.decoder.weight,
                                     cfg.task == Task::kClassification && cfg.head == ClassHead::kFeatureMean ? full_w : full_d);
  return c;
}

}  // namespace sbt
