#include "sbt/model.hpp"

#include <algorithm>
#include <cmath>

#include "sbt/random.hpp"

namespace sbt {

namespace {

template <typename E>
struct Names {
  E value;
  const char* name;
};

constexpr Names<Task> kTasks[] = {
    {Task::kClassification, "classification"}, {Task::kAnomaly, "anomaly"}, {Task::kForecasting, "forecasting"}};
constexpr Names<NormPolicy> kNorms[] = {
    {NormPolicy::kBatch, "batch"}, {NormPolicy::kLayer, "layer"}, {NormPolicy::kNone, "none"}};
constexpr Names<PosEncoding> kPos[] = {{PosEncoding::kSinusoidal, "sinusoidal"},
                                       {PosEncoding::kLearnable, "learnable"}};
constexpr Names<ClassHead> kHeads[] = {{ClassHead::kStepAverage, "step_average"},
                                       {ClassHead::kFeatureMean, "feature_mean"}};
constexpr Names<ScoreGradRule> kRules[] = {{ScoreGradRule::kEffectiveWeight, "effective_weight"},
                                           {ScoreGradRule::kMaskChain, "mask_chain"}};

template <typename E, std::size_t N>
E lookup(const Names<E> (&table)[N], std::string s, const char* what) {
  std::replace(s.begin(), s.end(), '-', '_');
  for (const auto& e : table)
    if (s == e.name) return e.value;
  // Short aliases used on the command line.
  if (s == "classify") return lookup(table, "classification", what);
  if (s == "forecast") return lookup(table, "forecasting", what);
  throw ConfigError(std::string("unknown ") + what + " '" + s + "'");
}

template <typename E, std::size_t N>
std::string name_of(const Names<E> (&table)[N], E v) {
  for (const auto& e : table)
    if (e.value == v) return e.name;
  return "?";
}

std::vector<float> to_float(std::span<const double> v) {
  return std::vector<float>(v.begin(), v.end());
}

Shape out_shape(const TensorF& x, std::size_t out) {
  return x.rank() == 3 ? Shape{x.dim(0), x.dim(1), out} : Shape{x.dim(0), out};
}

TensorF linear_reference(const FrozenLinear& l, const TensorF& x) {
  if (x.shape().back() != l.in) throw ShapeError("module '" + l.name + "': input " + x.shape().str());
  TensorF y(out_shape(x, l.out));
  const std::size_t n = x.size() / l.in;
  linear_nt<float>(x.values(), l.weight.values(), y.values(), n, l.in, l.out);
  if (!l.bias.empty())
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < l.out; ++o) y[i * l.out + o] += l.bias[o];
  return y;
}

TensorF apply_norm(const FrozenNorm& n, const TensorF& x) {
  if (n.kind == NormKind::kBatch) return normalize_with_stats<float>(x, n.mean, n.var, n.gain, n.bias);
  return normalize<float>(x, NormKind::kLayer, n.gain, n.bias);
}

/// (B, w, c) -> (B, c, w)
template <typename T>
BasicTensor<T> swap_last(const BasicTensor<T>& x) {
  const std::size_t B = x.dim(0), a = x.dim(1), b = x.dim(2);
  BasicTensor<T> y(Shape{B, b, a});
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t i = 0; i < a; ++i)
      for (std::size_t j = 0; j < b; ++j) y(n, j, i) = x(n, i, j);
  return y;
}

void check_valid(std::span<const std::uint8_t> valid, std::size_t B, std::size_t w) {
  if (valid.empty()) return;
  if (valid.size() != B * w) throw ShapeError("validity mask must hold batch x window flags");
  for (std::size_t b = 0; b < B; ++b) {
    bool any = false;
    for (std::size_t t = 0; t < w; ++t) any = any || valid[b * w + t];
    if (!any) throw DataError("sample " + std::to_string(b) + " has no valid time step");
  }
}

/// Classification head reduction shared by the training and frozen paths.
template <typename T>
BasicTensor<T> reduce_logits(const ModelConfig& cfg, const BasicTensor<T>& per, std::span<const std::uint8_t> valid) {
  const std::size_t B = per.dim(0), rows = per.dim(1), l = per.dim(2);
  BasicTensor<T> out(Shape{B, l});
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t count = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      if (cfg.head == ClassHead::kStepAverage && !valid.empty() && !valid[b * rows + r]) continue;
      ++count;
      for (std::size_t c = 0; c < l; ++c) out(b, c) += per(b, r, c);
    }
    for (std::size_t c = 0; c < l; ++c) out(b, c) /= static_cast<T>(count);
  }
  return out;
}

}  // namespace

Task parse_task(const std::string& s) { return lookup(kTasks, s, "task"); }
std::string to_string(Task t) { return name_of(kTasks, t); }
NormPolicy parse_norm(const std::string& s) { return lookup(kNorms, s, "normalization"); }
std::string to_string(NormPolicy n) { return name_of(kNorms, n); }
PosEncoding parse_pos_encoding(const std::string& s) { return lookup(kPos, s, "positional encoding"); }
std::string to_string(PosEncoding p) { return name_of(kPos, p); }
ClassHead parse_class_head(const std::string& s) { return lookup(kHeads, s, "classification head"); }
std::string to_string(ClassHead h) { return name_of(kHeads, h); }
ScoreGradRule parse_score_rule(const std::string& s) { return lookup(kRules, s, "score gradient rule"); }
std::string to_string(ScoreGradRule r) { return name_of(kRules, r); }

ModelConfig ModelConfig::resolved() const {
  ModelConfig c = *this;
  if (!c.attention) {
    if (c.dense)
      c.attention = AttentionVariant::kCanonical;
    else
      c.attention = c.task == Task::kClassification ? AttentionVariant::kQkvRandom : AttentionVariant::kStepT;
  }
  if (!c.norm)
    c.norm = c.task == Task::kClassification ? NormPolicy::kBatch
             : c.task == Task::kForecasting  ? NormPolicy::kLayer
                                             : NormPolicy::kNone;
  if (!c.pos)
    c.pos = c.dense && c.task == Task::kClassification ? PosEncoding::kLearnable : PosEncoding::kSinusoidal;
  if (!c.activation_prune_rate) c.activation_prune_rate = c.dense ? 0.0 : c.prune_rate;
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (m == 0 || d == 0 || w == 0 || layers == 0 || ff == 0) fail("m, w, d, layers and ff must be positive");
  if (heads == 0 || d % heads != 0) fail("d=" + std::to_string(d) + " is not divisible by h=" + std::to_string(heads));
  if (!(prune_rate >= 0.0 && prune_rate < 1.0)) fail("prune rate must lie in [0,1)");
  if (activation_prune_rate && !(*activation_prune_rate >= 0.0 && *activation_prune_rate < 1.0))
    fail("activation prune rate must lie in [0,1)");
  if (task == Task::kClassification && classes < 2) fail("classification needs at least 2 classes");
  if (attention == AttentionVariant::kStepT && w < 2) fail("step-T attention needs w >= 2");
  if (pos == PosEncoding::kLearnable && pos_table_rows < w) fail("positional table shorter than the window");
  if (pos == PosEncoding::kLearnable && !dense) fail("SBT models use the sinusoidal encoding");
}

nlohmann::json ModelConfig::to_json() const {
  nlohmann::json j;
  j["name"] = name;
  j["task"] = to_string(task);
  j["m"] = m;
  j["w"] = w;
  j["d"] = d;
  j["heads"] = heads;
  j["layers"] = layers;
  j["ff"] = ff;
  j["classes"] = classes;
  j["dense"] = dense;
  j["prune_rate"] = prune_rate;
  if (activation_prune_rate) j["activation_prune_rate"] = *activation_prune_rate;
  if (attention) j["attention"] = sbt::to_string(*attention);
  if (norm) j["norm"] = to_string(*norm);
  if (pos) j["pos"] = to_string(*pos);
  j["head"] = to_string(head);
  j["scale_per_head"] = scale_per_head;
  j["pos_table_rows"] = pos_table_rows;
  j["score_rule"] = to_string(score_rule);
  j["alpha_gradient"] = alpha_gradient;
  return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.name = j.value("name", c.name);
    c.task = parse_task(j.at("task").get<std::string>());
    c.m = j.at("m").get<std::size_t>();
    c.w = j.at("w").get<std::size_t>();
    c.d = j.at("d").get<std::size_t>();
    c.heads = j.value("heads", c.heads);
    c.layers = j.value("layers", c.layers);
    c.ff = j.value("ff", c.ff);
    c.classes = j.value("classes", c.classes);
    c.dense = j.value("dense", c.dense);
    c.prune_rate = j.value("prune_rate", c.prune_rate);
    if (j.contains("activation_prune_rate")) c.activation_prune_rate = j["activation_prune_rate"].get<double>();
    if (j.contains("attention")) c.attention = parse_attention_variant(j["attention"].get<std::string>());
    if (j.contains("norm")) c.norm = parse_norm(j["norm"].get<std::string>());
    if (j.contains("pos")) c.pos = parse_pos_encoding(j["pos"].get<std::string>());
    if (j.contains("head")) c.head = parse_class_head(j["head"].get<std::string>());
    c.scale_per_head = j.value("scale_per_head", c.scale_per_head);
    c.pos_table_rows = j.value("pos_table_rows", c.pos_table_rows);
    if (j.contains("score_rule")) c.score_rule = parse_score_rule(j["score_rule"].get<std::string>());
    c.alpha_gradient = j.value("alpha_gradient", c.alpha_gradient);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
}

ModelConfig preset_config(const std::string& name, bool dense) {
  ModelConfig c = ModelConfig::from_json(preset_document(name));
  c.dense = dense;
  return c;
}

// ---------------------------------------------------------------------------
// Census

std::size_t Census::fp32_params() const {
  std::size_t n = 0;
  for (const auto& m : modules) n += m.fp32;
  return n;
}

std::size_t Census::binary_params() const {
  std::size_t n = 0;
  for (const auto& m : modules) n += m.binary;
  return n;
}

std::size_t Census::alpha_count() const {
  std::size_t n = 0;
  for (const auto& m : modules) n += m.alpha;
  return n;
}

std::size_t Census::binarized_modules() const {
  return static_cast<std::size_t>(
      std::count_if(modules.begin(), modules.end(), [](const ModuleCensus& m) { return m.binary > 0; }));
}

double Census::surviving_params() const {
  double n = 0.0;
  for (const auto& m : modules) {
    if (m.binary) n += static_cast<double>(kept_count(m.binary, 1.0 - m.keep_rate));
    n += static_cast<double>(m.fp32);
  }
  return n;
}

Census count_params(const ModelConfig& raw) {
  const ModelConfig cfg = raw.resolved();
  cfg.validate();
  const double kr = 1.0 - cfg.prune_rate;
  Census c;
  auto linear = [&](const std::string& name, std::size_t out, std::size_t in) {
    ModuleCensus mc{name, cfg.dense ? "dense_linear" : "binary_linear", out * in};
    if (cfg.dense) {
      mc.fp32 = out * in + out;
    } else {
      mc.binary = out * in;
      mc.alpha = 1;
      mc.keep_rate = kr;
    }
    c.modules.push_back(mc);
  };
  auto norm = [&](const std::string& name) {
    const std::size_t d = cfg.d;
    if (*cfg.norm == NormPolicy::kNone) return;
    if (*cfg.norm == NormPolicy::kLayer && !cfg.dense) {
      c.modules.push_back({name, "binary_gain", d, 0, d, 1, kr});
      return;
    }
    c.modules.push_back({name, "norm", 2 * d, 2 * d, 0, 0, 1.0});
  };
  linear("input", cfg.d, cfg.m);
  if (*cfg.pos == PosEncoding::kLearnable) {
    const std::size_t n = cfg.pos_table_rows * cfg.d;
    c.modules.push_back({"pos_table", "pos_table", n, n, 0, 0, 1.0});
  }
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    for (const char* proj : {"q", "k", "v", "o"}) linear(p + proj, cfg.d, cfg.d);
    linear(p + "ff1", cfg.ff, cfg.d);
    linear(p + "ff2", cfg.d, cfg.ff);
    norm(p + "norm1");
    norm(p + "norm2");
  }
  if (cfg.task == Task::kClassification)
    linear("decoder", cfg.classes, cfg.head == ClassHead::kStepAverage ? cfg.d : cfg.w);
  else
    linear("decoder", cfg.m, cfg.d);
  return c;
}

// ---------------------------------------------------------------------------
// Normalization module

Tensor NormModule::forward(const Tensor& x, bool training) {
  const std::size_t d = x.shape().back();
  if (binary_gain) {
    binary_gain->refresh();
    return normalize<double>(x, NormKind::kLayer, binary_gain->effective().values(), {}, 1e-5, &cache);
  }
  std::span<const double> g = gain->value.values();
  std::span<const double> b = bias->value.values();
  if (kind == NormKind::kLayer) return normalize<double>(x, kind, g, b, 1e-5, &cache);
  if (!training) return normalize_with_stats<double>(x, running_mean, running_var, g, b);
  Tensor y = normalize<double>(x, kind, g, b, 1e-5, &cache);
  const double rows = static_cast<double>(x.size() / d);
  const double unbias = rows > 1 ? rows / (rows - 1) : 1.0;
  for (std::size_t j = 0; j < d; ++j) {
    running_mean[j] = (1 - momentum) * running_mean[j] + momentum * cache.mean[j];
    running_var[j] = (1 - momentum) * running_var[j] + momentum * cache.var[j] * unbias;
  }
  return y;
}

Tensor NormModule::backward(const Tensor& g) {
  if (binary_gain) {
    auto r = normalize_backward<double>(cache, NormKind::kLayer, binary_gain->effective().values(), g);
    binary_gain->accumulate_effective_grad(r.dgain);
    return std::move(r.dx);
  }
  auto r = normalize_backward<double>(cache, kind, gain->value.values(), g);
  for (std::size_t j = 0; j < r.dgain.size(); ++j) {
    gain->grad[j] += r.dgain[j];
    bias->grad[j] += r.dbias[j];
  }
  return std::move(r.dx);
}

void NormModule::collect(std::vector<GradSlot*>& out) {
  if (binary_gain) {
    out.push_back(&binary_gain->scores());
    return;
  }
  out.push_back(&*gain);
  out.push_back(&*bias);
}

FrozenNorm NormModule::freeze() const {
  FrozenNorm f;
  f.name = name;
  f.kind = kind;
  if (binary_gain) {
    f.binary_gain = binary_gain->freeze();
    f.gain = f.binary_gain->materialize<float>().storage();
    return f;
  }
  f.gain = to_float(gain->value.values());
  f.bias = to_float(bias->value.values());
  if (kind == NormKind::kBatch) {
    f.mean = to_float(running_mean);
    f.var = to_float(running_var);
  }
  return f;
}

// ---------------------------------------------------------------------------
// Trainable model

TransformerModel::TransformerModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg.resolved()) {
  cfg_.validate();
  Rng rng(seed);
  const BipropLayer::Options opt{cfg_.prune_rate, cfg_.score_rule, cfg_.alpha_gradient};
  auto make = [&](std::size_t out, std::size_t in, const std::string& id) {
    return cfg_.dense ? Linear::dense(out, in, true, rng, id) : Linear::binary(out, in, opt, rng, id);
  };
  auto make_norm = [&](const std::string& id) -> std::optional<NormModule> {
    if (*cfg_.norm == NormPolicy::kNone) return std::nullopt;
    NormModule n;
    n.name = id;
    n.kind = *cfg_.norm == NormPolicy::kBatch ? NormKind::kBatch : NormKind::kLayer;
    if (n.kind == NormKind::kLayer && !cfg_.dense) {
      n.binary_gain = BipropLayer::layernorm_gain(cfg_.d, opt, rng, id + ".scores");
    } else {
      n.gain = GradSlot(id + ".gain", Tensor(Shape{cfg_.d}, 1.0));
      n.bias = GradSlot(id + ".bias", Tensor(Shape{cfg_.d}, 0.0));
    }
    if (n.kind == NormKind::kBatch) {
      n.running_mean.assign(cfg_.d, 0.0);
      n.running_var.assign(cfg_.d, 1.0);
    }
    return n;
  };

  input_ = make(cfg_.d, cfg_.m, "input");
  if (*cfg_.pos == PosEncoding::kLearnable) {
    Tensor t(Shape{cfg_.pos_table_rows, cfg_.d});
    for (auto& v : t.values()) v = rng.uniform(-0.02, 0.02);
    pos_table_ = GradSlot("pos_table", std::move(t));
  } else {
    sinusoid_ = sinusoidal_encoding<double>(cfg_.w, cfg_.d);
  }
  for (std::size_t i = 0; i < cfg_.layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    EncoderLayer layer;
    AttentionPlan plan = AttentionPlan::make(cfg_.heads, cfg_.d, cfg_.w, *cfg_.attention,
                                             *cfg_.activation_prune_rate, rng.fork(), cfg_.scale_per_head);
    Linear q = make(cfg_.d, cfg_.d, p + "q");
    Linear k = make(cfg_.d, cfg_.d, p + "k");
    Linear v = make(cfg_.d, cfg_.d, p + "v");
    Linear o = make(cfg_.d, cfg_.d, p + "o");
    layer.attn = MultiHeadAttention(std::move(plan), std::move(q), std::move(k), std::move(v), std::move(o));
    layer.ff1 = make(cfg_.ff, cfg_.d, p + "ff1");
    layer.ff2 = make(cfg_.d, cfg_.ff, p + "ff2");
    layer.norm1 = make_norm(p + "norm1");
    layer.norm2 = make_norm(p + "norm2");
    layers_.push_back(std::move(layer));
  }
  if (cfg_.task == Task::kClassification)
    decoder_ = make(cfg_.classes, cfg_.head == ClassHead::kStepAverage ? cfg_.d : cfg_.w, "decoder");
  else
    decoder_ = make(cfg_.m, cfg_.d, "decoder");
}

Tensor TransformerModel::forward(const Tensor& x, std::span<const std::uint8_t> valid, bool training) {
  if (x.rank() != 3 || x.dim(1) != cfg_.w || x.dim(2) != cfg_.m)
    throw ShapeError("model input " + x.shape().str() + " does not match (B," + std::to_string(cfg_.w) + "," +
                     std::to_string(cfg_.m) + ")");
  const std::size_t B = x.dim(0), w = cfg_.w, d = cfg_.d;
  check_valid(valid, B, w);
  batch_ = B;
  valid_.assign(valid.begin(), valid.end());
  const std::span<const std::uint8_t> key_valid =
      cfg_.task == Task::kClassification ? std::span<const std::uint8_t>(valid_) : std::span<const std::uint8_t>();

  Tensor z = input_.forward(x);
  const Tensor& pe = pos_table_ ? pos_table_->value : sinusoid_;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < w * d; ++i) z[b * w * d + i] += pe[i];

  for (auto& layer : layers_) {
    Tensor a = layer.attn.forward(z, key_valid);
    for (std::size_t i = 0; i < z.size(); ++i) a[i] += z[i];
    Tensor n1 = layer.norm1 ? layer.norm1->forward(a, training) : std::move(a);
    layer.hidden = layer.ff1.forward(n1);
    Tensor h = layer.hidden;
    relu_inplace(h);
    Tensor f = layer.ff2.forward(h);
    for (std::size_t i = 0; i < f.size(); ++i) f[i] += n1[i];
    z = layer.norm2 ? layer.norm2->forward(f, training) : std::move(f);
  }
  pre_relu_ = z;
  relu_inplace(z);
  head_in_ = z;

  if (cfg_.task != Task::kClassification) return decoder_.forward(head_in_);
  if (cfg_.head == ClassHead::kStepAverage) return reduce_logits<double>(cfg_, decoder_.forward(head_in_), valid_);
  Tensor zt = head_in_;
  if (!valid_.empty())
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < w; ++t)
        if (!valid_[b * w + t])
          for (std::size_t c = 0; c < d; ++c) zt(b, t, c) = 0.0;
  return reduce_logits<double>(cfg_, decoder_.forward(swap_last(zt)), {});
}

Tensor TransformerModel::backward(const Tensor& g) {
  const std::size_t B = batch_, w = cfg_.w, d = cfg_.d;
  Tensor dz;
  if (cfg_.task != Task::kClassification) {
    dz = decoder_.backward(g);
  } else {
    const std::size_t l = cfg_.classes;
    if (cfg_.head == ClassHead::kStepAverage) {
      Tensor gper(Shape{B, w, l});
      for (std::size_t b = 0; b < B; ++b) {
        std::size_t count = 0;
        for (std::size_t t = 0; t < w; ++t) count += valid_.empty() || valid_[b * w + t];
        for (std::size_t t = 0; t < w; ++t) {
          if (!valid_.empty() && !valid_[b * w + t]) continue;
          for (std::size_t c = 0; c < l; ++c) gper(b, t, c) = g(b, c) / static_cast<double>(count);
        }
      }
      dz = decoder_.backward(gper);
    } else {
      Tensor gper(Shape{B, d, l});
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t r = 0; r < d; ++r)
          for (std::size_t c = 0; c < l; ++c) gper(b, r, c) = g(b, c) / static_cast<double>(d);
      dz = swap_last(decoder_.backward(gper));
      if (!valid_.empty())
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t t = 0; t < w; ++t)
            if (!valid_[b * w + t])
              for (std::size_t c = 0; c < d; ++c) dz(b, t, c) = 0.0;
    }
  }
  for (std::size_t i = 0; i < dz.size(); ++i)
    if (pre_relu_[i] <= 0.0) dz[i] = 0.0;

  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    EncoderLayer& layer = *it;
    Tensor df = layer.norm2 ? layer.norm2->backward(dz) : std::move(dz);
    Tensor dh = layer.ff2.backward(df);
    for (std::size_t i = 0; i < dh.size(); ++i)
      if (layer.hidden[i] <= 0.0) dh[i] = 0.0;
    Tensor dn1 = layer.ff1.backward(dh);
    for (std::size_t i = 0; i < dn1.size(); ++i) dn1[i] += df[i];
    Tensor da = layer.norm1 ? layer.norm1->backward(dn1) : std::move(dn1);
    dz = layer.attn.backward(da);
    for (std::size_t i = 0; i < dz.size(); ++i) dz[i] += da[i];
  }
  if (pos_table_)
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < w * d; ++i) pos_table_->grad[i] += dz[b * w * d + i];
  return input_.backward(dz);
}

std::vector<GradSlot*> TransformerModel::parameters() {
  std::vector<GradSlot*> out;
  input_.collect(out);
  if (pos_table_) out.push_back(&*pos_table_);
  for (auto& layer : layers_) {
    layer.attn.collect(out);
    layer.ff1.collect(out);
    layer.ff2.collect(out);
    if (layer.norm1) layer.norm1->collect(out);
    if (layer.norm2) layer.norm2->collect(out);
  }
  decoder_.collect(out);
  return out;
}

std::vector<BipropLayer*> TransformerModel::biprop_modules() {
  std::vector<BipropLayer*> out;
  auto add = [&](Linear& l) {
    if (l.is_binary()) out.push_back(&l.biprop());
  };
  add(input_);
  for (auto& layer : layers_) {
    add(layer.attn.q());
    add(layer.attn.k());
    add(layer.attn.v());
    add(layer.attn.o());
    add(layer.ff1);
    add(layer.ff2);
    if (layer.norm1 && layer.norm1->binary_gain) out.push_back(&*layer.norm1->binary_gain);
    if (layer.norm2 && layer.norm2->binary_gain) out.push_back(&*layer.norm2->binary_gain);
  }
  add(decoder_);
  return out;
}

std::vector<const BipropLayer*> TransformerModel::biprop_modules() const {
  auto mods = const_cast<TransformerModel*>(this)->biprop_modules();
  return {mods.begin(), mods.end()};
}

std::size_t TransformerModel::parameter_count() const {
  std::size_t n = 0;
  for (GradSlot* s : const_cast<TransformerModel*>(this)->parameters()) n += s->value.size();
  return n;
}

namespace {

FrozenLinear freeze_linear(const Linear& l) {
  FrozenLinear f;
  f.name = l.id();
  f.out = l.out_features();
  f.in = l.in_features();
  if (l.is_binary()) {
    f.binary = l.biprop().freeze();
  } else {
    f.weight = l.weight().value.cast<float>();
    if (l.bias()) f.bias = to_float(l.bias()->value.values());
  }
  return f;
}

void materialize(FrozenLinear& f) {
  if (f.binary) f.weight = f.binary->materialize<float>();
}

}  // namespace

FrozenModel TransformerModel::freeze() const {
  FrozenModel fm;
  fm.config = cfg_;
  fm.input = freeze_linear(input_);
  if (pos_table_) fm.pos = pos_table_->value.cast<float>();
  for (const auto& layer : layers_) {
    FrozenLayer fl;
    fl.plan = layer.attn.plan();
    fl.q = freeze_linear(layer.attn.q());
    fl.k = freeze_linear(layer.attn.k());
    fl.v = freeze_linear(layer.attn.v());
    fl.o = freeze_linear(layer.attn.o());
    fl.ff1 = freeze_linear(layer.ff1);
    fl.ff2 = freeze_linear(layer.ff2);
    if (layer.norm1) fl.norm1 = layer.norm1->freeze();
    if (layer.norm2) fl.norm2 = layer.norm2->freeze();
    fm.layers.push_back(std::move(fl));
  }
  fm.decoder = freeze_linear(decoder_);
  fm.rebuild();
  return fm;
}

// ---------------------------------------------------------------------------
// Frozen model

namespace {

template <typename Apply>
TensorF attend(const FrozenLayer& l, const TensorF& z, std::span<const std::uint8_t> key_valid, Apply& apply) {
  TensorF q = apply(l.q, z), k = apply(l.k, z), v = apply(l.v, z);
  if (l.plan.variant == AttentionVariant::kQkvRandom) {
    apply_activation_mask<float>(q, l.plan.qkv_masks[0]);
    apply_activation_mask<float>(k, l.plan.qkv_masks[1]);
    apply_activation_mask<float>(v, l.plan.qkv_masks[2]);
  } else if (l.plan.variant == AttentionVariant::kQkvMagnitude) {
    apply_magnitude_mask<float>(q, l.plan.activation_prune_rate);
    apply_magnitude_mask<float>(k, l.plan.activation_prune_rate);
    apply_magnitude_mask<float>(v, l.plan.activation_prune_rate);
  }
  return apply(l.o, attention_core<float>(l.plan, q, k, v, key_valid));
}

}  // namespace

void FrozenModel::rebuild() {
  config = config.resolved();
  materialize(input);
  materialize(decoder);
  if (*config.pos == PosEncoding::kSinusoidal) pos = sinusoidal_encoding<float>(config.w, config.d);
  for (auto& l : layers) {
    QkvMasks masks = l.plan.qkv_masks;
    l.plan = AttentionPlan::make(config.heads, config.d, config.w, *config.attention, *config.activation_prune_rate,
                                 0, config.scale_per_head);
    l.plan.qkv_masks = std::move(masks);
    for (FrozenLinear* f : {&l.q, &l.k, &l.v, &l.o, &l.ff1, &l.ff2}) materialize(*f);
    for (auto* n : {&l.norm1, &l.norm2})
      if (*n && (*n)->binary_gain) (*n)->gain = (*n)->binary_gain->materialize<float>().storage();
  }
}

TensorF FrozenModel::forward(const TensorF& x, std::span<const std::uint8_t> valid) const {
  return forward(x, valid, ForwardHooks{});
}

TensorF FrozenModel::forward(const TensorF& x, std::span<const std::uint8_t> valid, const ForwardHooks& hooks) const {
  auto apply_linear = [&](const FrozenLinear& l, const TensorF& in) {
    return hooks.linear ? hooks.linear(l, in) : linear_reference(l, in);
  };
  const ModelConfig& cfg = config;
  if (x.rank() != 3 || x.dim(1) != cfg.w || x.dim(2) != cfg.m)
    throw ShapeError("model input " + x.shape().str() + " does not match (B," + std::to_string(cfg.w) + "," +
                     std::to_string(cfg.m) + ")");
  const std::size_t B = x.dim(0), w = cfg.w, d = cfg.d;
  check_valid(valid, B, w);
  const std::span<const std::uint8_t> key_valid =
      cfg.task == Task::kClassification ? valid : std::span<const std::uint8_t>();

  TensorF z = apply_linear(input, x);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < w * d; ++i) z[b * w * d + i] += pos[i];
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const FrozenLayer& l = layers[li];
    std::optional<TensorF> fast = hooks.attention ? hooks.attention(li, z, key_valid) : std::nullopt;
    TensorF a = fast ? apply_linear(l.o, *fast) : attend(l, z, key_valid, apply_linear);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += z[i];
    TensorF n1 = l.norm1 ? apply_norm(*l.norm1, a) : std::move(a);
    TensorF h = apply_linear(l.ff1, n1);
    relu_inplace(h);
    TensorF f = apply_linear(l.ff2, h);
    for (std::size_t i = 0; i < f.size(); ++i) f[i] += n1[i];
    z = l.norm2 ? apply_norm(*l.norm2, f) : std::move(f);
  }
  relu_inplace(z);
  if (cfg.task != Task::kClassification) return apply_linear(decoder, z);
  if (cfg.head == ClassHead::kStepAverage) return reduce_logits<float>(cfg, apply_linear(decoder, z), valid);
  if (!valid.empty())
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < w; ++t)
        if (!valid[b * w + t])
          for (std::size_t c = 0; c < d; ++c) z(b, t, c) = 0.0f;
  return reduce_logits<float>(cfg, apply_linear(decoder, swap_last(z)), {});
}

}  // namespace sbt
