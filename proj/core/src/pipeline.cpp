#include "sbt/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>

#include "sbt/costmodel.hpp"
#include "sbt/log.hpp"
#include "sbt/random.hpp"

namespace sbt {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// CSV

std::size_t Table::column(const std::string& name) const {
  auto it = std::find(columns.begin(), columns.end(), name);
  if (it == columns.end()) throw DataError("missing column '" + name + "'");
  return static_cast<std::size_t>(it - columns.begin());
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) {
    const auto a = cell.find_first_not_of(" \t\r\"");
    const auto b = cell.find_last_not_of(" \t\r\"");
    out.push_back(a == std::string::npos ? std::string() : cell.substr(a, b - a + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_number(const std::string& s, const fs::path& path, std::size_t line) {
  double v = 0.0;
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end)
    throw DataError(path.string() + ":" + std::to_string(line) + ": not a number: '" + s + "'");
  return v;
}

}  // namespace

Table read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  Table t;
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + " is empty");
  t.columns = split_line(line);
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto cells = split_line(line);
    if (cells.size() != t.columns.size())
      throw DataError(path.string() + ":" + std::to_string(n) + ": expected " + std::to_string(t.columns.size()) +
                      " fields, got " + std::to_string(cells.size()));
    std::vector<double> row(cells.size());
    for (std::size_t i = 0; i < cells.size(); ++i) row[i] = parse_number(cells[i], path, n);
    t.rows.push_back(std::move(row));
  }
  return t;
}

void write_csv(const fs::path& path, const Table& table) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (std::size_t i = 0; i < table.columns.size(); ++i) out << (i ? "," : "") << table.columns[i];
  out << '\n';
  out.precision(9);
  for (const auto& row : table.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
    out << '\n';
  }
}

DatasetManifest DatasetManifest::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest " + path.string() + ": " + e.what());
  }
  return from_json(j, path.parent_path());
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j, const fs::path& base) {
  try {
    DatasetManifest m;
    m.task = parse_task(j.at("task").get<std::string>());
    auto resolve = [&](const char* key) -> fs::path {
      if (!j.contains(key) || j[key].is_null()) return {};
      fs::path p = j[key].get<std::string>();
      return p.is_absolute() ? p : base / p;
    };
    m.train = resolve("train");
    m.val = resolve("val");
    m.test = resolve("test");
    m.features = j.at("features").get<std::vector<std::string>>();
    m.label = j.value("label", std::string());
    m.series = j.value("series", m.series);
    m.window = j.value("window", std::size_t{0});
    m.stride = j.value("stride", std::size_t{1});
    if (m.train.empty()) throw ConfigError("manifest has no training table");
    if (m.features.empty()) throw ConfigError("manifest lists no feature columns");
    if (m.task != Task::kForecasting && m.label.empty() && m.task == Task::kClassification)
      throw ConfigError("classification manifest needs a label column");
    if (m.stride == 0) throw ConfigError("stride must be positive");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed manifest: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// NormStats

NormStats NormStats::fit(const Tensor& data, std::span<const std::uint8_t> row_valid) {
  if (data.rank() != 2) throw ShapeError("NormStats::fit expects a rows x features matrix");
  const std::size_t n = data.dim(0), m = data.dim(1);
  std::size_t count = 0;
  NormStats s;
  s.mean.assign(m, 0.0);
  s.stddev.assign(m, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    if (!row_valid.empty() && !row_valid[r]) continue;
    ++count;
    for (std::size_t j = 0; j < m; ++j) s.mean[j] += data(r, j);
  }
  if (count < 2) throw DataError("normalization needs at least 2 rows");
  for (auto& v : s.mean) v /= static_cast<double>(count);
  for (std::size_t r = 0; r < n; ++r) {
    if (!row_valid.empty() && !row_valid[r]) continue;
    for (std::size_t j = 0; j < m; ++j) s.stddev[j] += (data(r, j) - s.mean[j]) * (data(r, j) - s.mean[j]);
  }
  for (std::size_t j = 0; j < m; ++j) {
    s.stddev[j] = std::sqrt(s.stddev[j] / static_cast<double>(count));
    if (s.stddev[j] < 1e-8) {
      warn("feature " + std::to_string(j) + " is constant on the training split; std floored at 1e-8");
      s.stddev[j] = 1e-8;
    }
  }
  return s;
}

void NormStats::apply(Tensor& data) const {
  const std::size_t m = mean.size();
  if (data.shape().back() != m) throw ShapeError("NormStats: feature count mismatch");
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = (data[i] - mean[i % m]) / stddev[i % m];
}

void NormStats::invert(Tensor& data) const {
  const std::size_t m = mean.size();
  if (data.shape().back() != m) throw ShapeError("NormStats: feature count mismatch");
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = data[i] * stddev[i % m] + mean[i % m];
}

nlohmann::json NormStats::to_json() const { return {{"mean", mean}, {"std", stddev}}; }

NormStats NormStats::from_json(const nlohmann::json& j) {
  NormStats s;
  s.mean = j.at("mean").get<std::vector<double>>();
  s.stddev = j.at("std").get<std::vector<double>>();
  if (s.mean.size() != s.stddev.size()) throw FormatError("normalization statistics of unequal length");
  return s;
}

// ---------------------------------------------------------------------------
// Windows

std::vector<std::size_t> make_windows(std::size_t length, std::size_t w, std::size_t stride,
                                      std::span<const std::uint8_t> flags, bool benign_filter) {
  if (w == 0 || stride == 0) throw ConfigError("window length and stride must be positive");
  if (length < w)
    throw DataError("series of length " + std::to_string(length) + " is shorter than the window " + std::to_string(w));
  if (benign_filter && flags.size() != length) throw DataError("benign filter needs one anomaly flag per row");
  // last_anomaly_before[t]: any flag in [t-w+1, t-1], tracked with a running count.
  std::vector<std::size_t> prefix;
  if (benign_filter) {
    prefix.assign(length + 1, 0);
    for (std::size_t i = 0; i < length; ++i) prefix[i + 1] = prefix[i] + (flags[i] ? 1 : 0);
  }
  std::vector<std::size_t> ends;
  for (std::size_t t = w - 1; t < length; t += stride) {
    if (benign_filter && prefix[t] - prefix[t + 1 - w] > 0) continue;
    ends.push_back(t);
  }
  return ends;
}

Tensor forecast_mask_input(Tensor& window) {
  const bool batched = window.rank() == 3;
  if (!batched && window.rank() != 2) throw ShapeError("forecast_mask_input expects (w,m) or (B,w,m)");
  const std::size_t B = batched ? window.dim(0) : 1;
  const std::size_t w = window.dim(batched ? 1 : 0), m = window.dim(batched ? 2 : 1);
  Tensor target(batched ? Shape{B, m} : Shape{m});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < m; ++j) {
      double& v = window[(b * w + w - 1) * m + j];
      target[b * m + j] = v;
      v = 0.0;
    }
  return target;
}

WindowSource WindowSource::from_samples(Tensor x, std::vector<std::uint8_t> valid, std::vector<int> labels) {
  if (x.rank() != 3) throw ShapeError("samples must be (N, w, m)");
  if (labels.size() != x.dim(0)) throw DataError("one label per sample required");
  if (!valid.empty() && valid.size() != x.dim(0) * x.dim(1)) throw DataError("validity flags must be N*w");
  WindowSource s;
  s.task_ = Task::kClassification;
  s.w_ = x.dim(1);
  s.m_ = x.dim(2);
  s.samples_ = std::move(x);
  s.valid_ = std::move(valid);
  s.labels_ = std::move(labels);
  return s;
}

WindowSource WindowSource::from_series(Task task, Tensor series, std::size_t w, std::size_t stride,
                                       std::vector<std::uint8_t> flags, bool benign_filter) {
  if (task == Task::kClassification) throw ConfigError("classification data comes as samples, not a series");
  if (series.rank() != 2) throw ShapeError("series must be (T, m)");
  if (!flags.empty() && flags.size() != series.dim(0)) throw DataError("one anomaly flag per row required");
  WindowSource s;
  s.task_ = task;
  s.w_ = w;
  s.m_ = series.dim(1);
  s.ends_ = make_windows(series.dim(0), w, stride, flags, benign_filter);
  s.series_ = std::move(series);
  s.flags_ = std::move(flags);
  return s;
}

std::size_t WindowSource::size() const {
  return task_ == Task::kClassification ? (samples_.empty() ? 0 : samples_.dim(0)) : ends_.size();
}

WindowBatch WindowSource::gather(std::span<const std::size_t> idx) const {
  const std::size_t B = idx.size(), w = w_, m = m_;
  WindowBatch b;
  b.x = Tensor(Shape{B, w, m});
  if (task_ == Task::kClassification) {
    for (std::size_t i = 0; i < B; ++i) {
      std::copy_n(samples_.data() + idx[i] * w * m, w * m, b.x.data() + i * w * m);
      b.labels.push_back(labels_[idx[i]]);
      if (!valid_.empty()) b.valid.insert(b.valid.end(), valid_.begin() + idx[i] * w, valid_.begin() + (idx[i] + 1) * w);
    }
    return b;
  }
  for (std::size_t i = 0; i < B; ++i) {
    const std::size_t t = ends_[idx[i]];
    std::copy_n(series_.data() + (t + 1 - w) * m, w * m, b.x.data() + i * w * m);
    b.ends.push_back(t);
  }
  if (task_ == Task::kForecasting) {
    b.target = forecast_mask_input(b.x);
  } else {
    b.target = Tensor(Shape{B, m});
    for (std::size_t i = 0; i < B; ++i) std::copy_n(b.x.data() + (i * w + w - 1) * m, m, b.target.data() + i * m);
  }
  return b;
}

WindowBatch WindowSource::range(std::size_t begin, std::size_t end) const {
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return gather(idx);
}

namespace {

Tensor feature_matrix(const Table& t, const std::vector<std::string>& features) {
  std::vector<std::size_t> cols;
  for (const auto& f : features) cols.push_back(t.column(f));
  Tensor x(Shape{t.rows.size(), cols.size()});
  for (std::size_t r = 0; r < t.rows.size(); ++r)
    for (std::size_t j = 0; j < cols.size(); ++j) x(r, j) = t.rows[r][cols[j]];
  return x;
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  const std::size_t m = x.dim(1);
  Tensor out(Shape{end - begin, m});
  std::copy_n(x.data() + begin * m, (end - begin) * m, out.data());
  return out;
}

struct ClassSamples {
  Tensor x;
  std::vector<std::uint8_t> valid;
  std::vector<int> labels;
};

ClassSamples group_samples(const Table& t, const DatasetManifest& man, std::size_t w, const NormStats* stats) {
  const std::size_t sid = t.column(man.series), lab = t.column(man.label);
  Tensor feats = feature_matrix(t, man.features);
  if (stats) stats->apply(feats);
  const std::size_t m = man.features.size();
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // [begin, end) rows per sample, in order of appearance
  std::map<double, std::size_t> seen;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    if (r == 0 || t.rows[r][sid] != t.rows[r - 1][sid]) {
      if (seen.count(t.rows[r][sid])) throw DataError("rows of sample " + std::to_string(t.rows[r][sid]) + " are not contiguous");
      seen[t.rows[r][sid]] = spans.size();
      spans.push_back({r, r});
    }
    spans.back().second = r + 1;
  }
  ClassSamples s;
  s.x = Tensor(Shape{spans.size(), w, m});
  s.valid.assign(spans.size() * w, 0);
  for (std::size_t i = 0; i < spans.size(); ++i) {
    const auto [b, e] = spans[i];
    if (e - b > w) throw DataError("sample longer than the window (" + std::to_string(e - b) + " > " + std::to_string(w) + ")");
    const double label = t.rows[b][lab];
    if (label < 0 || label != std::floor(label)) throw DataError("class labels must be non-negative integers");
    s.labels.push_back(static_cast<int>(label));
    for (std::size_t r = b; r < e; ++r) {
      std::copy_n(feats.data() + r * m, m, s.x.data() + (i * w + (r - b)) * m);
      s.valid[i * w + (r - b)] = 1;
    }
  }
  return s;
}

}  // namespace

DatasetSplits load_dataset(const DatasetManifest& man, bool benign_filter, const NormStats* given) {
  DatasetSplits out;
  out.manifest = man;
  if (man.window == 0) throw ConfigError("manifest must give the window length");
  const std::size_t w = man.window;
  Table train = read_csv(man.train);

  if (man.task == Task::kClassification) {
    // Fit statistics on the training rows only.
    Tensor feats = feature_matrix(train, man.features);
    out.stats = given ? *given : NormStats::fit(feats);
    ClassSamples tr = group_samples(train, man, w, &out.stats);
    int max_label = *std::max_element(tr.labels.begin(), tr.labels.end());
    ClassSamples va, te;
    if (!man.val.empty()) va = group_samples(read_csv(man.val), man, w, &out.stats);
    if (!man.test.empty()) te = group_samples(read_csv(man.test), man, w, &out.stats);
    for (const auto* s : {&va, &te})
      for (int l : s->labels) max_label = std::max(max_label, l);
    out.classes = static_cast<std::size_t>(max_label) + 1;
    out.train = WindowSource::from_samples(std::move(tr.x), std::move(tr.valid), std::move(tr.labels));
    if (!man.val.empty()) out.val = WindowSource::from_samples(std::move(va.x), std::move(va.valid), std::move(va.labels));
    if (!man.test.empty()) out.test = WindowSource::from_samples(std::move(te.x), std::move(te.valid), std::move(te.labels));
    return out;
  }

  Tensor feats = feature_matrix(train, man.features);
  Tensor val_feats;
  if (!man.val.empty()) {
    val_feats = feature_matrix(read_csv(man.val), man.features);
  } else {
    const std::size_t n = feats.dim(0);
    const std::size_t cut = n - n / 5;
    val_feats = slice_rows(feats, cut, n);
    feats = slice_rows(feats, 0, cut);
  }
  out.stats = given ? *given : NormStats::fit(feats);
  out.stats.apply(feats);
  out.stats.apply(val_feats);
  out.train = WindowSource::from_series(man.task, std::move(feats), w, man.stride);
  out.val = WindowSource::from_series(man.task, std::move(val_feats), w, man.stride);
  if (!man.test.empty()) {
    Table test = read_csv(man.test);
    Tensor tf = feature_matrix(test, man.features);
    out.stats.apply(tf);
    std::vector<std::uint8_t> flags;
    if (!man.label.empty() && std::find(test.columns.begin(), test.columns.end(), man.label) != test.columns.end()) {
      const std::size_t lab = test.column(man.label);
      for (const auto& row : test.rows) flags.push_back(row[lab] != 0.0 ? 1 : 0);
    }
    out.test = WindowSource::from_series(man.task, std::move(tf), w, man.stride, std::move(flags), benign_filter);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss

LossResult step_loss(Task task, const Tensor& out, const WindowBatch& batch) {
  LossResult r;
  r.grad = Tensor(out.shape());
  if (task == Task::kClassification) {
    const std::size_t B = out.dim(0), l = out.dim(1);
    if (batch.labels.size() != B) throw ShapeError("step_loss: label count mismatch");
    for (std::size_t b = 0; b < B; ++b) {
      const int y = batch.labels[b];
      if (y < 0 || static_cast<std::size_t>(y) >= l) throw DataError("label " + std::to_string(y) + " out of range");
      double mx = out(b, 0);
      for (std::size_t c = 1; c < l; ++c) mx = std::max(mx, out(b, c));
      double z = 0.0;
      for (std::size_t c = 0; c < l; ++c) z += std::exp(out(b, c) - mx);
      const double lse = mx + std::log(z);
      r.loss += lse - out(b, static_cast<std::size_t>(y));
      for (std::size_t c = 0; c < l; ++c)
        r.grad(b, c) = (std::exp(out(b, c) - lse) - (c == static_cast<std::size_t>(y) ? 1.0 : 0.0)) / static_cast<double>(B);
    }
    r.loss /= static_cast<double>(B);
    return r;
  }
  if (out.rank() != 3 || batch.target.rank() != 2 || out.dim(0) != batch.target.dim(0) ||
      out.dim(2) != batch.target.dim(1))
    throw ShapeError("step_loss: output " + out.shape().str() + " vs target " + batch.target.shape().str());
  const std::size_t B = out.dim(0), w = out.dim(1), m = out.dim(2);
  const double scale = 1.0 / static_cast<double>(B * m);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < m; ++j) {
      const double e = out(b, w - 1, j) - batch.target(b, j);
      r.loss += e * e * scale;
      r.grad(b, w - 1, j) = 2.0 * e * scale;
    }
  return r;
}

// ---------------------------------------------------------------------------
// Training

nlohmann::json TrainConfig::to_json() const {
  return {{"lr", lr},         {"epochs", epochs}, {"batch_size", batch_size}, {"seed", seed},
          {"scheduler", scheduler}, {"gamma", gamma}, {"replicates", replicates}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.lr = j.value("lr", c.lr);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.scheduler = j.value("scheduler", c.scheduler);
    c.gamma = j.value("gamma", c.gamma);
    c.replicates = j.value("replicates", c.replicates);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed training config: ") + e.what());
  }
  if (c.batch_size == 0) throw ConfigError("batch size must be positive");
  if (!(c.lr > 0.0)) throw ConfigError("learning rate must be positive");
  return c;
}

nlohmann::json EpochRecord::to_json() const {
  nlohmann::json j = {{"epoch", epoch},   {"train_loss", train_loss}, {"val_loss", val_loss},
                      {"lr", lr},         {"mask_churn", mask_churn}, {"alpha", alphas}};
  if (train_accuracy >= 0) j["train_accuracy"] = train_accuracy;
  if (val_accuracy >= 0) j["val_accuracy"] = val_accuracy;
  return j;
}

namespace {

std::size_t argmax_row(const Tensor& t, std::size_t b) {
  const std::size_t l = t.dim(1);
  std::size_t best = 0;
  for (std::size_t c = 1; c < l; ++c)
    if (t(b, c) > t(b, best)) best = c;
  return best;
}

}  // namespace

TrainResult train(TransformerModel& model, const WindowSource& train_set, const WindowSource* val_set,
                  const TrainConfig& cfg, const EpochCallback& on_epoch) {
  TrainResult result;
  const Task task = model.config().task;
  if (train_set.size() == 0) throw DataError("empty training split");
  if (cfg.epochs == 0) return result;

  Rng rng(cfg.seed ^ 0x5851F42D4C957F2Dull);
  AdamOptions adam;
  adam.lr = cfg.lr;
  std::vector<GradSlot*> params = model.parameters();
  std::vector<BipropLayer*> bmods = model.biprop_modules();
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  std::optional<TransformerModel> best;
  double best_loss = std::numeric_limits<double>::infinity();
  double last_val = std::numeric_limits<double>::infinity();

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::vector<std::uint8_t>> before;
    for (auto* b : bmods) before.push_back(compute_mask(b->scores().value.values(), b->prune_rate()));

    rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      WindowBatch batch = train_set.gather(std::span<const std::size_t>(order.data() + start, stop - start));
      for (auto* p : params) p->zero_grad();
      Tensor out = model.forward(batch.x, batch.valid, true);
      LossResult lr = step_loss(task, out, batch);
      if (!std::isfinite(lr.loss))
        throw NumericError("training diverged: loss is " + std::to_string(lr.loss) + " at epoch " + std::to_string(epoch));
      loss_sum += lr.loss * static_cast<double>(stop - start);
      if (task == Task::kClassification)
        for (std::size_t b = 0; b < stop - start; ++b)
          correct += argmax_row(out, b) == static_cast<std::size_t>(batch.labels[b]);
      model.backward(lr.grad);
      for (auto* p : params) adam_step(*p, adam);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = adam.lr;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    if (task == Task::kClassification) rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
    std::size_t flips = 0, total = 0;
    for (std::size_t i = 0; i < bmods.size(); ++i) {
      auto after = compute_mask(bmods[i]->scores().value.values(), bmods[i]->prune_rate());
      for (std::size_t k = 0; k < after.size(); ++k) flips += after[k] != before[i][k];
      total += after.size();
      rec.alphas.push_back(compute_alpha(bmods[i]->weights().values(), after));
    }
    rec.mask_churn = total ? static_cast<double>(flips) / static_cast<double>(total) : 0.0;

    if (val_set && val_set->size() > 0) {
      Predictor p = predictor(model);
      rec.val_loss = evaluate_loss(p, *val_set);
      if (task == Task::kClassification)
        rec.val_accuracy = evaluate_classification(p, *val_set, model.config().classes).accuracy;
    } else {
      rec.val_loss = rec.train_loss;
    }
    if (!std::isfinite(rec.val_loss)) throw NumericError("validation loss is not finite at epoch " + std::to_string(epoch));
    if (rec.val_loss < best_loss) {
      best_loss = rec.val_loss;
      result.best_epoch = epoch;
      best = model;
    }
    if (cfg.scheduler && rec.val_loss >= last_val) adam.lr *= cfg.gamma;
    last_val = rec.val_loss;
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  if (best) model = std::move(*best);
  result.best_val_loss = best_loss;
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

Predictor predictor(TransformerModel& model) {
  return [&model](const WindowBatch& b) { return model.forward(b.x, b.valid, false); };
}

Predictor predictor(const FrozenModel& model) {
  return [&model](const WindowBatch& b) { return model.forward(b.x.cast<float>(), b.valid).cast<double>(); };
}

nlohmann::json ClassificationReport::to_json() const {
  return {{"accuracy", accuracy},
          {"samples", samples},
          {"per_class_total", per_class_total},
          {"per_class_correct", per_class_correct}};
}

ClassificationReport evaluate_classification(const Predictor& predict, const WindowSource& split, std::size_t classes,
                                             std::size_t batch_size) {
  ClassificationReport r;
  r.per_class_total.assign(classes, 0);
  r.per_class_correct.assign(classes, 0);
  std::size_t correct = 0;
  for (std::size_t s = 0; s < split.size(); s += batch_size) {
    WindowBatch b = split.range(s, std::min(split.size(), s + batch_size));
    Tensor logits = predict(b);
    for (std::size_t i = 0; i < b.labels.size(); ++i) {
      const auto y = static_cast<std::size_t>(b.labels[i]);
      const bool ok = argmax_row(logits, i) == y;
      correct += ok;
      if (y < classes) {
        ++r.per_class_total[y];
        r.per_class_correct[y] += ok;
      }
    }
  }
  r.samples = split.size();
  r.accuracy = r.samples ? static_cast<double>(correct) / static_cast<double>(r.samples) : 0.0;
  return r;
}

double evaluate_loss(const Predictor& predict, const WindowSource& split, std::size_t batch_size) {
  double sum = 0.0;
  for (std::size_t s = 0; s < split.size(); s += batch_size) {
    const std::size_t e = std::min(split.size(), s + batch_size);
    WindowBatch b = split.range(s, e);
    sum += step_loss(split.task(), predict(b), b).loss * static_cast<double>(e - s);
  }
  return split.size() ? sum / static_cast<double>(split.size()) : 0.0;
}

std::vector<double> anomaly_scores(const Predictor& predict, const WindowSource& split, std::size_t batch_size) {
  std::vector<double> scores;
  scores.reserve(split.size());
  for (std::size_t s = 0; s < split.size(); s += batch_size) {
    WindowBatch b = split.range(s, std::min(split.size(), s + batch_size));
    Tensor out = predict(b);
    const std::size_t w = out.dim(1), m = out.dim(2);
    for (std::size_t i = 0; i < out.dim(0); ++i) {
      double e = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        const double diff = out(i, w - 1, j) - b.target(i, j);
        e += diff * diff;
      }
      scores.push_back(e / static_cast<double>(m));
    }
  }
  return scores;
}

std::vector<ForecastRow> forecast(const Predictor& predict, const WindowSource& split, const NormStats* stats,
                                  std::size_t batch_size) {
  std::vector<ForecastRow> rows;
  for (std::size_t s = 0; s < split.size(); s += batch_size) {
    WindowBatch b = split.range(s, std::min(split.size(), s + batch_size));
    Tensor out = predict(b);
    const std::size_t B = out.dim(0), w = out.dim(1), m = out.dim(2);
    Tensor pred(Shape{B, m});
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < m; ++j) pred(i, j) = out(i, w - 1, j);
    Tensor actual = b.target;
    if (stats) {
      stats->invert(pred);
      stats->invert(actual);
    }
    for (std::size_t i = 0; i < B; ++i) {
      ForecastRow r;
      r.t = b.ends[i];
      r.predicted.assign(pred.data() + i * m, pred.data() + (i + 1) * m);
      r.actual.assign(actual.data() + i * m, actual.data() + (i + 1) * m);
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Sweep

SweepRow sweep_point(const ModelConfig& base, std::size_t d, const DatasetSplits& data, const TrainConfig& cfg) {
  ModelConfig c = base;
  c.d = d;
  TransformerModel model(c, cfg.seed);
  const WindowSource* val = data.val.size() ? &data.val : nullptr;
  train(model, data.train, val, cfg);
  SweepRow row;
  row.d = d;
  const WindowSource& eval = val ? data.val : data.train;
  Predictor p = predictor(model);
  row.metric = c.task == Task::kClassification ? evaluate_classification(p, eval, c.classes).accuracy
                                               : evaluate_loss(p, eval);
  const Census census = count_params(c);
  row.params = c.dense ? census.fp32_params() : census.binary_params();
  row.bits = bit_size(census, c.dense ? SizeScenario::kDenseFp32 : SizeScenario::kSbt);
  row.flops = model_flops(c).total;
  return row;
}

std::vector<SweepRow> sweep_model_size(const ModelConfig& base, std::span<const std::size_t> widths,
                                       const DatasetSplits& data, const TrainConfig& cfg) {
  if (widths.size() < 2) throw ConfigError("a sweep needs at least two widths");
  std::vector<SweepRow> rows;
  for (std::size_t d : widths) rows.push_back(sweep_point(base, d, data, cfg));
  return rows;
}

std::size_t plateau_index(std::span<const SweepRow> rows, double tol, bool higher_is_better) {
  for (std::size_t i = 0; i < rows.size(); ++i) {
    bool ok = true;
    for (std::size_t j = i + 1; j < rows.size(); ++j) {
      const double gain = higher_is_better ? rows[j].metric - rows[i].metric : rows[i].metric - rows[j].metric;
      if (gain > tol) ok = false;
    }
    if (ok) return i;
  }
  return rows.size() - 1;
}

// ---------------------------------------------------------------------------
// Synthetic data

SyntheticClassification make_sinusoid_classification(std::size_t n, std::size_t w, std::size_t m, std::uint64_t seed,
                                                     double noise) {
  Rng rng(seed);
  SyntheticClassification s;
  s.x = Tensor(Shape{n, w, m});
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    s.labels.push_back(label);
    const double cycles = label == 0 ? 1.0 : 3.0;
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (std::size_t j = 0; j < m; ++j) {
      const double amp = rng.uniform(0.5, 1.5);
      const double shift = rng.uniform(-0.5, 0.5);
      for (std::size_t t = 0; t < w; ++t) {
        const double angle = 2.0 * std::numbers::pi * cycles * static_cast<double>(t) / static_cast<double>(w);
        s.x(i, t, j) = amp * std::sin(angle + phase + shift) + noise * rng.normal();
      }
    }
  }
  return s;
}

Tensor make_ar1_series(std::size_t length, std::size_t m, double phi, std::uint64_t seed) {
  Rng rng(seed);
  Tensor x(Shape{length, m});
  const double stationary_sd = 1.0 / std::sqrt(1.0 - phi * phi);
  for (std::size_t j = 0; j < m; ++j) x(0, j) = stationary_sd * rng.normal();
  for (std::size_t t = 1; t < length; ++t)
    for (std::size_t j = 0; j < m; ++j) x(t, j) = phi * x(t - 1, j) + rng.normal();
  return x;
}

}  // namespace sbt
