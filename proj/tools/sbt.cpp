// sbt: train, evaluate, pack and cost sparse binary transformers.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sbt/artifact.hpp"
#include "sbt/costmodel.hpp"
#include "sbt/error.hpp"
#include "sbt/log.hpp"
#include "sbt/pipeline.hpp"
#include "sbt/threshold.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sbt;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

int exit_code(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::kConfig:
      return kExitConfig;
    case ErrorKind::kNumeric:
      return kExitNumeric;
    default:
      return kExitData;
  }
}

/// A preset name or a path to a JSON document in the preset format.
json load_document(const std::string& spec) {
  if (fs::exists(spec)) {
    std::ifstream in(spec);
    try {
      return json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError("cannot parse '" + spec + "': " + e.what());
    }
  }
  return preset_document(spec);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

TrainConfig train_config(const json& doc, bool dense) {
  json t = doc.value("train", json::object());
  if (t.contains("epochs") && t["epochs"].is_object()) t["epochs"] = t["epochs"].value(dense ? "dense" : "sbt", 50);
  return TrainConfig::from_json(t);
}

/// Reconciles the model shape with the dataset: m from the feature list, w
/// from the manifest when it gives one, classes from the labels.
void fit_to_data(ModelConfig& cfg, DatasetManifest& man) {
  if (cfg.task != man.task)
    throw ConfigError("config task " + to_string(cfg.task) + " does not match manifest task " + to_string(man.task));
  if (man.window == 0) man.window = cfg.w;
  if (man.window != cfg.w) {
    warn("window " + std::to_string(cfg.w) + " replaced by the manifest's " + std::to_string(man.window));
    cfg.w = man.window;
  }
  cfg.m = man.features.size();
}

struct LoadedModel {
  Unpacked unpacked;
  NormStats stats;
};

LoadedModel load_model(const std::string& path) {
  LoadedModel lm;
  lm.unpacked = unpack(read_file(path));
  if (!lm.unpacked.meta.contains("norm_stats")) throw FormatError("model lacks normalization statistics");
  lm.stats = NormStats::from_json(lm.unpacked.meta["norm_stats"]);
  return lm;
}

DatasetSplits load_for_model(const LoadedModel& lm, const std::string& manifest_path, bool benign_filter) {
  DatasetManifest man = DatasetManifest::load(manifest_path);
  const ModelConfig& cfg = lm.unpacked.model.config;
  if (man.window == 0) man.window = cfg.w;
  if (man.task != cfg.task || man.window != cfg.w || man.features.size() != cfg.m)
    throw DataError("dataset does not match the model (task, window or feature count)");
  return load_dataset(man, benign_filter, &lm.stats);
}

Predictor packed_predictor(const PackedRuntime& rt) {
  return [&rt](const WindowBatch& b) {
    return rt.infer(b.x.cast<float>(), b.valid).cast<double>();
  };
}

std::vector<std::size_t> parse_widths(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');) {
    try {
      out.push_back(std::stoul(tok));
    } catch (const std::exception&) {
      throw ConfigError("bad width '" + tok + "'");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, data, task, attention, out;
  std::optional<double> prune_rate;
  bool dense = false;
  std::uint64_t seed = 0;
  std::optional<std::size_t> replicates, epochs;
};

int run_train(const TrainArgs& a) {
  const json doc = load_document(a.config);
  ModelConfig cfg = ModelConfig::from_json(doc);
  if (!a.task.empty() && parse_task(a.task) != cfg.task)
    throw ConfigError("--task " + a.task + " conflicts with the config's " + to_string(cfg.task));
  cfg.dense = a.dense;
  if (a.prune_rate) cfg.prune_rate = *a.prune_rate;
  if (!a.attention.empty()) cfg.attention = parse_attention_variant(a.attention);
  TrainConfig tc = train_config(doc, cfg.dense);
  if (a.replicates) tc.replicates = *a.replicates;
  if (a.epochs) tc.epochs = *a.epochs;

  DatasetManifest man = DatasetManifest::load(a.data);
  fit_to_data(cfg, man);
  DatasetSplits data = load_dataset(man);
  if (cfg.task == Task::kClassification) cfg.classes = data.classes;
  cfg = cfg.resolved();
  cfg.validate();

  const fs::path out(a.out);
  fs::create_directories(out);
  write_json(out / "norm_stats.json", data.stats.to_json());
  const WindowSource* val = data.val.size() ? &data.val : nullptr;
  json summary = {{"config", cfg.to_json()}, {"train", tc.to_json()}, {"replicates", json::array()}};
  std::vector<double> metrics;
  for (std::size_t r = 0; r < tc.replicates; ++r) {
    TrainConfig rc = tc;
    rc.seed = a.seed + r;
    const fs::path dir = out / ("replicate_" + std::to_string(r));
    fs::create_directories(dir);
    std::ofstream log(dir / "log.jsonl");
    TransformerModel model(cfg, rc.seed);
    TrainResult res = train(model, data.train, val, rc, [&](const EpochRecord& e) {
      log << e.to_json().dump() << "\n";
      log.flush();
    });
    FrozenModel frozen = model.freeze();
    json meta = {{"norm_stats", data.stats.to_json()}, {"train", rc.to_json()}, {"best_epoch", res.best_epoch}};
    if (doc.contains("detect")) meta["detect"] = doc["detect"];
    write_file(dir / "model.sbt", pack(frozen, meta));

    json rep = {{"seed", rc.seed}, {"best_epoch", res.best_epoch}, {"best_val_loss", res.best_val_loss}};
    const WindowSource& held = data.test.size() && cfg.task == Task::kClassification ? data.test : data.val;
    if (cfg.task == Task::kClassification && held.size()) {
      const double acc = evaluate_classification(predictor(frozen), held, cfg.classes).accuracy;
      rep["accuracy"] = acc;
      metrics.push_back(acc);
    } else if (held.size()) {
      const double loss = evaluate_loss(predictor(frozen), held);
      rep["val_mse"] = loss;
      metrics.push_back(loss);
    }
    summary["replicates"].push_back(rep);
    std::cout << "replicate " << r << " (seed " << rc.seed << "): " << rep.dump() << "\n";
  }
  if (!metrics.empty())
    summary["mean_metric"] = std::accumulate(metrics.begin(), metrics.end(), 0.0) / static_cast<double>(metrics.size());
  write_json(out / "summary.json", summary);
  return 0;
}

int run_eval(const std::string& model_path, const std::string& data_path, bool benign, const std::string& report) {
  LoadedModel lm = load_model(model_path);
  const ModelConfig& cfg = lm.unpacked.model.config;
  DatasetSplits data = load_for_model(lm, data_path, benign);
  const WindowSource& split = data.test.size() ? data.test : data.val;
  if (!split.size()) throw DataError("dataset has no test or validation split");
  PackedRuntime rt(lm.unpacked.model);
  const Predictor predict = packed_predictor(rt);
  json j = {{"task", to_string(cfg.task)}, {"model", model_path}, {"samples", split.size()}};
  if (cfg.task == Task::kClassification) {
    j["classification"] = evaluate_classification(predict, split, cfg.classes).to_json();
  } else {
    j["mse"] = evaluate_loss(predict, split);
    j["benign_filter"] = benign;
  }
  write_json(report, j);
  std::cout << j.dump(2) << "\n";
  return 0;
}

int run_detect(const std::string& model_path, const std::string& data_path, const std::string& mode,
               std::optional<double> r_opt, std::optional<double> q_opt, const std::string& report) {
  LoadedModel lm = load_model(model_path);
  if (lm.unpacked.model.config.task != Task::kAnomaly) throw ConfigError("detect needs an anomaly model");
  const json det = lm.unpacked.meta.value("detect", json::object());
  const double r = r_opt.value_or(det.value("manual_r", 0.01));
  const double q = q_opt.value_or(det.value("pot_q", 1e-3));
  DatasetSplits data = load_for_model(lm, data_path, false);
  if (!data.test.size() || data.test.anomaly_flags().empty()) throw DataError("detect needs a labeled test split");
  PackedRuntime rt(lm.unpacked.model);
  const Predictor predict = packed_predictor(rt);
  const std::vector<double> calib = anomaly_scores(predict, data.val);
  const std::vector<double> scores = anomaly_scores(predict, data.test);

  json j = {{"mode", mode}, {"model", model_path}};
  double tau = 0.0;
  if (mode == "manual") {
    tau = manual_threshold(calib, r);
    j["r"] = r;
  } else if (mode == "pot") {
    PotResult pot = pot_threshold(calib, q, 0.98, r);
    tau = pot.tau;
    j["q"] = q;
    j["gpd"] = pot.fit.to_json();
    j["fell_back"] = pot.fell_back;
  } else {
    throw ConfigError("unknown threshold mode '" + mode + "'");
  }
  j["tau"] = tau;
  std::vector<std::uint8_t> truth;
  for (std::size_t t : data.test.ends()) truth.push_back(data.test.anomaly_flags()[t]);
  const std::vector<std::uint8_t> pred = apply_threshold(scores, tau);
  j["unadjusted"] = point_metrics(pred, truth).to_json();
  j["adjusted"] = evaluate_detection(pred, truth).to_json();
  json segs = json::array();
  for (const Segment& s : anomaly_segments(truth, pred))
    segs.push_back({{"begin", data.test.ends()[s.begin]}, {"end", data.test.ends()[s.end - 1] + 1}, {"detected", s.detected}});
  j["segments"] = segs;
  write_json(report, j);
  std::cout << "tau " << tau << "  adjusted " << j["adjusted"].dump() << "\n";
  return 0;
}

int run_forecast(const std::string& model_path, const std::string& data_path, const std::string& csv) {
  LoadedModel lm = load_model(model_path);
  if (lm.unpacked.model.config.task != Task::kForecasting) throw ConfigError("forecast needs a forecasting model");
  DatasetManifest man = DatasetManifest::load(data_path);
  DatasetSplits data = load_for_model(lm, data_path, false);
  const WindowSource& split = data.test.size() ? data.test : data.val;
  PackedRuntime rt(lm.unpacked.model);
  const std::vector<ForecastRow> rows = forecast(packed_predictor(rt), split, &lm.stats);
  Table t;
  t.columns.push_back("t");
  for (const auto& f : man.features) {
    t.columns.push_back(f + "_predicted");
    t.columns.push_back(f + "_actual");
  }
  double se = 0.0;
  for (const ForecastRow& row : rows) {
    std::vector<double> v{static_cast<double>(row.t)};
    for (std::size_t k = 0; k < row.predicted.size(); ++k) {
      v.push_back(row.predicted[k]);
      v.push_back(row.actual[k]);
      se += (row.predicted[k] - row.actual[k]) * (row.predicted[k] - row.actual[k]);
    }
    t.rows.push_back(std::move(v));
  }
  write_csv(csv, t);
  std::cout << rows.size() << " predictions written; raw-unit MSE "
            << se / static_cast<double>(std::max<std::size_t>(1, rows.size() * man.features.size())) << "\n";
  return 0;
}

int run_cost(const std::string& config, const std::string& compare, const std::string& report) {
  std::vector<std::string> specs;
  if (config == "all")
    specs = preset_names();
  else
    specs = {config};
  std::vector<SizeScenario> scenarios;
  std::stringstream ss(compare);
  for (std::string tok; std::getline(ss, tok, ',');) scenarios.push_back(parse_size_scenario(tok));

  std::vector<CostReport> reports;
  json j = json::array();
  for (const auto& s : specs) {
    ModelConfig cfg = ModelConfig::from_json(load_document(s));
    cfg.dense = false;
    reports.push_back(cost_report(cfg));
    json r = reports.back().to_json();
    json bits = json::object();
    for (SizeScenario sc : scenarios)
      bits[to_string(sc)] =
          bit_size(sc == SizeScenario::kDenseFp32 ? reports.back().dense_census : reports.back().sbt_census, sc);
    r["compare_bits"] = bits;
    j.push_back(r);
  }
  const std::string table = render_cost_table(reports);
  std::cout << table;
  if (!report.empty()) {
    if (fs::path(report).extension() == ".md")
      write_text(report, table);
    else
      write_json(report, specs.size() == 1 ? j[0] : j);
  }
  return 0;
}

int run_sweep(const std::string& config, const std::string& data_path, const std::string& widths,
              std::optional<std::size_t> epochs, std::uint64_t seed, const std::string& report) {
  const json doc = load_document(config);
  ModelConfig cfg = ModelConfig::from_json(doc);
  std::string manifest = data_path;
  if (manifest.empty()) manifest = doc.value("data", "");
  if (manifest.empty()) throw ConfigError("sweep needs --data or a \"data\" entry in the config");
  DatasetManifest man = DatasetManifest::load(manifest);
  fit_to_data(cfg, man);
  DatasetSplits data = load_dataset(man);
  if (cfg.task == Task::kClassification) cfg.classes = data.classes;
  TrainConfig tc = train_config(doc, cfg.dense);
  tc.seed = seed;
  if (epochs) tc.epochs = *epochs;
  const std::vector<std::size_t> ds = parse_widths(widths);
  const std::vector<SweepRow> rows = sweep_model_size(cfg, ds, data, tc);
  json j = json::array();
  std::cout << "| d | metric | params | bits | FLOPs |\n|---|---|---|---|---|\n";
  for (const SweepRow& r : rows) {
    j.push_back({{"d", r.d}, {"metric", r.metric}, {"params", r.params}, {"bits", r.bits}, {"flops", r.flops}});
    std::printf("| %zu | %.4f | %zu | %.0f | %.0f |\n", r.d, r.metric, r.params, r.bits, r.flops);
  }
  write_json(report, {{"task", to_string(cfg.task)}, {"rows", j}});
  return 0;
}

int run_unpack(const std::string& model_path, const std::string& out, bool sizes) {
  const std::vector<std::uint8_t> bytes = read_file(model_path);
  if (sizes) {
    write_json(out, size_report(bytes).to_json());
    return 0;
  }
  write_text(out, Container::decode(bytes).to_json().dump() + "\n");
  return 0;
}

int run_pack(const std::string& in, const std::string& out) {
  std::ifstream f(in);
  if (!f) throw DataError("cannot open '" + in + "'");
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw FormatError("cannot parse '" + in + "': " + e.what());
  }
  const Container c = Container::from_json(j);
  from_container(c);  // validates the module set against the config
  write_file(out, c.encode());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse binary transformers for time series"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Print progress messages");

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train one or more replicates and write packed models");
  train_cmd->add_option("--config", ta.config, "Preset name or JSON file")->required();
  train_cmd->add_option("--data", ta.data, "Dataset manifest")->required();
  train_cmd->add_option("--task", ta.task, "classify, anomaly or forecast");
  train_cmd->add_option("--prune-rate", ta.prune_rate, "Weight prune rate p");
  train_cmd->add_flag("--dense", ta.dense, "Train the FP32 baseline");
  train_cmd->add_option("--attention", ta.attention, "canonical, step-t, qkv-random, qkv-magnitude or identity");
  train_cmd->add_option("--seed", ta.seed, "Base seed; replicate r uses seed + r");
  train_cmd->add_option("--replicates", ta.replicates, "Number of seeds");
  train_cmd->add_option("--epochs", ta.epochs, "Override the preset's epoch count");
  train_cmd->add_option("--out", ta.out, "Output directory")->required();

  std::string model, data, report, mode = "manual", csv, config, compare = "dense,sbt", widths, in, out;
  bool benign = false, sizes = false;
  std::optional<double> r, q;
  std::optional<std::size_t> epochs;
  std::uint64_t seed = 0;

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a packed model on a dataset");
  eval_cmd->add_option("--model", model, "Packed model")->required();
  eval_cmd->add_option("--data", data, "Dataset manifest")->required();
  eval_cmd->add_flag("--benign-filter", benign, "Drop test windows with anomalies before t");
  eval_cmd->add_option("--report", report, "Report path")->required();

  auto* detect_cmd = app.add_subcommand("detect", "Threshold anomaly scores and score detections");
  detect_cmd->add_option("--model", model, "Packed model")->required();
  detect_cmd->add_option("--data", data, "Dataset manifest")->required();
  detect_cmd->add_option("--threshold", mode, "manual or pot")->check(CLI::IsMember({"manual", "pot"}));
  detect_cmd->add_option("--r", r, "Anomaly proportion for the manual threshold");
  detect_cmd->add_option("--q", q, "POT risk");
  detect_cmd->add_option("--report", report, "Report path")->required();

  auto* forecast_cmd = app.add_subcommand("forecast", "Write per-feature forecasts");
  forecast_cmd->add_option("--model", model, "Packed model")->required();
  forecast_cmd->add_option("--data", data, "Dataset manifest")->required();
  forecast_cmd->add_option("--emit-predictions", csv, "CSV output")->required();

  auto* cost_cmd = app.add_subcommand("cost", "Parameter, bit and FLOPs accounting");
  cost_cmd->add_option("--config", config, "Preset name, JSON file or 'all'")->required();
  cost_cmd->add_option("--compare", compare, "Size scenarios: dense,sbt,pruned32,pruned8");
  cost_cmd->add_option("--report", report, "Report path (.json or .md)");

  auto* sweep_cmd = app.add_subcommand("sweep", "Train one replicate per embedding width");
  sweep_cmd->add_option("--config", config, "Preset name or JSON file")->required();
  sweep_cmd->add_option("--data", data, "Dataset manifest");
  sweep_cmd->add_option("--d", widths, "Comma-separated widths")->required();
  sweep_cmd->add_option("--epochs", epochs, "Override the preset's epoch count");
  sweep_cmd->add_option("--seed", seed, "Seed");
  sweep_cmd->add_option("--report", report, "Report path")->required();

  auto* pack_cmd = app.add_subcommand("pack", "Encode a JSON container dump");
  pack_cmd->add_option("--json", in, "JSON dump from unpack")->required();
  pack_cmd->add_option("--out", out, "Packed model")->required();

  auto* unpack_cmd = app.add_subcommand("unpack", "Dump a packed model as JSON");
  unpack_cmd->add_option("--model", model, "Packed model")->required();
  unpack_cmd->add_option("--out", out, "JSON output")->required();
  unpack_cmd->add_flag("--sizes", sizes, "Write the per-module size report instead");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }
  if (verbose)
    set_log_sink([](LogLevel, const std::string& m) { std::cerr << m << "\n"; });

  try {
    if (*train_cmd) return run_train(ta);
    if (*eval_cmd) return run_eval(model, data, benign, report);
    if (*detect_cmd) return run_detect(model, data, mode, r, q, report);
    if (*forecast_cmd) return run_forecast(model, data, csv);
    if (*cost_cmd) return run_cost(config, compare, report);
    if (*sweep_cmd) return run_sweep(config, data, widths, epochs, seed, report);
    if (*pack_cmd) return run_pack(in, out);
    if (*unpack_cmd) return run_unpack(model, out, sizes);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return 0;
}
