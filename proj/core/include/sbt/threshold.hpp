#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

namespace sbt {

/// (1 - r) empirical quantile with linear interpolation between order
/// statistics.
double manual_threshold(std::span<const double> scores, double r);
double quantile(std::span<const double> values, double q);

struct GpdFit {
  double t0 = 0.0;
  double gamma = 0.0;  // shape
  double sigma = 1.0;  // scale
  std::size_t exceedances = 0;
  std::size_t n = 0;
  double q = 1e-3;
  double log_likelihood = 0.0;
  bool moments_fallback = false;

  nlohmann::json to_json() const;
};

/// GPD log-likelihood of positive excesses; -inf outside the support.
double gpd_log_likelihood(std::span<const double> excesses, double gamma, double sigma);

/// Maximum-likelihood GPD over excesses: a grid over gamma in [-0.5, 1.5]
/// and log-spaced sigma, refined by Nelder-Mead. Fewer than 20 excesses use
/// the method of moments; identical excesses give an exponential fit.
GpdFit fit_gpd(std::span<const double> excesses);

/// Peaks-over-threshold: t0 is the given quantile of the calibration scores,
/// tau = t0 + sigma/gamma * ((q n / N_t)^-gamma - 1), with the gamma -> 0
/// limit t0 - sigma ln(q n / N_t). Falls back to the manual threshold at
/// rate `fallback_r` when nothing exceeds t0.
struct PotResult {
  double tau = 0.0;
  GpdFit fit;
  bool fell_back = false;
};
PotResult pot_threshold(std::span<const double> scores, double q = 1e-3, double t0_quantile = 0.98,
                        double fallback_r = 0.01);
double pot_tau(double t0, double gamma, double sigma, double q, std::size_t n, std::size_t exceedances);

struct DetectionMetrics {
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  std::size_t tp = 0, fp = 0, fn = 0;

  nlohmann::json to_json() const;
};

/// Point-wise metrics; precision is 0 when nothing is predicted.
DetectionMetrics point_metrics(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth);
/// Marks every point of a ground-truth segment positive when any of its
/// points is predicted.
std::vector<std::uint8_t> point_adjust(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth);
DetectionMetrics evaluate_detection(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth);

struct Segment {
  std::size_t begin = 0, end = 0;  // [begin, end)
  bool detected = false;
};
std::vector<Segment> anomaly_segments(std::span<const std::uint8_t> truth, std::span<const std::uint8_t> predicted = {});

std::vector<std::uint8_t> apply_threshold(std::span<const double> scores, double tau);

}  // namespace sbt
