#include "sbt/threshold.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>

#include "sbt/error.hpp"
#include "sbt/log.hpp"

namespace sbt {

double quantile(std::span<const double> values, double q) {
  if (values.empty()) throw DataError("quantile of an empty score series");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] + frac * (v[hi] - v[lo]);
}

double manual_threshold(std::span<const double> scores, double r) {
  if (!(r > 0.0 && r < 1.0)) throw ConfigError("anomaly proportion r must lie in (0,1)");
  return quantile(scores, 1.0 - r);
}

nlohmann::json GpdFit::to_json() const {
  return {{"t0", t0},       {"gamma", gamma}, {"sigma", sigma},           {"exceedances", exceedances},
          {"n", n},         {"q", q},         {"log_likelihood", log_likelihood}, {"moments_fallback", moments_fallback}};
}

double gpd_log_likelihood(std::span<const double> y, double gamma, double sigma) {
  const double ninf = -std::numeric_limits<double>::infinity();
  if (!(sigma > 0.0) || y.empty()) return ninf;
  const double n = static_cast<double>(y.size());
  double ll = -n * std::log(sigma);
  if (std::abs(gamma) < 1e-9) {
    for (double v : y) ll -= v / sigma;
    return ll;
  }
  double s = 0.0;
  for (double v : y) {
    const double z = 1.0 + gamma * v / sigma;
    if (z <= 0.0) return ninf;
    s += std::log(z);
  }
  return ll - (1.0 + 1.0 / gamma) * s;
}

namespace {

struct Moments {
  double gamma, sigma;
};

Moments moment_estimates(std::span<const double> y) {
  const double n = static_cast<double>(y.size());
  const double mean = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double var = 0.0;
  for (double v : y) var += (v - mean) * (v - mean);
  var /= std::max(1.0, n - 1.0);
  if (var <= 0.0) return {0.0, mean};
  const double r = mean * mean / var;
  return {0.5 * (1.0 - r), 0.5 * mean * (r + 1.0)};
}

/// Nelder-Mead maximization in two dimensions.
template <typename F>
std::array<double, 2> nelder_mead(F f, std::array<double, 2> start, double step, int iterations) {
  using P = std::array<double, 2>;
  std::array<P, 3> s = {start, P{start[0] + step, start[1]}, P{start[0], start[1] + step}};
  std::array<double, 3> v = {f(s[0]), f(s[1]), f(s[2])};
  auto sort = [&] {
    std::array<int, 3> idx = {0, 1, 2};
    std::sort(idx.begin(), idx.end(), [&](int a, int b) { return v[a] > v[b]; });
    std::array<P, 3> s2;
    std::array<double, 3> v2;
    for (int i = 0; i < 3; ++i) {
      s2[i] = s[idx[i]];
      v2[i] = v[idx[i]];
    }
    s = s2;
    v = v2;
  };
  for (int it = 0; it < iterations; ++it) {
    sort();
    if (std::abs(v[0] - v[2]) < 1e-12 * (1.0 + std::abs(v[0])) &&
        std::abs(s[0][0] - s[2][0]) + std::abs(s[0][1] - s[2][1]) < 1e-10)
      break;
    const P c = {(s[0][0] + s[1][0]) / 2, (s[0][1] + s[1][1]) / 2};
    auto along = [&](double t) { return P{c[0] + t * (s[2][0] - c[0]), c[1] + t * (s[2][1] - c[1])}; };
    const P r = along(-1.0);
    const double fr = f(r);
    if (fr > v[0]) {
      const P e = along(-2.0);
      const double fe = f(e);
      if (fe > fr) {
        s[2] = e;
        v[2] = fe;
      } else {
        s[2] = r;
        v[2] = fr;
      }
      continue;
    }
    if (fr > v[1]) {
      s[2] = r;
      v[2] = fr;
      continue;
    }
    const P k = fr > v[2] ? along(-0.5) : along(0.5);
    const double fk = f(k);
    if (fk > std::max(fr, v[2])) {
      s[2] = k;
      v[2] = fk;
      continue;
    }
    for (int i = 1; i < 3; ++i) {
      s[i] = P{(s[0][0] + s[i][0]) / 2, (s[0][1] + s[i][1]) / 2};
      v[i] = f(s[i]);
    }
  }
  sort();
  return s[0];
}

}  // namespace

GpdFit fit_gpd(std::span<const double> excesses) {
  if (excesses.empty()) throw DataError("GPD fit needs at least one excess");
  for (double v : excesses)
    if (!(v >= 0.0) || !std::isfinite(v)) throw DataError("GPD excesses must be finite and non-negative");
  GpdFit fit;
  fit.exceedances = excesses.size();
  const double mean = std::accumulate(excesses.begin(), excesses.end(), 0.0) / static_cast<double>(excesses.size());
  const auto [mn, mx] = std::minmax_element(excesses.begin(), excesses.end());
  if (*mx - *mn <= 1e-12 * std::max(1.0, std::abs(*mx)) || mean <= 0.0) {
    fit.gamma = 0.0;
    fit.sigma = mean > 0.0 ? mean : 1e-12;
    fit.log_likelihood = gpd_log_likelihood(excesses, 0.0, fit.sigma);
    return fit;
  }
  // Work on excesses scaled to unit mean; sigma scales back linearly.
  std::vector<double> y(excesses.begin(), excesses.end());
  for (double& v : y) v /= mean;
  const Moments mom = moment_estimates(y);

  if (y.size() < 20) {
    warn("only " + std::to_string(y.size()) + " exceedances; using method-of-moments GPD estimates");
    fit.moments_fallback = true;
    fit.gamma = mom.gamma;
    fit.sigma = mom.sigma * mean;
    fit.log_likelihood = gpd_log_likelihood(excesses, fit.gamma, fit.sigma);
    return fit;
  }

  auto ll = [&](const std::array<double, 2>& p) { return gpd_log_likelihood(y, p[0], std::exp(p[1])); };
  std::array<double, 2> best = {0.0, 0.0};  // exponential with sigma = mean
  double best_ll = ll(best);
  for (int gi = 0; gi <= 40; ++gi) {
    const double g = -0.5 + 0.05 * gi;
    for (int si = 0; si <= 40; ++si) {
      const double ls = std::log(0.05) + (std::log(20.0) - std::log(0.05)) * si / 40.0;
      const double v = ll({g, ls});
      if (v > best_ll) {
        best_ll = v;
        best = {g, ls};
      }
    }
  }
  std::array<double, 2> refined = nelder_mead(ll, best, 0.05, 500);
  if (ll(refined) >= best_ll) best = refined;
  double g = best[0], sig = std::exp(best[1]);
  if (gpd_log_likelihood(y, mom.gamma, mom.sigma) > gpd_log_likelihood(y, g, sig)) {
    g = mom.gamma;
    sig = mom.sigma;
  }
  fit.gamma = g;
  fit.sigma = sig * mean;
  fit.log_likelihood = gpd_log_likelihood(excesses, fit.gamma, fit.sigma);
  return fit;
}

double pot_tau(double t0, double gamma, double sigma, double q, std::size_t n, std::size_t nt) {
  const double r = q * static_cast<double>(n) / static_cast<double>(nt);
  if (std::abs(gamma) < 1e-9) return t0 - sigma * std::log(r);
  return t0 + sigma / gamma * (std::pow(r, -gamma) - 1.0);
}

PotResult pot_threshold(std::span<const double> scores, double q, double t0_quantile, double fallback_r) {
  if (!(q > 0.0 && q < 1.0)) throw ConfigError("POT risk q must lie in (0,1)");
  PotResult res;
  const double t0 = quantile(scores, t0_quantile);
  std::vector<double> excess;
  for (double s : scores)
    if (s > t0) excess.push_back(s - t0);
  if (excess.empty()) {
    warn("no score exceeds the initial POT threshold; falling back to the manual threshold");
    res.tau = manual_threshold(scores, fallback_r);
    res.fell_back = true;
    res.fit.t0 = t0;
    res.fit.n = scores.size();
    res.fit.q = q;
    return res;
  }
  res.fit = fit_gpd(excess);
  res.fit.t0 = t0;
  res.fit.n = scores.size();
  res.fit.q = q;
  res.tau = pot_tau(t0, res.fit.gamma, res.fit.sigma, q, scores.size(), excess.size());
  return res;
}

nlohmann::json DetectionMetrics::to_json() const {
  return {{"precision", precision}, {"recall", recall}, {"f1", f1}, {"tp", tp}, {"fp", fp}, {"fn", fn}};
}

DetectionMetrics point_metrics(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  if (pred.size() != truth.size()) throw ShapeError("predictions and labels differ in length");
  DetectionMetrics m;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] && truth[i]) ++m.tp;
    if (pred[i] && !truth[i]) ++m.fp;
    if (!pred[i] && truth[i]) ++m.fn;
  }
  m.precision = m.tp + m.fp ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp) : 0.0;
  m.recall = m.tp + m.fn ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn) : 0.0;
  m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  return m;
}

std::vector<Segment> anomaly_segments(std::span<const std::uint8_t> truth, std::span<const std::uint8_t> pred) {
  std::vector<Segment> segs;
  for (std::size_t i = 0; i < truth.size();) {
    if (!truth[i]) {
      ++i;
      continue;
    }
    Segment s;
    s.begin = i;
    while (i < truth.size() && truth[i]) {
      if (!pred.empty() && pred[i]) s.detected = true;
      ++i;
    }
    s.end = i;
    segs.push_back(s);
  }
  return segs;
}

std::vector<std::uint8_t> point_adjust(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  if (pred.size() != truth.size()) throw ShapeError("predictions and labels differ in length");
  std::vector<std::uint8_t> out(pred.begin(), pred.end());
  for (const Segment& s : anomaly_segments(truth, pred))
    if (s.detected) std::fill(out.begin() + s.begin, out.begin() + s.end, std::uint8_t{1});
  return out;
}

DetectionMetrics evaluate_detection(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  return point_metrics(point_adjust(pred, truth), truth);
}

std::vector<std::uint8_t> apply_threshold(std::span<const double> scores, double tau) {
  std::vector<std::uint8_t> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = scores[i] > tau ? 1 : 0;
  return out;
}

}  // namespace sbt
