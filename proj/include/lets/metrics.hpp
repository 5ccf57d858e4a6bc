#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include "lets/core.hpp"
#include "lets/error.hpp"

namespace lets {

/// Time-averaged RMSE: (1/K) sum_k sqrt(||xhat_k - xref_k||^2 / N_x).
inline double rmse(const std::vector<Vector>& estimates, const std::vector<Vector>& truth) {
  if (estimates.size() != truth.size()) throw DimensionMismatch("rmse: estimate and truth series differ in length");
  if (estimates.empty()) throw InvalidArgument("rmse needs at least one time");
  double total = 0.0;
  for (std::size_t k = 0; k < estimates.size(); ++k) {
    if (estimates[k].size() != truth[k].size() || estimates[k].size() == 0)
      throw DimensionMismatch("rmse: state dimensions differ");
    total += std::sqrt((estimates[k] - truth[k]).squaredNorm() / static_cast<double>(truth[k].size()));
  }
  return total / static_cast<double>(estimates.size());
}

/// Maximum of a Gaussian kernel density estimate with Silverman's bandwidth,
/// searched on 512 points spanning [min - 3h, max + 3h].
inline double kde_mode(const Vector& samples) {
  const Eigen::Index m = samples.size();
  if (m < 1) throw InvalidArgument("kde_mode needs samples");
  const double lo = samples.minCoeff(), hi = samples.maxCoeff();
  if (m == 1 || hi == lo) return lo;
  const double mean = samples.mean();
  const double sd = std::sqrt((samples.array() - mean).square().sum() / static_cast<double>(m - 1));
  const double h = 1.06 * sd * std::pow(static_cast<double>(m), -0.2);
  constexpr int kGrid = 512;
  const double a = lo - 3.0 * h, b = hi + 3.0 * h;
  double best_x = a, best_f = -1.0;
  for (int g = 0; g < kGrid; ++g) {
    const double x = a + (b - a) * g / (kGrid - 1);
    const double f = (-0.5 * ((samples.array() - x) / h).square()).exp().sum();
    if (f > best_f) {
      best_f = f;
      best_x = x;
    }
  }
  return best_x;
}

/// Componentwise KDE mode of an N_x x M ensemble.
inline Vector ensemble_mode(const EnsembleMatrix& x) {
  Vector out(x.rows());
  for (Eigen::Index s = 0; s < x.rows(); ++s) out(s) = kde_mode(x.row(s).transpose());
  return out;
}

/// Energy form (1/M) sum |x_i - y| - (1/(2M^2)) sum_ij |x_i - x_j|, with
/// the pair sum evaluated on sorted samples.
inline double crps(const Vector& ensemble, double y) {
  const Eigen::Index m = ensemble.size();
  if (m < 1) throw InvalidArgument("crps needs at least one member");
  std::vector<double> x(ensemble.data(), ensemble.data() + m);
  std::sort(x.begin(), x.end());
  double abs_err = 0.0, pairs = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) {
    abs_err += std::abs(x[static_cast<std::size_t>(i)] - y);
    // sum_{i<j} (x_j - x_i) = sum_i x_i (2i - M + 1) on sorted data.
    pairs += x[static_cast<std::size_t>(i)] * static_cast<double>(2 * i - m + 1);
  }
  const double md = static_cast<double>(m);
  return abs_err / md - pairs / (md * md);
}

/// Mean CRPS over the components of an ensemble.
inline double crps(const EnsembleMatrix& x, const Vector& truth) {
  if (x.rows() != truth.size()) throw DimensionMismatch("crps: truth dimension differs");
  double total = 0.0;
  for (Eigen::Index s = 0; s < x.rows(); ++s) total += crps(Vector(x.row(s).transpose()), truth(s));
  return total / static_cast<double>(x.rows());
}

/// Per-time smoothed summaries of one run, aligned with the reference.
struct RunRecord {
  std::vector<int> times;
  std::vector<Vector> mean;
  std::vector<Vector> mode;
  std::vector<double> crps;
  std::vector<Vector> truth;
  int lag = 0;
  std::uint64_t seed = 0;

  void add(int k, const EnsembleMatrix& ensemble, const Vector& reference, bool with_mode) {
    times.push_back(k);
    mean.push_back(ensemble.rowwise().mean());
    if (with_mode) mode.push_back(ensemble_mode(ensemble));
    crps.push_back(lets::crps(ensemble, reference));
    truth.push_back(reference);
  }

  double rmse_mean() const { return rmse(mean, truth); }
  std::optional<double> rmse_mode() const {
    if (mode.empty()) return std::nullopt;
    return rmse(mode, truth);
  }
  double mean_crps() const {
    if (crps.empty()) throw InvalidArgument("run has no records");
    return std::accumulate(crps.begin(), crps.end(), 0.0) / static_cast<double>(crps.size());
  }
};

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  bool empty = true;
};

struct MetricEstimate {
  double mean = 0.0;
  Interval ci95;
};

struct MetricSummary {
  MetricEstimate rmse_mu;
  std::optional<MetricEstimate> rmse_mode;
  MetricEstimate crps;
  std::size_t runs = 0;      // finite runs behind the estimates
  std::size_t diverged = 0;  // runs left out because they diverged
};

/// Mean and normal-approximation 95% interval of replicate values. A single
/// value gives a point estimate with an empty interval.
inline MetricEstimate summarize_values(const std::vector<double>& v) {
  if (v.empty()) throw InvalidArgument("no values to summarize");
  MetricEstimate out;
  const double n = static_cast<double>(v.size());
  out.mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  if (v.size() < 2) return out;
  double ss = 0.0;
  for (double x : v) ss += (x - out.mean) * (x - out.mean);
  const double se = std::sqrt(ss / (n - 1.0) / n);
  out.ci95 = {out.mean - 1.96 * se, out.mean + 1.96 * se, false};
  return out;
}

struct RunMetrics {
  double rmse_mu = 0.0;
  std::optional<double> rmse_mode;
  double crps = 0.0;

  bool diverged() const { return !std::isfinite(rmse_mu); }
  static RunMetrics divergent() {
    const double inf = std::numeric_limits<double>::infinity();
    return {inf, std::nullopt, inf};
  }
};

inline RunMetrics run_metrics(const RunRecord& r) { return {r.rmse_mean(), r.rmse_mode(), r.mean_crps()}; }

/// Diverged runs are counted but left out of the estimates; if every run
/// diverged the estimates are NaN.
inline MetricSummary summarize_runs(const std::vector<RunMetrics>& runs) {
  if (runs.empty()) throw InvalidArgument("no runs to summarize");
  std::vector<double> mu, mode, c;
  MetricSummary out;
  for (const auto& r : runs) {
    if (r.diverged()) {
      ++out.diverged;
      continue;
    }
    mu.push_back(r.rmse_mu);
    c.push_back(r.crps);
    if (r.rmse_mode) mode.push_back(*r.rmse_mode);
  }
  out.runs = mu.size();
  if (mu.empty()) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    out.rmse_mu.mean = out.crps.mean = nan;
    return out;
  }
  out.rmse_mu = summarize_values(mu);
  out.crps = summarize_values(c);
  if (mode.size() == mu.size()) out.rmse_mode = summarize_values(mode);
  return out;
}

inline MetricSummary summarize_runs(const std::vector<RunRecord>& records) {
  std::vector<RunMetrics> runs;
  for (const auto& r : records) runs.push_back(run_metrics(r));
  return summarize_runs(runs);
}

}  // namespace lets
