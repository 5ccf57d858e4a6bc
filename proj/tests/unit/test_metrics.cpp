#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "lets/metrics.hpp"
#include "lets/random.hpp"

using namespace lets;

namespace {

Vector vec(std::initializer_list<double> v) {
  Vector x(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double a : v) x(i++) = a;
  return x;
}

// Energy form with the full double sum.
double crps_reference(const Vector& x, double y) {
  const double m = static_cast<double>(x.size());
  double a = 0.0, b = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    a += std::abs(x(i) - y);
    for (Eigen::Index j = 0; j < x.size(); ++j) b += std::abs(x(i) - x(j));
  }
  return a / m - b / (2.0 * m * m);
}

}  // namespace

TEST(Rmse, Examples) {
  const std::vector<Vector> truth{vec({1, 2}), vec({3, 4})};
  EXPECT_EQ(rmse(truth, truth), 0.0);
  std::vector<Vector> shifted = truth;
  for (auto& v : shifted) v.array() += 1.5;
  EXPECT_NEAR(rmse(shifted, truth), 1.5, 1e-15);
  EXPECT_DOUBLE_EQ(rmse({vec({3}), vec({4})}, {vec({0}), vec({0})}), 3.5);
  EXPECT_THROW(rmse({vec({1})}, {}), DimensionMismatch);
  EXPECT_THROW(rmse({}, {}), InvalidArgument);
}

TEST(Rmse, InvariantUnderTimePermutation) {
  RngStream rng(1);
  std::vector<Vector> est, truth;
  for (int k = 0; k < 9; ++k) {
    est.push_back(rng.normal_vector(3));
    truth.push_back(rng.normal_vector(3));
  }
  const double base = rmse(est, truth);
  std::vector<int> order{4, 1, 8, 0, 3, 7, 2, 6, 5};
  std::vector<Vector> e2, t2;
  for (int k : order) {
    e2.push_back(est[static_cast<std::size_t>(k)]);
    t2.push_back(truth[static_cast<std::size_t>(k)]);
  }
  EXPECT_NEAR(rmse(e2, t2), base, 1e-14);
}

TEST(KdeMode, ConstantSamples) { EXPECT_EQ(kde_mode(Vector::Constant(5, 2.5)), 2.5); }

TEST(KdeMode, PicksHeavierMode) {
  const int half = 50;
  Vector x(2 * half + 1);
  for (int i = 0; i < half; ++i) {
    x(i) = -1.0 + 0.01 * ((i % 3) - 1);
    x(half + i) = 1.0 + 0.01 * ((i % 3) - 1);
  }
  x(2 * half) = 1.002;
  EXPECT_NEAR(kde_mode(x), 1.0, 0.05);
}

TEST(KdeMode, GaussianSampleModeNearZero) {
  RngStream rng(2);
  EXPECT_NEAR(kde_mode(rng.normal_vector(1000)), 0.0, 0.15);
}

TEST(Crps, Examples) {
  EXPECT_DOUBLE_EQ(crps(vec({2.0}), -1.5), 3.5);
  EXPECT_DOUBLE_EQ(crps(vec({0.0, 1.0}), 0.5), 0.25);
  EXPECT_DOUBLE_EQ(crps(vec({0.7, 0.7, 0.7}), 0.7), 0.0);
}

TEST(Crps, MatchesDoubleSumAndIsNonNegative) {
  RngStream rng(3);
  for (int t = 0; t < 50; ++t) {
    const Vector x = rng.normal_vector(1 + t % 15);
    const double y = rng.normal();
    const double c = crps(x, y);
    EXPECT_NEAR(c, crps_reference(x, y), 1e-12);
    EXPECT_GT(c, 0.0);
  }
}

TEST(Crps, EnsembleAveragesComponents) {
  Matrix x(2, 2);
  x << 0.0, 1.0, 2.0, 2.0;
  EXPECT_DOUBLE_EQ(crps(x, vec({0.5, 2.0})), 0.125);
}

TEST(Summary, IdenticalRunsHaveZeroWidthInterval) {
  const MetricEstimate e = summarize_values({1.25, 1.25, 1.25});
  EXPECT_DOUBLE_EQ(e.mean, 1.25);
  EXPECT_FALSE(e.ci95.empty);
  EXPECT_DOUBLE_EQ(e.ci95.lo, 1.25);
  EXPECT_DOUBLE_EQ(e.ci95.hi, 1.25);
}

TEST(Summary, TwoRunsAndSingleRun) {
  const MetricEstimate e = summarize_values({1.0, 3.0});
  EXPECT_DOUBLE_EQ(e.mean, 2.0);
  // Standard error sqrt(2) / sqrt(2) = 1.
  EXPECT_NEAR(e.ci95.hi - e.ci95.lo, 2 * 1.96, 1e-12);
  EXPECT_TRUE(summarize_values({4.0}).ci95.empty);
  EXPECT_THROW(summarize_values({}), InvalidArgument);
}

TEST(Summary, DivergedRunsAreCountedNotAveraged) {
  RunMetrics a{1.0, 0.5, 2.0}, b{3.0, 1.5, 4.0};
  const MetricSummary s = summarize_runs({a, RunMetrics::divergent(), b});
  EXPECT_EQ(s.runs, 2u);
  EXPECT_EQ(s.diverged, 1u);
  EXPECT_DOUBLE_EQ(s.rmse_mu.mean, 2.0);
  EXPECT_DOUBLE_EQ(s.crps.mean, 3.0);
  ASSERT_TRUE(s.rmse_mode.has_value());
  EXPECT_DOUBLE_EQ(s.rmse_mode->mean, 1.0);

  const MetricSummary none = summarize_runs({RunMetrics::divergent()});
  EXPECT_EQ(none.runs, 0u);
  EXPECT_TRUE(std::isnan(none.rmse_mu.mean));
  EXPECT_TRUE(std::isnan(none.crps.mean));
}

TEST(Summary, RunRecordsAggregate) {
  std::vector<RunRecord> runs(2);
  for (int r = 0; r < 2; ++r) {
    Matrix ens(1, 2);
    ens << 0.0, 2.0 * (r + 1);
    runs[static_cast<std::size_t>(r)].add(1, ens, vec({0.0}), true);
  }
  const MetricSummary s = summarize_runs(runs);
  EXPECT_EQ(s.runs, 2u);
  EXPECT_DOUBLE_EQ(s.rmse_mu.mean, 1.5);
  ASSERT_TRUE(s.rmse_mode.has_value());
  EXPECT_DOUBLE_EQ(s.crps.mean, (crps(vec({0, 2}), 0.0) + crps(vec({0, 4}), 0.0)) / 2.0);
}
