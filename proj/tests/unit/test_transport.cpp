#include <gtest/gtest.h>

#include <cmath>

#include "lets/transport.hpp"
#include "lp_oracle.hpp"
#include "test_util.hpp"

using namespace lets;

namespace {

void expect_feasible(const TransportPlan& p, const WeightVector& w, double tol = 1e-9) {
  EXPECT_GE(p.d.minCoeff(), -1e-12);
  EXPECT_LT(p.column_residual(), tol);
  EXPECT_LT(p.row_residual(w), tol);
}

Matrix points(std::initializer_list<double> v) {
  Matrix x(1, static_cast<Eigen::Index>(v.size()));
  Eigen::Index j = 0;
  for (double a : v) x(0, j++) = a;
  return x;
}

}  // namespace

TEST(CostMatrix, Examples) {
  EXPECT_EQ(cost_matrix(Matrix::Constant(2, 3, 1.5)).c, Matrix::Zero(3, 3));
  EXPECT_EQ(cost_matrix(points({0, 1})).c, (Matrix(2, 2) << 0, 1, 1, 0).finished());
  const TrajectoryEnsemble stacked({points({0, 3}), points({0, 4})}, 1);
  EXPECT_DOUBLE_EQ(cost_matrix(stacked).c(0, 1), 25.0);
}

TEST(CostMatrix, MatchesPairwiseLoop) {
  RngStream rng(1);
  const Matrix x = rng.normal_matrix(4, 6);
  const CostMatrix c = cost_matrix(x);
  for (Eigen::Index i = 0; i < 6; ++i)
    for (Eigen::Index j = 0; j < 6; ++j) EXPECT_NEAR(c.c(i, j), (x.col(i) - x.col(j)).squaredNorm(), 1e-12);
}

TEST(SolveExact, UniformWeightsGiveIdentity) {
  RngStream rng(2);
  const CostMatrix c = cost_matrix(rng.normal_matrix(2, 7));
  const TransportPlan p = solve_exact(c, WeightVector::uniform(7));
  EXPECT_LT((p.d - Matrix::Identity(7, 7)).norm(), 1e-12);
  EXPECT_NEAR(p.objective, 0.0, 1e-12);
}

TEST(SolveExact, DegenerateWeightsForcePlan) {
  const CostMatrix c = cost_matrix(points({0, 1}));
  const TransportPlan p = solve_exact(c, WeightVector((Vector(2) << 1.0, 0.0).finished()));
  EXPECT_LT((p.d - (Matrix(2, 2) << 1, 1, 0, 0).finished()).norm(), 1e-14);
}

TEST(SolveExact, SmallInstanceMatchesLpOracle) {
  const CostMatrix c = cost_matrix(points({0, 1, 2}));
  const WeightVector w((Vector(3) << 0.5, 0.3, 0.2).finished());
  const TransportPlan p = solve_exact(c, w);
  EXPECT_NEAR(p.objective, lets_test::transport_lp(c.c, w.values()).objective, 1e-10);
  expect_feasible(p, w);
}

TEST(SolveExact, RandomInstancesMatchLpOracleAndCertify) {
  RngStream rng(3);
  for (int t = 0; t < 40; ++t) {
    const Eigen::Index m = 2 + t % 9;
    const CostMatrix c = cost_matrix(rng.normal_matrix(1 + t % 3, m));
    const WeightVector w = lets_test::random_weights(m, rng, 1.5);
    const TransportPlan p = solve_exact(c, w);
    EXPECT_NEAR(p.objective, lets_test::transport_lp(c.c, w.values()).objective, 1e-8) << t;
    expect_feasible(p, w);
    EXPECT_LT(p.duality_gap, 1e-9);
    EXPECT_GE(p.min_reduced_cost, -1e-9);
    EXPECT_TRUE(p.converged);
  }
}

TEST(SolveExact, ZeroWeightRowsCarryNoMass) {
  RngStream rng(4);
  Vector raw = rng.normal_vector(6).cwiseAbs();
  raw(1) = 0.0;
  raw(4) = 0.0;
  const WeightVector w = WeightVector::normalized(raw);
  const TransportPlan p = solve_exact(cost_matrix(rng.normal_matrix(2, 6)), w);
  EXPECT_EQ(p.d.row(1).cwiseAbs().sum(), 0.0);
  EXPECT_EQ(p.d.row(4).cwiseAbs().sum(), 0.0);
  expect_feasible(p, w);
}

TEST(SolveExact, InvariantUnderCostShift) {
  RngStream rng(5);
  for (int t = 0; t < 20; ++t) {
    const Eigen::Index m = 3 + t % 8;
    CostMatrix c = cost_matrix(rng.normal_matrix(2, m));
    const WeightVector w = lets_test::random_weights(m, rng);
    const TransportPlan a = solve_exact(c, w);
    c.c.array() += 7.25;
    const TransportPlan b = solve_exact(c, w);
    EXPECT_LT((a.d - b.d).cwiseAbs().maxCoeff(), 1e-12) << t;
  }
}

TEST(SolveExact, RejectsBadInputs) {
  EXPECT_THROW(solve_exact(cost_matrix(points({0, 1, 2})), WeightVector::uniform(2)), DimensionMismatch);
  CostMatrix c = cost_matrix(points({0, 1}));
  c.c(0, 1) = std::nan("");
  EXPECT_THROW(solve_exact(c, WeightVector::uniform(2)), InvalidArgument);
}

TEST(SolveExact, ModerateSizeIsFeasibleAndOptimal) {
  RngStream rng(6);
  const Eigen::Index m = 120;
  const CostMatrix c = cost_matrix(rng.normal_matrix(3, m));
  const WeightVector w = lets_test::random_weights(m, rng, 1.0);
  const TransportPlan p = solve_exact(c, w);
  expect_feasible(p, w);
  EXPECT_LT(p.duality_gap, 1e-8 * (1.0 + std::abs(p.objective)));
  EXPECT_GE(p.min_reduced_cost, -1e-9);
}

TEST(SolveSinkhorn, UniformWeightsKeepUniformMarginals) {
  RngStream rng(7);
  const CostMatrix c = cost_matrix(rng.normal_matrix(2, 6));
  for (double lambda : {0.5, 5.0, 40.0}) {
    const TransportPlan p = solve_sinkhorn(c, WeightVector::uniform(6), lambda);
    // Near-coincident points make lambda = 40 converge slowly; the returned
    // plan is still projected onto the marginals.
    if (lambda < 10.0) EXPECT_TRUE(p.converged);
    expect_feasible(p, WeightVector::uniform(6), 1e-12);
  }
}

TEST(SolveSinkhorn, ApproachesExactObjectiveMonotonically) {
  RngStream rng(8);
  for (auto scale : {CostScale::kRaw, CostScale::kMax}) {
    const CostMatrix c = cost_matrix(rng.normal_matrix(2, 5));
    const WeightVector w = lets_test::random_weights(5, rng);
    const double exact = solve_exact(c, w).objective;
    SinkhornOptions opts;
    opts.cost_scale = scale;
    double previous = std::numeric_limits<double>::infinity();
    for (double lambda : {1.0, 5.0, 20.0, 40.0, 100.0, 1000.0}) {
      const TransportPlan p = solve_sinkhorn(c, w, lambda, opts);
      EXPECT_GE(p.objective, exact - 1e-9) << lambda;
      EXPECT_LE(p.objective, previous + 1e-9) << lambda;
      previous = p.objective;
    }
    EXPECT_NEAR(previous, exact, 1e-2 * (1.0 + exact));
  }
}

TEST(SolveSinkhorn, CostScalingIsAChangeOfLambda) {
  RngStream rng(9);
  const CostMatrix c = cost_matrix(rng.normal_matrix(2, 6) * 3.0);
  const WeightVector w = lets_test::random_weights(6, rng);
  SinkhornOptions scaled, raw;
  scaled.cost_scale = CostScale::kMax;
  raw.cost_scale = CostScale::kRaw;
  const double f = cost_scale_factor(c, CostScale::kMax);
  EXPECT_DOUBLE_EQ(f, c.c.maxCoeff());
  const TransportPlan a = solve_sinkhorn(c, w, 40.0, scaled);
  const TransportPlan b = solve_sinkhorn(c, w, 40.0 / f, raw);
  EXPECT_LT((a.d - b.d).cwiseAbs().maxCoeff(), 1e-7);
  EXPECT_DOUBLE_EQ(a.lambda, 40.0);
}

TEST(SolveSinkhorn, LogAndLinearDomainsAgree) {
  RngStream rng(10);
  const CostMatrix c = cost_matrix(rng.normal_matrix(1, 6));
  const WeightVector w = lets_test::random_weights(6, rng);
  SinkhornOptions lin;
  lin.log_domain = false;
  lin.cost_scale = CostScale::kRaw;
  SinkhornOptions lg = lin;
  lg.log_domain = true;
  const TransportPlan a = solve_sinkhorn(c, w, 2.0, lin);
  const TransportPlan b = solve_sinkhorn(c, w, 2.0, lg);
  EXPECT_LT((a.d - b.d).cwiseAbs().maxCoeff(), 1e-7);
}

TEST(SolveSinkhorn, LinearDomainUnderflowIsReported) {
  const CostMatrix c = cost_matrix(points({0, 100, 200}));
  SinkhornOptions lin;
  lin.log_domain = false;
  lin.cost_scale = CostScale::kRaw;
  EXPECT_THROW(solve_sinkhorn(c, WeightVector((Vector(3) << 1.0, 0.0, 0.0).finished()), 100.0, lin), SolverError);
  EXPECT_NO_THROW(solve_sinkhorn(c, WeightVector((Vector(3) << 1.0, 0.0, 0.0).finished()), 100.0));
}

TEST(SolveSinkhorn, IterationCapFlagsNonConvergence) {
  RngStream rng(11);
  const CostMatrix c = cost_matrix(rng.normal_matrix(2, 8));
  SinkhornOptions opts;
  opts.max_iter = 2;
  opts.epsilon_scaling = false;
  const WeightVector w = lets_test::random_weights(8, rng, 2.0);
  const TransportPlan p = solve_sinkhorn(c, w, 200.0, opts);
  EXPECT_FALSE(p.converged);
  // The last iterate is projected onto both marginals.
  expect_feasible(p, w, 1e-12);
  EXPECT_THROW(solve_sinkhorn(c, WeightVector::uniform(8), 0.0), InvalidArgument);
}

TEST(SolveSinkhorn, NeverBeatsExactCost) {
  RngStream rng(12);
  for (int t = 0; t < 20; ++t) {
    const Eigen::Index m = 3 + t % 7;
    const CostMatrix c = cost_matrix(rng.normal_matrix(2, m));
    const WeightVector w = lets_test::random_weights(m, rng);
    const double exact = solve_exact(c, w).objective;
    for (double lambda : {1.0, 40.0}) EXPECT_GE(solve_sinkhorn(c, w, lambda).objective, exact - 1e-9);
  }
}

TEST(Solve1d, Examples) {
  RngStream rng(13);
  const Vector x = rng.normal_vector(6);
  EXPECT_LT((solve_1d(x, WeightVector::uniform(6)).d - Matrix::Identity(6, 6)).norm(), 1e-14);
  const TransportPlan forced = solve_1d((Vector(2) << 0, 1).finished(), WeightVector((Vector(2) << 1.0, 0.0).finished()));
  EXPECT_EQ(forced.d, (Matrix(2, 2) << 1, 1, 0, 0).finished());
}

TEST(Solve1d, MatchesExactSolverAndOracle) {
  RngStream rng(14);
  for (int t = 0; t < 200; ++t) {
    const Eigen::Index m = 2 + t % 11;
    const Vector x = rng.normal_vector(m);
    const WeightVector w = lets_test::random_weights(m, rng, 1.5);
    const TransportPlan p = solve_1d(x, w);
    expect_feasible(p, w);
    const CostMatrix c = cost_matrix(Matrix(x.transpose()));
    EXPECT_NEAR(p.objective, solve_exact(c, w).objective, 1e-8) << t;
    if (t % 10 == 0) EXPECT_NEAR(p.objective, lets_test::transport_lp(c.c, w.values()).objective, 1e-8);
  }
}

TEST(LpOracle, KnownAssignment) {
  // Two points swapped: the cheaper plan keeps members in place.
  const Matrix c = (Matrix(2, 2) << 0, 1, 1, 0).finished();
  EXPECT_NEAR(lets_test::transport_lp(c, Vector::Constant(2, 0.5)).objective, 0.0, 1e-12);
  EXPECT_NEAR(lets_test::transport_lp(c, (Vector(2) << 1.0, 0.0).finished()).objective, 1.0, 1e-12);
}
