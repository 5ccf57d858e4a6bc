#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "lets/harness.hpp"

using namespace lets;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("lets_harness_" + name);
  fs::remove_all(p);
  return p;
}

ExperimentConfig small_lorenz63(SmootherKind kind = SmootherKind::kEsrs) {
  ExperimentConfig c = preset_lorenz63();
  c.model.spinup_blocks = 20;
  c.observation.count = 40;
  c.smoother = SmootherConfig{};
  c.smoother.kind = kind;
  c.smoother.lag = 2;
  c.smoother.rejuvenation = 0.1;
  c.run.members = 8;
  c.run.replicates = 2;
  c.run.seed = 11;
  return c;
}

Json parse(const char* text) { return Json::parse(text); }

const char* kMinimal = R"({
  "model": {"name": "lorenz63", "dt": 0.01},
  "observation": {"sites": [0], "variance": 8, "interval": 0.12, "count": 10},
  "smoother": {"kind": "esrs", "lag": 1}
})";

}  // namespace

TEST(Config, PresetFilesMatchBuiltIns) {
  for (const std::string name : {"lorenz63", "mackey_glass", "lorenz96"}) {
    const ExperimentConfig from_file = load_config(std::string(LETS_PRESET_DIR) + "/" + name + ".json");
    EXPECT_EQ(config_to_json(from_file), config_to_json(preset(name))) << name;
  }
  EXPECT_THROW(preset("lorenz84"), ConfigError);
}

TEST(Config, RoundTripsThroughJson) {
  ExperimentConfig c = small_lorenz63();
  c.smoother = SmootherConfig::hybrid(SmootherConfig{}, [] {
    SmootherConfig e;
    e.kind = SmootherKind::kEtps;
    e.etps.solver = TransportSolver::kSinkhorn;
    e.etps.lambda = 12.5;
    e.etps.sinkhorn.cost_scale = CostScale::kMean;
    return e;
  }(), 0.3);
  c.smoother.lag = 3;
  for (auto& s : c.smoother.stages) s.lag = 3;
  const Json j = config_to_json(c);
  EXPECT_EQ(config_to_json(config_from_json(j)), j);
  EXPECT_EQ(config_from_json(j).smoother.stages.at(1).etps.sinkhorn.cost_scale, CostScale::kMean);
}

TEST(Config, MinimalDocumentUsesDefaults) {
  const ExperimentConfig c = config_from_json(parse(kMinimal));
  EXPECT_EQ(c.model.n_x, 3);
  EXPECT_EQ(c.smoother.lag, 1);
  EXPECT_EQ(c.run.members, 20);
  EXPECT_FALSE(c.localisation.enabled);
}

TEST(Config, ErrorsNameTheField) {
  auto field_of = [](const std::string& text) -> std::string {
    try {
      config_from_json(Json::parse(text));
    } catch (const ConfigError& e) {
      return e.field();
    }
    return "(none)";
  };
  EXPECT_EQ(field_of("[]"), "(root)");
  EXPECT_EQ(field_of(R"({"observation": {}, "smoother": {}})"), "model");
  Json j = parse(kMinimal);
  j["smoother"]["kind"] = "kalman";
  EXPECT_EQ(field_of(j.dump()), "smoother.kind");
  j = parse(kMinimal);
  j["observation"]["variance"] = -1.0;
  EXPECT_EQ(field_of(j.dump()), "observation.variance");
  j = parse(kMinimal);
  j["run"] = {{"members", 1}};
  EXPECT_EQ(field_of(j.dump()), "run.members");
  j = parse(kMinimal);
  j["smoother"] = {{"kind", "hybrid"}};
  EXPECT_EQ(field_of(j.dump()), "smoother");
  j = parse(kMinimal);
  j["smoother"]["lag"] = "two";
  EXPECT_EQ(field_of(j.dump()), "smoother.lag");
  j = parse(kMinimal);
  j["smoother"] = {{"kind", "etps"}, {"cost_scale", "median"}};
  EXPECT_EQ(field_of(j.dump()), "smoother.cost_scale");
}

TEST(Config, SetupRejectsBadIntervalsAndSites) {
  ExperimentConfig c = small_lorenz63();
  c.observation.interval = 0.125;
  EXPECT_THROW(make_twin_setup(c), ConfigError);
  c = small_lorenz63();
  c.observation.sites = {3};
  EXPECT_THROW(make_twin_setup(c), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
}

TEST(Experiment, SameSeedGivesIdenticalFiles) {
  const ExperimentConfig c = small_lorenz63(SmootherKind::kNets);
  const fs::path a = scratch_dir("det_a"), b = scratch_dir("det_b");
  write_experiment(run_experiment(c), a);
  write_experiment(run_experiment(c), b);
  for (const char* f : {"metrics.csv", "summary.csv", "config.json", "diagnostics_rep0.csv", "diagnostics_rep1.csv"}) {
    ASSERT_TRUE(fs::exists(a / f)) << f;
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  EXPECT_EQ(slurp(a / "metrics.csv").rfind(kMetricsHeader, 0), 0u);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Experiment, ThreadCountDoesNotChangeResults) {
  ExperimentConfig c = small_lorenz63();
  const ExperimentResult one = run_experiment(c);
  c.run.threads = 2;
  const ExperimentResult two = run_experiment(c);
  for (std::size_t r = 0; r < one.replicates.size(); ++r)
    EXPECT_EQ(one.replicates[r].metrics.rmse_mu, two.replicates[r].metrics.rmse_mu);
}

TEST(Experiment, ReplicatesShareTruthButNotEnsembles) {
  const ExperimentResult r = run_experiment(small_lorenz63());
  ASSERT_EQ(r.replicates.size(), 2u);
  EXPECT_EQ(r.replicates[0].run.record.truth.front(), r.replicates[1].run.record.truth.front());
  EXPECT_NE(r.replicates[0].metrics.rmse_mu, r.replicates[1].metrics.rmse_mu);
}

TEST(Experiment, BurnInDropsLeadingRecordsOnly) {
  ExperimentConfig c = small_lorenz63();
  c.run.replicates = 1;
  const RunRecord full = run_experiment(c).replicates[0].run.record;
  c.run.burn_in = 5;
  const RunRecord trimmed = run_experiment(c).replicates[0].run.record;
  // K observations with lag L leave K - L completed windows.
  ASSERT_EQ(full.times.size(), 38u);
  ASSERT_EQ(trimmed.times.size(), 33u);
  EXPECT_EQ(full.times.front(), 1);
  EXPECT_EQ(trimmed.times.front(), 6);
  const std::vector<Vector> tail_mean(full.mean.begin() + 5, full.mean.end());
  const std::vector<Vector> tail_truth(full.truth.begin() + 5, full.truth.end());
  EXPECT_DOUBLE_EQ(trimmed.rmse_mean(), rmse(tail_mean, tail_truth));
}

TEST(Experiment, EveryStepRecordsEveryBlock) {
  ExperimentConfig c = preset_mackey_glass();
  c.model.spinup_blocks = 200;
  c.observation.count = 4;
  c.smoother.lag = 3;
  c.run.members = 6;
  c.run.replicates = 1;
  c.run.mode = false;
  const RunRecord r = run_experiment(c).replicates[0].run.record;
  EXPECT_EQ(r.times.size(), 4u * 80u - 3u);
}

TEST(Experiment, DivergedReplicatesAreReportedNotFatal) {
  // Members thousands of units off the attractor overflow forward Euler
  // within one block; the truth itself stays finite.
  ExperimentConfig c = small_lorenz63();
  c.run.init_variance = 1e8;
  const ExperimentResult r = run_experiment(c);
  EXPECT_EQ(r.summary.runs, 0u);
  EXPECT_EQ(r.summary.diverged, 2u);
  EXPECT_TRUE(std::isnan(r.summary.rmse_mu.mean));
  for (const auto& rep : r.replicates) {
    EXPECT_TRUE(rep.metrics.diverged());
    EXPECT_NE(rep.failure.find("not finite"), std::string::npos);
  }

  const fs::path dir = scratch_dir("diverged");
  write_experiment(r, dir);
  recompute_summary(dir / "metrics.csv", dir / "again.csv");
  EXPECT_EQ(slurp(dir / "again.csv"), slurp(dir / "summary.csv"));
  EXPECT_NE(slurp(dir / "summary.csv").find(",0,2,nan,"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Sweep, WritesOneSummaryRowPerValue) {
  ExperimentConfig c = small_lorenz63();
  c.run.replicates = 1;
  const fs::path dir = scratch_dir("sweep");
  const auto results = sweep(c, "M", {4, 6}, dir);
  ASSERT_EQ(results.size(), 2u);
  EXPECT_EQ(results[1].config.run.members, 6);
  std::ifstream f(dir / "sweep_summary.csv");
  int lines = 0;
  for (std::string line; std::getline(f, line);) ++lines;
  EXPECT_EQ(lines, 3);

  recompute_summary(dir / "sweep_metrics.csv", dir / "again.csv");
  EXPECT_EQ(slurp(dir / "again.csv"), slurp(dir / "sweep_summary.csv"));
  EXPECT_THROW(sweep(c, "alpha", {0.5}, dir), ConfigError);
  EXPECT_THROW(sweep(c, "beta", {0.5}, dir), ConfigError);
  fs::remove_all(dir);
}

TEST(Cycle, ForecastOnlyWithoutObservation) {
  CycleSetup setup;
  setup.model = std::make_shared<Lorenz63Model>(0.01);
  setup.steps_per_block = 12;
  setup.observation = ObservationModel::select(3, {0}, 8.0);
  setup.smoother.lag = 1;
  RngStream rng(1);
  SmootherState state{TrajectoryEnsemble({rng.normal_matrix(3, 5)}, 0)};
  const CycleDiagnostics d = assimilation_cycle(state, std::nullopt, setup, rng);
  EXPECT_FALSE(d.analysed);
  EXPECT_EQ(d.k, 1);
  EXPECT_EQ(state.history.num_blocks(), 2);
  RngStream again(2);
  EXPECT_EQ(state.history.newest(), propagate_ensemble(state.history.block(0), *setup.model, 12, again));
  SmootherState empty;
  EXPECT_THROW(assimilation_cycle(empty, std::nullopt, setup, rng), InvalidArgument);
}

class FilterLimit : public ::testing::Test {
 protected:
  void SetUp() override {
    setup.model = std::make_shared<Lorenz63Model>(0.01);
    setup.steps_per_block = 12;
    setup.observation = ObservationModel::select(3, {0}, 8.0);
    RngStream rng(3);
    start = 2.0 * rng.normal_matrix(3, 10);
    start.row(2).array() += 20.0;
    RngStream unused(4);
    forecast = propagate_ensemble(start, *setup.model, 12, unused);
    y = {(Vector(1) << forecast(0, 0) + 1.0).finished(), 1};
  }

  EnsembleMatrix cycle(const SmootherConfig& c) {
    setup.smoother = c;
    SmootherState state{TrajectoryEnsemble({start}, 0)};
    RngStream rng(5);
    assimilation_cycle(state, y, setup, rng);
    return state.history.newest();
  }

  CycleSetup setup;
  EnsembleMatrix start, forecast;
  Observation y;
};

TEST_F(FilterLimit, EsrsWithoutLagIsTheSquareRootFilter) {
  SmootherConfig c;
  c.kind = SmootherKind::kEsrs;
  const TransformMatrix d = esrs_transform(forecast, y, setup.observation);
  EXPECT_LT((cycle(c) - forecast * d.d).cwiseAbs().maxCoeff(), 1e-10);
}

TEST_F(FilterLimit, EtpsWithoutLagIsTheTransformFilter) {
  SmootherConfig c;
  c.kind = SmootherKind::kEtps;
  const EnsembleMatrix post = cycle(c);
  const WeightVector w = importance_weights(forecast, y, setup.observation).weights;
  EXPECT_LT((post.rowwise().mean() - weighted_mean(forecast, w)).cwiseAbs().maxCoeff(), 1e-9);
  const EtpsResult r = etps_transform(TrajectoryEnsemble({forecast}, 0), w);
  EXPECT_LT((post - forecast * r.transforms.front().d).cwiseAbs().maxCoeff(), 1e-10);
}

TEST_F(FilterLimit, BootstrapCopiesForecastMembers) {
  SmootherConfig c;
  c.kind = SmootherKind::kBootstrap;
  const EnsembleMatrix post = cycle(c);
  for (Eigen::Index j = 0; j < post.cols(); ++j) {
    bool found = false;
    for (Eigen::Index i = 0; i < forecast.cols() && !found; ++i) found = (post.col(j) - forecast.col(i)).norm() < 1e-12;
    EXPECT_TRUE(found) << j;
  }
}

TEST(Cli, ConfigErrorExitsWithTwo) {
  const fs::path dir = scratch_dir("cli");
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "bad.json");
    f << R"({"model": {"name": "lorenz63"}, "observation": {"sites": [0]}, "smoother": {"kind": "kalman"}})";
  }
  const std::string base = std::string(LETS_CLI_PATH) + " assimilate --out " + (dir / "out").string();
  int status = std::system((base + " --config " + (dir / "bad.json").string() + " > /dev/null 2>&1").c_str());
  ASSERT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 2);
  status = std::system((base + " --preset nowhere > /dev/null 2>&1").c_str());
  EXPECT_EQ(WEXITSTATUS(status), 2);
  fs::remove_all(dir);
}
