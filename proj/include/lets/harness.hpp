#pragma once

// Twin-experiment configuration, presets, replicate execution, parameter
// sweeps and CSV persistence.

#include <nlohmann/json.hpp>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "lets/assimilation.hpp"
#include "lets/error.hpp"
#include "lets/localisation.hpp"
#include "lets/metrics.hpp"
#include "lets/models.hpp"
#include "lets/smoothers.hpp"

namespace lets {

using Json = nlohmann::json;

struct ModelConfig {
  std::string name = "lorenz63";
  double dt = 0.01;
  int n_x = 3;              // lorenz96 / white_noise
  double forcing = 8.0;     // lorenz96
  double process_noise = 0.0;
  std::vector<double> x0;   // empty: model default
  int spinup_blocks = 100;
};

struct ObservationConfig {
  std::vector<int> sites;   // explicit sites, or
  int stride = 0;           // every stride-th site from offset
  int offset = 0;
  double variance = 1.0;
  double interval = 0.0;    // time between observations
  int count = 100;          // K
};

struct LocalisationBlock {
  bool enabled = false;
  double radius = 1.0;
  DistanceScheme scheme = DistanceScheme::kStationary;
  std::string table_path;   // cache for the autocorrelation table
  int series_length = 10000;
  int max_tau = 10;
};

struct RunConfig {
  int members = 20;
  int replicates = 1;
  int burn_in = 0;
  std::uint64_t seed = 1;
  double init_variance = 0.5;
  bool every_step = false;  // RMSE at every model block instead of observation times
  bool mode = false;        // also compute the KDE-mode RMSE
  int threads = 1;
};

struct OutputConfig {
  std::string dir = "out";
  bool dump_ensembles = false;
  bool diagnostics = true;
};

struct ExperimentConfig {
  ModelConfig model;
  ObservationConfig observation;
  SmootherConfig smoother;
  LocalisationBlock localisation;
  RunConfig run;
  OutputConfig output;
};

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
T get_or(const Json& j, const char* key, T fallback, const std::string& path) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError(path + "." + key, e.what());
  }
}

inline SmootherKind parse_kind(const std::string& s, const std::string& field) {
  if (s == "esrs") return SmootherKind::kEsrs;
  if (s == "nets") return SmootherKind::kNets;
  if (s == "etps") return SmootherKind::kEtps;
  if (s == "bootstrap") return SmootherKind::kBootstrap;
  if (s == "hybrid") return SmootherKind::kHybrid;
  if (s == "none") return SmootherKind::kNone;
  throw ConfigError(field, "unknown smoother kind '" + s + "'");
}

inline RotationMode parse_rotation(const std::string& s, const std::string& field) {
  if (s == "optimal") return RotationMode::kOptimal;
  if (s == "random") return RotationMode::kRandom;
  if (s == "identity") return RotationMode::kIdentity;
  throw ConfigError(field, "unknown rotation '" + s + "'");
}

inline TransportSolver parse_solver(const std::string& s, const std::string& field) {
  if (s == "exact") return TransportSolver::kExact;
  if (s == "sinkhorn") return TransportSolver::kSinkhorn;
  if (s == "sorted-1d") return TransportSolver::kSorted1d;
  throw ConfigError(field, "unknown transport solver '" + s + "'");
}

inline TemporalMode parse_temporal(const std::string& s, const std::string& field) {
  if (s == "pathwise") return TemporalMode::kPathwise;
  if (s == "per-time") return TemporalMode::kPerTime;
  if (s == "constant") return TemporalMode::kConstant;
  throw ConfigError(field, "unknown temporal mode '" + s + "'");
}

inline CostScale parse_cost_scale(const std::string& s, const std::string& field) {
  if (s == "raw") return CostScale::kRaw;
  if (s == "max") return CostScale::kMax;
  if (s == "mean") return CostScale::kMean;
  throw ConfigError(field, "unknown cost scale '" + s + "'");
}

inline DistanceScheme parse_scheme(const std::string& s, const std::string& field) {
  if (s == "stationary") return DistanceScheme::kStationary;
  if (s == "autocorrelation") return DistanceScheme::kAutocorrelation;
  throw ConfigError(field, "unknown distance scheme '" + s + "'");
}

inline SmootherConfig smoother_from_json(const Json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path, "expected an object");
  SmootherConfig c;
  c.kind = parse_kind(get_or<std::string>(j, "kind", "esrs", path), path + ".kind");
  c.lag = get_or<int>(j, "lag", 0, path);
  c.rejuvenation = get_or<double>(j, "rejuvenation", 0.0, path);
  c.rotation = parse_rotation(get_or<std::string>(j, "rotation", "optimal", path), path + ".rotation");
  c.etps.solver = parse_solver(get_or<std::string>(j, "solver", "exact", path), path + ".solver");
  c.etps.lambda = get_or<double>(j, "lambda", 40.0, path);
  c.etps.correction = get_or<bool>(j, "correction", false, path);
  c.etps.temporal = parse_temporal(get_or<std::string>(j, "temporal", "pathwise", path), path + ".temporal");
  c.etps.sinkhorn.max_iter = get_or<int>(j, "sinkhorn_max_iter", c.etps.sinkhorn.max_iter, path);
  c.etps.sinkhorn.tol = get_or<double>(j, "sinkhorn_tol", c.etps.sinkhorn.tol, path);
  c.etps.sinkhorn.cost_scale =
      parse_cost_scale(get_or<std::string>(j, "cost_scale", to_string(c.etps.sinkhorn.cost_scale), path), path + ".cost_scale");
  c.alpha = get_or<double>(j, "alpha", 0.5, path);
  if (c.kind == SmootherKind::kHybrid) {
    if (!j.contains("first") || !j.contains("second")) throw ConfigError(path, "a hybrid needs 'first' and 'second'");
    SmootherConfig first = smoother_from_json(j.at("first"), path + ".first");
    SmootherConfig second = smoother_from_json(j.at("second"), path + ".second");
    first.lag = second.lag = c.lag;
    c.stages = {first, second};
  }
  c.validate();
  return c;
}

inline Json smoother_to_json(const SmootherConfig& c) {
  Json j;
  j["kind"] = to_string(c.kind);
  j["lag"] = c.lag;
  j["rejuvenation"] = c.rejuvenation;
  switch (c.kind) {
    case SmootherKind::kNets: j["rotation"] = to_string(c.rotation); break;
    case SmootherKind::kEtps:
      j["solver"] = to_string(c.etps.solver);
      j["lambda"] = c.etps.lambda;
      j["cost_scale"] = to_string(c.etps.sinkhorn.cost_scale);
      j["correction"] = c.etps.correction;
      j["temporal"] = to_string(c.etps.temporal);
      break;
    case SmootherKind::kHybrid: {
      j["alpha"] = c.alpha;
      Json a = smoother_to_json(c.stages.at(0)), b = smoother_to_json(c.stages.at(1));
      a.erase("lag");
      b.erase("lag");
      a.erase("rejuvenation");
      b.erase("rejuvenation");
      j["first"] = a;
      j["second"] = b;
      break;
    }
    default: break;
  }
  return j;
}

}  // namespace detail

inline ExperimentConfig config_from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("(root)", "configuration must be a JSON object");
  ExperimentConfig c;
  if (!j.contains("model")) throw ConfigError("model", "missing block");
  const Json& m = j.at("model");
  c.model.name = detail::get_or<std::string>(m, "name", c.model.name, "model");
  c.model.dt = detail::get_or<double>(m, "dt", c.model.dt, "model");
  c.model.n_x = detail::get_or<int>(m, "n_x", c.model.name == "lorenz63" ? 3 : (c.model.name == "mackey_glass" ? 1 : 40), "model");
  c.model.forcing = detail::get_or<double>(m, "forcing", c.model.forcing, "model");
  c.model.process_noise = detail::get_or<double>(m, "process_noise", 0.0, "model");
  c.model.x0 = detail::get_or<std::vector<double>>(m, "x0", {}, "model");
  c.model.spinup_blocks = detail::get_or<int>(m, "spinup_blocks", c.model.spinup_blocks, "model");
  if (!(c.model.dt > 0.0)) throw ConfigError("model.dt", "dt must be positive");
  if (c.model.spinup_blocks < 0) throw ConfigError("model.spinup_blocks", "must be nonnegative");

  if (!j.contains("observation")) throw ConfigError("observation", "missing block");
  const Json& o = j.at("observation");
  c.observation.sites = detail::get_or<std::vector<int>>(o, "sites", {}, "observation");
  c.observation.stride = detail::get_or<int>(o, "stride", 0, "observation");
  c.observation.offset = detail::get_or<int>(o, "offset", 0, "observation");
  c.observation.variance = detail::get_or<double>(o, "variance", 1.0, "observation");
  c.observation.interval = detail::get_or<double>(o, "interval", c.model.dt, "observation");
  c.observation.count = detail::get_or<int>(o, "count", c.observation.count, "observation");
  if (!(c.observation.variance > 0.0)) throw ConfigError("observation.variance", "must be positive");
  if (c.observation.count < 1) throw ConfigError("observation.count", "must be at least 1");
  if (c.observation.sites.empty() && c.observation.stride <= 0)
    throw ConfigError("observation.sites", "give either 'sites' or a positive 'stride'");

  if (!j.contains("smoother")) throw ConfigError("smoother", "missing block");
  c.smoother = detail::smoother_from_json(j.at("smoother"), "smoother");

  if (j.contains("localisation")) {
    const Json& l = j.at("localisation");
    c.localisation.enabled = detail::get_or<bool>(l, "enabled", true, "localisation");
    c.localisation.radius = detail::get_or<double>(l, "radius", 1.0, "localisation");
    c.localisation.scheme =
        detail::parse_scheme(detail::get_or<std::string>(l, "scheme", "stationary", "localisation"), "localisation.scheme");
    c.localisation.table_path = detail::get_or<std::string>(l, "table", "", "localisation");
    c.localisation.series_length = detail::get_or<int>(l, "series_length", 10000, "localisation");
    c.localisation.max_tau = detail::get_or<int>(l, "max_tau", std::max(10, c.smoother.lag), "localisation");
    if (!(c.localisation.radius > 0.0)) throw ConfigError("localisation.radius", "must be positive");
  }

  if (j.contains("run")) {
    const Json& r = j.at("run");
    c.run.members = detail::get_or<int>(r, "members", c.run.members, "run");
    c.run.replicates = detail::get_or<int>(r, "replicates", c.run.replicates, "run");
    c.run.burn_in = detail::get_or<int>(r, "burn_in", 0, "run");
    c.run.seed = detail::get_or<std::uint64_t>(r, "seed", 1, "run");
    c.run.init_variance = detail::get_or<double>(r, "init_variance", c.run.init_variance, "run");
    c.run.every_step = detail::get_or<bool>(r, "every_step", false, "run");
    c.run.mode = detail::get_or<bool>(r, "mode", false, "run");
    c.run.threads = detail::get_or<int>(r, "threads", 1, "run");
  }
  if (c.run.members < 2) throw ConfigError("run.members", "need at least two members");
  if (c.run.replicates < 1) throw ConfigError("run.replicates", "need at least one replicate");
  if (c.run.burn_in < 0) throw ConfigError("run.burn_in", "must be nonnegative");
  if (c.run.init_variance < 0.0) throw ConfigError("run.init_variance", "must be nonnegative");

  if (j.contains("output")) {
    const Json& out = j.at("output");
    c.output.dir = detail::get_or<std::string>(out, "dir", c.output.dir, "output");
    c.output.dump_ensembles = detail::get_or<bool>(out, "dump_ensembles", false, "output");
    c.output.diagnostics = detail::get_or<bool>(out, "diagnostics", true, "output");
  }
  return c;
}

inline Json config_to_json(const ExperimentConfig& c) {
  Json j;
  j["model"] = {{"name", c.model.name}, {"dt", c.model.dt}, {"n_x", c.model.n_x}, {"forcing", c.model.forcing},
                {"process_noise", c.model.process_noise}, {"spinup_blocks", c.model.spinup_blocks}};
  if (!c.model.x0.empty()) j["model"]["x0"] = c.model.x0;
  Json o = {{"variance", c.observation.variance}, {"interval", c.observation.interval}, {"count", c.observation.count}};
  if (!c.observation.sites.empty()) o["sites"] = c.observation.sites;
  else {
    o["stride"] = c.observation.stride;
    o["offset"] = c.observation.offset;
  }
  j["observation"] = o;
  j["smoother"] = detail::smoother_to_json(c.smoother);
  if (c.localisation.enabled) {
    j["localisation"] = {{"radius", c.localisation.radius}, {"scheme", to_string(c.localisation.scheme)},
                         {"series_length", c.localisation.series_length}, {"max_tau", c.localisation.max_tau}};
    if (!c.localisation.table_path.empty()) j["localisation"]["table"] = c.localisation.table_path;
  }
  j["run"] = {{"members", c.run.members}, {"replicates", c.run.replicates}, {"burn_in", c.run.burn_in},
              {"seed", c.run.seed}, {"init_variance", c.run.init_variance}, {"every_step", c.run.every_step},
              {"mode", c.run.mode}, {"threads", c.run.threads}};
  j["output"] = {{"dir", c.output.dir}, {"dump_ensembles", c.output.dump_ensembles}, {"diagnostics", c.output.diagnostics}};
  return j;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("--config", "cannot open " + path);
  Json j;
  try {
    j = Json::parse(f, nullptr, true, /*ignore_comments=*/true);
  } catch (const Json::parse_error& e) {
    throw ConfigError("--config", std::string("parse error: ") + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

/// Lorenz 63, first component observed every 0.12 with R = 8.
inline ExperimentConfig preset_lorenz63() {
  ExperimentConfig c;
  c.model = {"lorenz63", 0.01, 3, 8.0, 0.0, {-0.587, -0.563, 16.870}, 500};
  c.observation.sites = {0};
  c.observation.variance = 8.0;
  c.observation.interval = 0.12;
  c.observation.count = 10000;
  c.smoother.kind = SmootherKind::kEtps;
  c.smoother.etps = {TransportSolver::kSinkhorn, 40.0, true, TemporalMode::kPathwise};
  c.smoother.lag = 6;
  c.smoother.rejuvenation = 0.2;
  c.run.members = 25;
  c.run.init_variance = 0.5;
  c.run.replicates = 50;
  c.run.mode = true;
  return c;
}

/// Mackey-Glass delay system observed every 8 time units with R = 0.05.
inline ExperimentConfig preset_mackey_glass() {
  ExperimentConfig c;
  c.model = {"mackey_glass", 0.1, 1, 8.0, 0.0, {1.2}, 2000};
  c.observation.sites = {0};
  c.observation.variance = 0.05;
  c.observation.interval = 8.0;
  c.observation.count = 12000;
  c.smoother.kind = SmootherKind::kEtps;
  c.smoother.etps = {TransportSolver::kSinkhorn, 40.0, true, TemporalMode::kPathwise};
  c.smoother.lag = 40;
  c.smoother.rejuvenation = 0.005;
  c.run.members = 50;
  c.run.init_variance = 0.1;
  c.run.replicates = 50;
  c.run.every_step = true;
  c.run.mode = true;
  return c;
}

/// Lorenz 96 with 40 sites, every second site observed every 0.11 with
/// R = 8, localized ESRS.
inline ExperimentConfig preset_lorenz96() {
  ExperimentConfig c;
  std::vector<double> x0(40, 8.0);
  x0[19] = 8.01;
  c.model = {"lorenz96", 0.005, 40, 8.0, 0.0, x0, 1000};
  c.observation.stride = 2;
  c.observation.variance = 8.0;
  c.observation.interval = 0.11;
  c.observation.count = 50000;
  c.smoother.kind = SmootherKind::kEsrs;
  c.smoother.lag = 4;
  c.smoother.rejuvenation = 0.0;
  c.localisation.enabled = true;
  c.localisation.radius = 1.0;
  c.localisation.scheme = DistanceScheme::kAutocorrelation;
  c.localisation.series_length = 10000;
  c.localisation.max_tau = 10;
  c.run.members = 30;
  c.run.init_variance = 0.5;
  c.run.burn_in = 1000;
  c.run.replicates = 1;
  return c;
}

inline ExperimentConfig preset(const std::string& name) {
  if (name == "lorenz63") return preset_lorenz63();
  if (name == "mackey_glass") return preset_mackey_glass();
  if (name == "lorenz96") return preset_lorenz96();
  throw ConfigError("--preset", "unknown preset '" + name + "'");
}

// ---------------------------------------------------------------------------
// Building runs
// ---------------------------------------------------------------------------

inline std::shared_ptr<Model> make_model(const ModelConfig& m) {
  std::shared_ptr<Model> model;
  if (m.name == "lorenz63") model = std::make_shared<Lorenz63Model>(m.dt);
  else if (m.name == "lorenz96") model = std::make_shared<Lorenz96Model>(m.n_x, m.forcing, m.dt);
  else if (m.name == "mackey_glass") {
    try {
      model = std::make_shared<MackeyGlassModel>(m.dt);
    } catch (const InvalidArgument& e) {
      throw ConfigError("model.dt", e.what());
    }
  } else if (m.name == "white_noise") model = std::make_shared<WhiteNoiseModel>(m.n_x, std::max(m.process_noise, 1.0));
  else throw ConfigError("model.name", "unknown model '" + m.name + "'");
  if (m.process_noise > 0.0 && m.name != "white_noise") {
    const auto n = model->state_dim();
    model->set_process_noise(m.process_noise * Matrix::Identity(n, n));
  }
  return model;
}

inline int round_ratio(double a, double b, const std::string& field) {
  const double r = a / b;
  const long n = std::lround(r);
  if (n < 1 || std::abs(r - static_cast<double>(n)) > 1e-6 * r)
    throw ConfigError(field, "must be a positive multiple of model.dt");
  return static_cast<int>(n);
}

/// Free run of the truth model sampled once per observation interval, for
/// the autocorrelation distance. The table is cached at `table_path` when
/// one is configured.
inline std::shared_ptr<AutocorrelationTable> build_autocorrelation(const ExperimentConfig& c) {
  const auto& lc = c.localisation;
  if (!lc.table_path.empty() && std::filesystem::exists(lc.table_path))
    return std::make_shared<AutocorrelationTable>(load_autocorrelation_csv(lc.table_path));
  auto model = make_model(c.model);
  if (model->memory() > 0) throw ConfigError("localisation", "autocorrelation tables need a Markov model");
  const int steps = round_ratio(c.observation.interval, c.model.dt, "observation.interval");
  StateVector x = StateVector::Ones(model->state_dim());
  if (!c.model.x0.empty()) x = Eigen::Map<const Vector>(c.model.x0.data(), static_cast<Eigen::Index>(c.model.x0.size()));
  RngStream rng(c.run.seed);
  for (int b = 0; b < c.model.spinup_blocks; ++b) x = propagate_ensemble(x, *model, steps, rng);
  Matrix series(lc.series_length, model->state_dim());
  for (int t = 0; t < lc.series_length; ++t) {
    x = propagate_ensemble(x, *model, steps, rng);
    series.row(t) = x.transpose();
  }
  auto table = std::make_shared<AutocorrelationTable>(autocorrelation_table(series, lc.max_tau));
  if (!lc.table_path.empty()) {
    const auto parent = std::filesystem::path(lc.table_path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    save_autocorrelation_csv(*table, lc.table_path);
  }
  return table;
}

inline TwinSetup make_twin_setup(const ExperimentConfig& c,
                                 std::shared_ptr<const AutocorrelationTable> table = nullptr) {
  TwinSetup s;
  auto model = make_model(c.model);
  s.cycle.model = model;
  if (model->memory() == 0) {
    s.cycle.steps_per_block = round_ratio(c.observation.interval, c.model.dt, "observation.interval");
    s.obs_every = 1;
  } else {
    s.cycle.steps_per_block = 1;
    s.obs_every = round_ratio(c.observation.interval, c.model.dt, "observation.interval");
  }
  const auto n_x = model->state_dim();
  try {
    s.cycle.observation = c.observation.sites.empty()
                              ? ObservationModel::every_nth(n_x, c.observation.stride, c.observation.variance, c.observation.offset)
                              : ObservationModel::select(n_x, c.observation.sites, c.observation.variance);
  } catch (const Error& e) {
    throw ConfigError("observation", e.what());
  }
  s.cycle.smoother = c.smoother;
  if (c.localisation.enabled) {
    LocalisationConfig loc;
    loc.radius = c.localisation.radius;
    loc.scheme = c.localisation.scheme;
    loc.layout = SpatialLayout::ring(static_cast<int>(n_x));
    s.cycle.localisation = loc;
    if (loc.scheme == DistanceScheme::kAutocorrelation) {
      if (!table) table = build_autocorrelation(c);
      if (table->max_tau() < c.smoother.lag)
        throw ConfigError("localisation.max_tau", "autocorrelation table shorter than the lag");
      s.cycle.autocorrelation = std::move(table);
    }
  }
  if (c.model.x0.empty()) s.x0 = StateVector::Ones(n_x);
  else s.x0 = Eigen::Map<const Vector>(c.model.x0.data(), static_cast<Eigen::Index>(c.model.x0.size()));
  if (s.x0.size() != n_x) throw ConfigError("model.x0", "length differs from the state dimension");
  s.spinup_blocks = c.model.spinup_blocks;
  s.num_obs = c.observation.count;
  s.members = c.run.members;
  s.init_variance = c.run.init_variance;
  s.burn_in = c.run.burn_in;
  s.evaluate_every_block = c.run.every_step;
  s.with_mode = c.run.mode;
  return s;
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

/// Runs f(0..n-1) on up to `threads` workers; results are indexed, so the
/// outcome does not depend on scheduling.
template <class F>
void parallel_for(int n, int threads, F&& f) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          f(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

struct ReplicateResult {
  int replicate = 0;
  RunMetrics metrics;
  RunResult run;
  std::string failure;  // set when the run diverged
};

struct ExperimentResult {
  ExperimentConfig config;
  std::vector<ReplicateResult> replicates;
  MetricSummary summary;
};

/// Truth and observations come from the stream (seed, 0) and are shared by
/// all replicates; replicate r uses the stream (seed, 1, r).
inline ExperimentResult run_experiment(const ExperimentConfig& c,
                                       std::shared_ptr<const AutocorrelationTable> table = nullptr) {
  const TwinSetup setup = make_twin_setup(c, std::move(table));
  const RngStream master(c.run.seed);
  RngStream truth_rng = master.split(0);
  const TruthRun truth = generate_truth(setup, truth_rng);
  ExperimentResult out;
  out.config = c;
  out.replicates.resize(static_cast<std::size_t>(c.run.replicates));
  parallel_for(c.run.replicates, c.run.threads, [&](int r) {
    RngStream rng = master.split(1).split(static_cast<std::uint64_t>(r));
    ReplicateResult& slot = out.replicates[static_cast<std::size_t>(r)];
    slot.replicate = r;
    try {
      slot.run = run_assimilation(setup, truth, rng);
      slot.run.record.seed = c.run.seed;
      slot.metrics = run_metrics(slot.run.record);
    } catch (const FilterDivergence& e) {
      slot.failure = e.what();
      slot.metrics = RunMetrics::divergent();
    }
  });
  std::vector<RunMetrics> metrics;
  for (const auto& r : out.replicates) metrics.push_back(r.metrics);
  out.summary = summarize_runs(metrics);
  return out;
}

// ---------------------------------------------------------------------------
// CSV output
// ---------------------------------------------------------------------------

inline std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

inline double lambda_of(const SmootherConfig& s) {
  if (s.kind == SmootherKind::kEtps && s.etps.solver == TransportSolver::kSinkhorn) return s.etps.lambda;
  if (s.kind == SmootherKind::kHybrid)
    for (const auto& st : s.stages)
      if (st.kind == SmootherKind::kEtps && st.etps.solver == TransportSolver::kSinkhorn) return st.etps.lambda;
  return 0.0;
}

inline const char* kMetricsHeader = "scheme,M,L,alpha,lambda,r_loc,seed,replicate,rmse_mu,rmse_mode,crps";

inline std::string metrics_prefix(const ExperimentConfig& c) {
  std::ostringstream s;
  s << c.smoother.label() << ',' << c.run.members << ',' << c.smoother.lag << ','
    << fmt(c.smoother.kind == SmootherKind::kHybrid ? c.smoother.alpha : 1.0) << ',' << fmt(lambda_of(c.smoother)) << ','
    << (c.localisation.enabled ? fmt(c.localisation.radius) : std::string("inf"));
  return s.str();
}

inline void write_metrics_rows(std::ostream& f, const ExperimentResult& r) {
  const std::string prefix = metrics_prefix(r.config);
  for (const auto& rep : r.replicates) {
    f << prefix << ',' << r.config.run.seed << ',' << rep.replicate << ',' << fmt(rep.metrics.rmse_mu) << ','
      << (rep.metrics.rmse_mode ? fmt(*rep.metrics.rmse_mode) : std::string("nan")) << ',' << fmt(rep.metrics.crps) << '\n';
  }
}

inline const char* kSummaryHeader =
    "scheme,M,L,alpha,lambda,r_loc,runs,diverged,rmse_mu,rmse_mu_lo,rmse_mu_hi,rmse_mode,rmse_mode_lo,rmse_mode_hi,crps,crps_lo,crps_hi";

inline void write_summary_row(std::ostream& f, const std::string& prefix, const MetricSummary& s) {
  auto est = [](const MetricEstimate& e) {
    return fmt(e.mean) + ',' + (e.ci95.empty ? std::string("nan,nan") : fmt(e.ci95.lo) + ',' + fmt(e.ci95.hi));
  };
  f << prefix << ',' << s.runs << ',' << s.diverged << ',' << est(s.rmse_mu) << ','
    << (s.rmse_mode ? est(*s.rmse_mode) : std::string("nan,nan,nan")) << ',' << est(s.crps) << '\n';
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(p);
  if (!f) throw Error("cannot write " + p.string());
  return f;
}

inline void write_truth(const std::filesystem::path& dir, const TruthRun& truth) {
  auto f = open_out(dir / "truth.csv");
  f << "k";
  for (Eigen::Index s = 0; s < truth.states.front().size(); ++s) f << ",x" << s;
  f << '\n';
  auto g = open_out(dir / "observations.csv");
  g << "k";
  bool header = false;
  for (std::size_t k = 0; k < truth.states.size(); ++k) {
    f << k;
    for (Eigen::Index s = 0; s < truth.states[k].size(); ++s) f << ',' << fmt(truth.states[k](s));
    f << '\n';
    if (!truth.obs[k]) continue;
    const Vector& y = truth.obs[k]->y;
    if (!header) {
      for (Eigen::Index u = 0; u < y.size(); ++u) g << ",y" << u;
      g << '\n';
      header = true;
    }
    g << k;
    for (Eigen::Index u = 0; u < y.size(); ++u) g << ',' << fmt(y(u));
    g << '\n';
  }
}

inline void write_diagnostics(const std::filesystem::path& p, const RunResult& run) {
  auto f = open_out(p);
  f << "k,scheme,ess,objective,correction_residual,column_residual,degenerate,converged\n";
  for (const auto& d : run.diagnostics)
    f << d.k << ',' << d.analysis.scheme << ',' << fmt(d.analysis.ess) << ',' << fmt(d.analysis.objective) << ','
      << fmt(d.analysis.correction_residual) << ',' << fmt(d.analysis.column_residual) << ','
      << d.analysis.degenerate_weights << ',' << d.analysis.converged << '\n';
}

/// Writes metrics.csv, summary.csv, config.json and per-replicate
/// diagnostics below the output directory.
inline void write_experiment(const ExperimentResult& r, const std::filesystem::path& dir) {
  {
    auto f = open_out(dir / "metrics.csv");
    f << kMetricsHeader << '\n';
    write_metrics_rows(f, r);
  }
  {
    auto f = open_out(dir / "summary.csv");
    f << kSummaryHeader << '\n';
    write_summary_row(f, metrics_prefix(r.config), r.summary);
  }
  {
    auto f = open_out(dir / "config.json");
    f << config_to_json(r.config).dump(2) << '\n';
  }
  if (r.config.output.diagnostics)
    for (const auto& rep : r.replicates)
      write_diagnostics(dir / ("diagnostics_rep" + std::to_string(rep.replicate) + ".csv"), rep.run);
}

/// Runs one replicate while writing every analysed window to CSV.
inline void dump_ensembles(const ExperimentConfig& c, const std::filesystem::path& path) {
  const TwinSetup setup = make_twin_setup(c);
  const RngStream master(c.run.seed);
  RngStream truth_rng = master.split(0);
  const TruthRun truth = generate_truth(setup, truth_rng);
  RngStream rng = master.split(1).split(0);
  auto f = open_out(path);
  f << "k,member";
  for (Eigen::Index s = 0; s < setup.cycle.model->state_dim(); ++s) f << ",x" << s;
  f << '\n';
  run_assimilation(setup, truth, rng, [&](const SmootherState& st, const CycleDiagnostics& d) {
    if (!d.analysed) return;
    const EnsembleMatrix& x = st.history.newest();
    for (Eigen::Index i = 0; i < x.cols(); ++i) {
      f << d.k << ',' << i;
      for (Eigen::Index s = 0; s < x.rows(); ++s) f << ',' << fmt(x(s, i));
      f << '\n';
    }
  });
}

// ---------------------------------------------------------------------------
// Sweeps and recomputation
// ---------------------------------------------------------------------------

inline ExperimentConfig with_axis_value(ExperimentConfig c, const std::string& axis, double v) {
  if (axis == "M") c.run.members = static_cast<int>(std::lround(v));
  else if (axis == "L") {
    c.smoother.lag = static_cast<int>(std::lround(v));
    for (auto& s : c.smoother.stages) s.lag = c.smoother.lag;
    if (c.localisation.enabled) c.localisation.max_tau = std::max(c.localisation.max_tau, c.smoother.lag);
  } else if (axis == "alpha") {
    if (c.smoother.kind != SmootherKind::kHybrid) throw ConfigError("sweep.axis", "alpha sweeps need a hybrid smoother");
    c.smoother.alpha = v;
  } else if (axis == "lambda") {
    c.smoother.etps.lambda = v;
    for (auto& s : c.smoother.stages) s.etps.lambda = v;
  } else if (axis == "r_loc") {
    c.localisation.enabled = true;
    c.localisation.radius = v;
  } else {
    throw ConfigError("sweep.axis", "unknown axis '" + axis + "' (use M, L, alpha, lambda or r_loc)");
  }
  c.smoother.validate();
  return c;
}

/// One experiment per axis value; returns the long-format rows written to
/// sweep_metrics.csv and sweep_summary.csv.
inline std::vector<ExperimentResult> sweep(const ExperimentConfig& base, const std::string& axis,
                                           const std::vector<double>& values, const std::filesystem::path& dir) {
  with_axis_value(base, axis, values.empty() ? 0.0 : values.front());
  std::shared_ptr<const AutocorrelationTable> table;
  if (base.localisation.enabled && base.localisation.scheme == DistanceScheme::kAutocorrelation) {
    ExperimentConfig widest = base;
    for (double v : values)
      if (axis == "L") widest.localisation.max_tau = std::max(widest.localisation.max_tau, static_cast<int>(std::lround(v)));
    table = build_autocorrelation(widest);
  }
  std::vector<ExperimentResult> results;
  auto m = open_out(dir / "sweep_metrics.csv");
  auto s = open_out(dir / "sweep_summary.csv");
  m << "axis,value," << kMetricsHeader << '\n';
  s << "axis,value," << kSummaryHeader << '\n';
  for (double v : values) {
    results.push_back(run_experiment(with_axis_value(base, axis, v), table));
    std::ostringstream rows;
    write_metrics_rows(rows, results.back());
    std::istringstream lines(rows.str());
    for (std::string line; std::getline(lines, line);) m << axis << ',' << fmt(v) << ',' << line << '\n';
    s << axis << ',' << fmt(v) << ',';
    write_summary_row(s, metrics_prefix(results.back().config), results.back().summary);
  }
  return results;
}

/// Recomputes summary rows from a stored metrics.csv, grouping replicates
/// by their configuration columns.
inline void recompute_summary(const std::filesystem::path& metrics_csv, const std::filesystem::path& out_csv) {
  std::ifstream f(metrics_csv);
  if (!f) throw Error("cannot read " + metrics_csv.string());
  std::string line;
  std::getline(f, line);
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) header.push_back(cell);
  }
  auto col = [&](const std::string& name) {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw Error(metrics_csv.string() + " lacks column " + name);
  };
  const std::size_t c_scheme = col("scheme"), c_mu = col("rmse_mu"), c_mode = col("rmse_mode"), c_crps = col("crps");
  const std::size_t c_r_loc = col("r_loc");
  std::vector<std::string> keys;
  std::vector<std::vector<RunMetrics>> groups;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != header.size()) throw Error(metrics_csv.string() + ": malformed row");
    std::string key;
    for (std::size_t i = c_scheme; i <= c_r_loc; ++i) key += (i == c_scheme ? "" : ",") + cells[i];
    if (c_scheme > 0) key = [&] {
      std::string prefix;
      for (std::size_t i = 0; i < c_scheme; ++i) prefix += cells[i] + ",";
      return prefix + key;
    }();
    RunMetrics rm;
    rm.rmse_mu = std::stod(cells[c_mu]);
    if (cells[c_mode] != "nan") rm.rmse_mode = std::stod(cells[c_mode]);
    rm.crps = std::stod(cells[c_crps]);
    auto it = std::find(keys.begin(), keys.end(), key);
    if (it == keys.end()) {
      keys.push_back(key);
      groups.emplace_back();
      it = keys.end() - 1;
    }
    groups[static_cast<std::size_t>(it - keys.begin())].push_back(rm);
  }
  auto out = open_out(out_csv);
  std::string prefix_header;
  for (std::size_t i = 0; i < c_scheme; ++i) prefix_header += header[i] + ",";
  out << prefix_header << kSummaryHeader << '\n';
  for (std::size_t g = 0; g < keys.size(); ++g) write_summary_row(out, keys[g], summarize_runs(groups[g]));
}

}  // namespace lets
