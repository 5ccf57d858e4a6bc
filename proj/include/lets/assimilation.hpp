#pragma once

// Sequential fixed-lag assimilation: forecast, window shift, analysis and
// rejuvenation, plus a twin-experiment driver that scores a run against a
// simulated truth.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "lets/core.hpp"
#include "lets/error.hpp"
#include "lets/localisation.hpp"
#include "lets/metrics.hpp"
#include "lets/models.hpp"
#include "lets/observation.hpp"
#include "lets/random.hpp"
#include "lets/smoothers.hpp"

namespace lets {

/// Everything an assimilation step needs besides the ensemble.
struct CycleSetup {
  std::shared_ptr<const Model> model;
  int steps_per_block = 1;
  ObservationModel observation;
  SmootherConfig smoother;
  std::optional<LocalisationConfig> localisation;
  std::shared_ptr<const AutocorrelationTable> autocorrelation;

  /// Number of stored blocks beyond the current one.
  int history_lag() const { return std::max(smoother.lag, model->memory()); }
};

struct SmootherState {
  TrajectoryEnsemble history;
};

struct CycleDiagnostics {
  int k = 0;
  bool analysed = false;
  AnalysisDiagnostics analysis;
};

/// Forecast of the next block from the current history.
inline EnsembleMatrix forecast_block(const TrajectoryEnsemble& history, const CycleSetup& setup, RngStream& rng) {
  if (setup.model->memory() == 0) return propagate_ensemble(history.newest(), *setup.model, setup.steps_per_block, rng);
  return advance_history(history, *setup.model, setup.steps_per_block, rng);
}

/// Analysis of the newest `lag + 1` blocks followed by rejuvenation of the
/// current block with the forecast spread.
inline AnalysisDiagnostics analyse(SmootherState& state, const Observation& y, const CycleSetup& setup, RngStream& rng) {
  const TrajectoryEnsemble window = state.history.tail(setup.smoother.lag);
  const EnsembleStats prior = mean_and_deviations(window.newest());
  AnalysisDiagnostics diag;
  TrajectoryEnsemble post =
      setup.localisation
          ? localized_smoother_update(window, y, setup.observation, setup.smoother, *setup.localisation,
                                      setup.autocorrelation.get(), rng, &diag)
          : smoother_analysis(window, y, setup.observation, setup.smoother, rng, &diag);
  if (setup.smoother.rejuvenation > 0.0)
    post.set_block(post.num_blocks() - 1, rejuvenate(post.newest(), prior, setup.smoother.rejuvenation, rng));
  state.history.assign_tail(post);
  return diag;
}

/// Predict, shift the window and, when an observation of the new block is
/// given, run the analysis.
inline CycleDiagnostics assimilation_cycle(SmootherState& state, const std::optional<Observation>& y,
                                           const CycleSetup& setup, RngStream& rng) {
  if (state.history.empty()) throw InvalidArgument("assimilation state is empty");
  if (state.history.num_blocks() < setup.model->memory() + 1) throw InvalidArgument("assimilation state is not warmed up");
  CycleDiagnostics out;
  EnsembleMatrix forecast = forecast_block(state.history, setup, rng);
  if (!forecast.allFinite())
    throw FilterDivergence("forecast of block " + std::to_string(state.history.time_index() + 1) + " is not finite");
  state.history.push(std::move(forecast), setup.history_lag());
  out.k = state.history.time_index();
  if (y) {
    out.analysed = true;
    out.analysis = analyse(state, *y, setup, rng);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Twin experiments
// ---------------------------------------------------------------------------

struct TruthRun {
  std::vector<StateVector> states;                 // one per block, index 0 = start
  std::vector<std::optional<Observation>> obs;     // aligned with states
  std::vector<StateVector> start_history;          // blocks before index 0 (delay models)
};

struct TwinSetup {
  CycleSetup cycle;
  StateVector x0;            // truth before spin-up
  int spinup_blocks = 0;     // free truth run discarded before the start
  int obs_every = 1;         // blocks between observations
  int num_obs = 100;         // K
  int members = 20;
  double init_variance = 0.5;
  int burn_in = 0;           // records dropped from the metrics
  bool evaluate_every_block = false;
  bool with_mode = false;
};

/// Truth trajectory and synthetic observations for K observation times.
inline TruthRun generate_truth(const TwinSetup& setup, RngStream& rng) {
  const Model& model = *setup.cycle.model;
  const int memory = model.memory();
  const auto n_x = model.state_dim();
  if (setup.x0.size() != n_x) throw ConfigError("model.x0", "initial state has the wrong dimension");
  RngStream noise = rng.split(1), obs_rng = rng.split(2);
  // Constant history for delay models.
  TrajectoryEnsemble h(std::vector<EnsembleMatrix>(static_cast<std::size_t>(memory + 1), EnsembleMatrix(setup.x0)), 0);
  auto step = [&] { h.push(forecast_block(h, setup.cycle, noise), memory); };
  for (int b = 0; b < setup.spinup_blocks; ++b) step();
  TruthRun out;
  for (Eigen::Index l = 0; l < h.num_blocks() - 1; ++l) out.start_history.push_back(h.block(l).col(0));
  out.states.push_back(h.newest().col(0));
  out.obs.emplace_back();
  const int blocks = setup.num_obs * setup.obs_every;
  for (int b = 1; b <= blocks; ++b) {
    step();
    out.states.push_back(h.newest().col(0));
    if (b % setup.obs_every == 0) out.obs.push_back(synth_observe(out.states.back(), setup.cycle.observation, obs_rng, b));
    else out.obs.emplace_back();
  }
  return out;
}

/// Initial ensemble around the start of the truth: Gaussian perturbations
/// of the current state, or for delay models perturbed constant histories
/// run forward over the delay alongside the truth history.
inline TrajectoryEnsemble initial_ensemble(const TwinSetup& setup, const TruthRun& truth, RngStream& rng) {
  const Model& model = *setup.cycle.model;
  const int memory = model.memory();
  const double sd = std::sqrt(setup.init_variance);
  if (memory == 0) {
    EnsembleMatrix x = truth.states.front().replicate(1, setup.members);
    x += sd * rng.normal_matrix(x.rows(), x.cols());
    return TrajectoryEnsemble({x}, 0);
  }
  const StateVector origin = truth.start_history.empty() ? truth.states.front() : truth.start_history.front();
  EnsembleMatrix x = origin.replicate(1, setup.members);
  x += sd * rng.normal_matrix(x.rows(), x.cols());
  TrajectoryEnsemble h(std::vector<EnsembleMatrix>(static_cast<std::size_t>(memory + 1), x), 0);
  for (int b = 0; b < memory; ++b) h.push(forecast_block(h, setup.cycle, rng), memory);
  return h;
}

struct RunResult {
  RunRecord record;
  std::vector<CycleDiagnostics> diagnostics;
};

/// One assimilation run. The estimate of block t is taken after the
/// analysis at t + L, i.e. when it leaves the smoothing window.
inline RunResult run_assimilation(const TwinSetup& setup, const TruthRun& truth, RngStream& rng,
                                  const std::function<void(const SmootherState&, const CycleDiagnostics&)>& observer = {}) {
  setup.cycle.smoother.validate();
  if (setup.cycle.localisation) setup.cycle.localisation->validate();
  RngStream init_rng = rng.split(1), run_rng = rng.split(2);
  SmootherState state{initial_ensemble(setup, truth, init_rng)};
  const int lag = setup.cycle.smoother.lag;
  RunResult out;
  out.record.lag = lag;
  int recorded = 0;
  const auto blocks = static_cast<int>(truth.states.size()) - 1;
  for (int k = 1; k <= blocks; ++k) {
    CycleDiagnostics d = assimilation_cycle(state, truth.obs[static_cast<std::size_t>(k)], setup.cycle, run_rng);
    const bool record_now = setup.evaluate_every_block || d.analysed;
    if (d.analysed) out.diagnostics.push_back(d);
    if (observer) observer(state, d);
    if (!record_now) continue;
    const int t = k - lag;
    if (t < 1) continue;
    if (recorded++ < setup.burn_in) continue;
    const EnsembleMatrix& est = state.history.block(state.history.num_blocks() - 1 - lag);
    out.record.add(t, est, truth.states[static_cast<std::size_t>(t)], setup.with_mode);
  }
  return out;
}

}  // namespace lets
