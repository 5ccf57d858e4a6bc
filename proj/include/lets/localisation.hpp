#pragma once

// Observation-space localisation for the smoothers: each component of the
// window is updated with its own tapered observation precision C R^{-1}.

#include <Eigen/Dense>

#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "lets/core.hpp"
#include "lets/error.hpp"
#include "lets/observation.hpp"
#include "lets/smoothers.hpp"

namespace lets {

/// Gaspari-Cohn fifth-order piecewise rational taper with support [0, 2).
inline double gaspari_cohn(double r) {
  if (r < 0.0 || std::isnan(r)) throw InvalidArgument("taper argument must be nonnegative");
  if (r >= 2.0) return 0.0;
  const double r2 = r * r, r3 = r2 * r, r4 = r3 * r, r5 = r4 * r;
  if (r <= 1.0) return -0.25 * r5 + 0.5 * r4 + 0.625 * r3 - 5.0 / 3.0 * r2 + 1.0;
  return r5 / 12.0 - 0.5 * r4 + 0.625 * r3 + 5.0 / 3.0 * r2 - 5.0 * r + 4.0 - 2.0 / (3.0 * r);
}

/// Grid positions of the state components on a line of `extent` sites,
/// optionally periodic.
struct SpatialLayout {
  int extent = 0;
  bool periodic = true;

  static SpatialLayout ring(int n_x) { return {n_x, true}; }

  void check(int site) const {
    if (site < 0 || site >= extent) throw InvalidArgument("site index " + std::to_string(site) + " out of range");
  }
};

inline double periodic_distance(int s, int u, const SpatialLayout& layout) {
  layout.check(s);
  layout.check(u);
  const int d = std::abs(s - u);
  return layout.periodic ? static_cast<double>(std::min({d, std::abs(s - u - layout.extent), std::abs(s - u + layout.extent)}))
                         : static_cast<double>(d);
}

/// Lagged correlations of a long model run. gamma[tau](s, i) is the
/// correlation between component s at time t - tau and component i at
/// time t.
struct AutocorrelationTable {
  std::vector<Matrix> gamma;
  int series_length = 0;

  int max_tau() const { return static_cast<int>(gamma.size()) - 1; }

  /// argmax_i |gamma[tau](s, i)|, ties to the smallest index.
  int most_correlated(int s, int tau) const {
    if (tau < 0 || tau > max_tau()) throw InvalidArgument("autocorrelation lag " + std::to_string(tau) + " not tabulated");
    const Matrix& g = gamma[static_cast<std::size_t>(tau)];
    if (s < 0 || s >= g.rows()) throw InvalidArgument("site index out of range");
    int best = 0;
    double best_v = -1.0;
    for (Eigen::Index i = 0; i < g.cols(); ++i) {
      const double v = std::abs(g(s, i));
      if (v > best_v) {
        best_v = v;
        best = static_cast<int>(i);
      }
    }
    return best;
  }
};

/// `series` is T x N_x, one time per row.
inline AutocorrelationTable autocorrelation_table(const Matrix& series, int max_tau) {
  const Eigen::Index t = series.rows();
  if (max_tau < 0) throw InvalidArgument("max_tau must be nonnegative");
  if (t <= max_tau + 2) throw InvalidArgument("series too short for the requested lags");
  const Vector mu = series.colwise().mean().transpose();
  const Matrix centred = series.rowwise() - mu.transpose();
  const double norm = 1.0 / static_cast<double>(t - 1);
  Vector sd(series.cols());
  for (Eigen::Index i = 0; i < series.cols(); ++i) {
    const double var = centred.col(i).squaredNorm() * norm;
    if (!(var > 0.0)) throw InvalidArgument("component " + std::to_string(i) + " has zero variance");
    sd(i) = std::sqrt(var);
  }
  AutocorrelationTable out;
  out.series_length = static_cast<int>(t);
  for (int tau = 0; tau <= max_tau; ++tau) {
    const Eigen::Index n = t - tau;
    Matrix cov = centred.topRows(n).transpose() * centred.bottomRows(n) * norm;
    out.gamma.push_back(sd.cwiseInverse().asDiagonal() * cov * sd.cwiseInverse().asDiagonal());
  }
  return out;
}

inline void save_autocorrelation_csv(const AutocorrelationTable& table, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path);
  f.precision(17);
  f << "tau,s,i,gamma\n";
  for (int tau = 0; tau <= table.max_tau(); ++tau) {
    const Matrix& g = table.gamma[static_cast<std::size_t>(tau)];
    for (Eigen::Index s = 0; s < g.rows(); ++s)
      for (Eigen::Index i = 0; i < g.cols(); ++i) f << tau << ',' << s << ',' << i << ',' << g(s, i) << '\n';
  }
  f << "# series_length=" << table.series_length << '\n';
}

inline AutocorrelationTable load_autocorrelation_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot read " + path);
  std::string line;
  std::getline(f, line);
  std::map<int, std::vector<std::tuple<int, int, double>>> rows;
  int n = 0;
  AutocorrelationTable out;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq != std::string::npos) out.series_length = std::stoi(line.substr(eq + 1));
      continue;
    }
    std::stringstream ss(line);
    std::string a, b, c, d;
    std::getline(ss, a, ',');
    std::getline(ss, b, ',');
    std::getline(ss, c, ',');
    std::getline(ss, d, ',');
    const int s = std::stoi(b), i = std::stoi(c);
    rows[std::stoi(a)].emplace_back(s, i, std::stod(d));
    n = std::max({n, s + 1, i + 1});
  }
  for (auto& [tau, entries] : rows) {
    if (tau != static_cast<int>(out.gamma.size())) throw Error(path + ": autocorrelation lags are not contiguous");
    Matrix g = Matrix::Zero(n, n);
    for (auto& [s, i, v] : entries) g(s, i) = v;
    out.gamma.push_back(std::move(g));
  }
  return out;
}

enum class DistanceScheme { kStationary, kAutocorrelation };

inline const char* to_string(DistanceScheme d) {
  return d == DistanceScheme::kStationary ? "stationary" : "autocorrelation";
}

struct LocalisationConfig {
  double radius = std::numeric_limits<double>::infinity();
  DistanceScheme scheme = DistanceScheme::kStationary;
  SpatialLayout layout{};

  void validate() const {
    if (!(radius > 0.0)) throw ConfigError("localisation.radius", "localisation radius must be positive");
    if (layout.extent <= 0) throw ConfigError("localisation.layout", "layout extent must be positive");
  }
};

/// Site whose position stands in for state site s when it is `tau` steps
/// behind the observation time.
inline int effective_site(int s, int tau, const LocalisationConfig& loc, const AutocorrelationTable* table) {
  if (loc.scheme == DistanceScheme::kStationary || tau == 0) return s;
  if (!table) throw InvalidArgument("the autocorrelation distance needs an autocorrelation table");
  return table->most_correlated(s, tau);
}

inline double localized_distance(int s, int u, int tau, const LocalisationConfig& loc, const AutocorrelationTable* table) {
  return periodic_distance(effective_site(s, tau, loc, table), u, loc.layout);
}

/// Diagonal of C for state site s observed `tau` steps later.
inline Vector taper_matrix(int s, int tau, const ObservationModel& model, const LocalisationConfig& loc,
                           const AutocorrelationTable* table) {
  if (static_cast<Eigen::Index>(model.obs_sites.size()) != model.n_y())
    throw InvalidArgument("observation model lacks observation sites");
  Vector c(model.n_y());
  const int e = effective_site(s, tau, loc, table);
  for (Eigen::Index u = 0; u < model.n_y(); ++u) {
    if (std::isinf(loc.radius)) {
      c(u) = 1.0;
      continue;
    }
    c(u) = gaspari_cohn(periodic_distance(e, model.obs_sites[static_cast<std::size_t>(u)], loc.layout) / loc.radius);
  }
  return c;
}

/// Componentwise update of the window: component s of block l is
/// transformed with weights (or ESRS factors) computed from the taper for
/// site s at lag tau = L - l. Transforms depending only on the taper are
/// shared between components with the same effective site.
inline TrajectoryEnsemble localized_smoother_update(const TrajectoryEnsemble& x, const Observation& y,
                                                    const ObservationModel& model, const SmootherConfig& config,
                                                    const LocalisationConfig& loc, const AutocorrelationTable* table,
                                                    RngStream& rng, AnalysisDiagnostics* diag = nullptr,
                                                    double alpha = 1.0) {
  loc.validate();
  model.validate();
  if (config.kind == SmootherKind::kHybrid) {
    AnalysisDiagnostics local, part;
    local.scheme = "loc-" + config.label();
    TrajectoryEnsemble out = x;
    if (config.alpha > 0.0) {
      out = localized_smoother_update(out, y, model, config.stages.at(0), loc, table, rng, &part, alpha * config.alpha);
      detail::merge(local, part);
    }
    if (config.alpha < 1.0) {
      out = localized_smoother_update(out, y, model, config.stages.at(1), loc, table, rng, &part,
                                      alpha * (1.0 - config.alpha));
      detail::merge(local, part);
    }
    if (diag) *diag = local;
    return out;
  }
  if (x.n_x() != loc.layout.extent) throw DimensionMismatch("layout extent differs from N_x");
  if (!(alpha > 0.0) || alpha > 1.0) throw InvalidArgument("tempering factor must lie in (0, 1]");
  const Eigen::Index m = x.m();
  const auto n_x = static_cast<int>(x.n_x());
  const int lag = x.lag();
  const EnsembleMatrix& x_fc = x.newest();
  const EnsembleStats st = mean_and_deviations(x_fc);
  const Matrix h_a = model.h * st.deviations;
  const Vector innov = y.y - model.h * st.mean;
  const Vector base_precision = alpha * model.r.cwiseInverse();

  AnalysisDiagnostics local;
  local.scheme = "loc-" + config.label();
  std::vector<EnsembleMatrix> blocks;
  for (Eigen::Index l = 0; l <= lag; ++l) blocks.emplace_back(x.block(l));

  // Per effective site: weights and, for ESRS/NETS, the transform.
  std::vector<std::optional<WeightResult>> weights(static_cast<std::size_t>(n_x));
  std::vector<std::optional<TransformMatrix>> transforms(static_cast<std::size_t>(n_x));
  double ess_sum = 0.0;
  int ess_count = 0;
  auto weights_for = [&](int e) -> const WeightResult& {
    auto& slot = weights[static_cast<std::size_t>(e)];
    if (!slot) {
      const Vector taper = taper_matrix(e, 0, model, loc, nullptr);
      slot = localized_weights(x_fc, y, model, taper, alpha);
      local.degenerate_weights = local.degenerate_weights || slot->degenerate;
      ess_sum += effective_sample_size(slot->weights);
      ++ess_count;
    }
    return *slot;
  };

  for (Eigen::Index l = 0; l <= lag; ++l) {
    const int tau = lag - static_cast<int>(l);
    for (int s = 0; s < n_x; ++s) {
      const int e = effective_site(s, tau, loc, table);
      const Eigen::RowVectorXd prior_row = x.block(l).row(s);
      switch (config.kind) {
        case SmootherKind::kEsrs: {
          auto& slot = transforms[static_cast<std::size_t>(e)];
          if (!slot) {
            const Vector taper = taper_matrix(e, 0, model, loc, nullptr);
            slot = esrs_factors(h_a, innov, base_precision.cwiseProduct(taper)).transform();
            local.column_residual = std::max(local.column_residual, slot->column_sum_residual());
          }
          blocks[static_cast<std::size_t>(l)].row(s) = prior_row * slot->d;
          break;
        }
        case SmootherKind::kNets: {
          const WeightVector& w = weights_for(e).weights;
          const CorrectionMatrix delta = nets_delta(w);
          Matrix omega;
          if (config.rotation == RotationMode::kOptimal) {
            const Matrix a = (prior_row.array() - prior_row.mean()).matrix();
            omega = optimal_rotation(delta, a).omega;
          } else if (config.rotation == RotationMode::kRandom) {
            omega = random_rotation(m, rng).omega;
          } else {
            omega = Matrix::Identity(m, m);
          }
          Matrix d = delta.delta * omega;
          d.colwise() += w.values();
          blocks[static_cast<std::size_t>(l)].row(s) = prior_row * d;
          break;
        }
        case SmootherKind::kEtps: {
          const WeightVector& w = weights_for(e).weights;
          EtpsOptions opts = config.etps;
          opts.temporal = TemporalMode::kPathwise;
          TrajectoryEnsemble component({Matrix(prior_row)}, x.time_index());
          // Scalar samples: the exact problem is solved by sorting.
          if (opts.solver == TransportSolver::kExact) opts.solver = TransportSolver::kSorted1d;
          const EtpsResult r = etps_transform(component, w, opts);
          local.objective += r.objective;
          local.correction_residual = std::max(local.correction_residual, r.correction_residual);
          local.converged = local.converged && r.converged;
          blocks[static_cast<std::size_t>(l)].row(s) = prior_row * r.transforms.front().d;
          break;
        }
        default:
          throw InvalidArgument(std::string("localisation is not available for ") + to_string(config.kind));
      }
    }
  }
  if (ess_count > 0) local.ess = ess_sum / ess_count;
  if (diag) *diag = local;
  return TrajectoryEnsemble(std::move(blocks), x.time_index());
}

}  // namespace lets
