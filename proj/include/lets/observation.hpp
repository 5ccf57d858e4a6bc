#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "lets/core.hpp"
#include "lets/error.hpp"
#include "lets/random.hpp"

namespace lets {

/// Linear observation operator h(x) = H x with independent Gaussian errors.
struct ObservationModel {
  Matrix h;                   // N_y x N_x
  Vector r;                   // diagonal of R
  std::vector<int> obs_sites; // grid position of each observation

  Eigen::Index n_y() const { return h.rows(); }
  Eigen::Index n_x() const { return h.cols(); }

  /// Observes the listed state components directly, each with `variance`.
  static ObservationModel select(Eigen::Index n_x, std::vector<int> sites, double variance) {
    ObservationModel m;
    m.h = Matrix::Zero(static_cast<Eigen::Index>(sites.size()), n_x);
    for (std::size_t u = 0; u < sites.size(); ++u) {
      if (sites[u] < 0 || sites[u] >= n_x) throw InvalidArgument("observation site out of range");
      m.h(static_cast<Eigen::Index>(u), sites[u]) = 1.0;
    }
    m.r = Vector::Constant(static_cast<Eigen::Index>(sites.size()), variance);
    m.obs_sites = std::move(sites);
    m.validate();
    return m;
  }

  /// Every `stride`-th grid point starting at `offset`.
  static ObservationModel every_nth(Eigen::Index n_x, int stride, double variance, int offset = 0) {
    std::vector<int> sites;
    for (int s = offset; s < n_x; s += stride) sites.push_back(s);
    return select(n_x, std::move(sites), variance);
  }

  void validate(bool allow_zero_variance = false) const {
    if (r.size() != h.rows()) throw DimensionMismatch("R diagonal length differs from N_y");
    if (!h.allFinite()) throw InvalidArgument("H must be finite");
    for (Eigen::Index u = 0; u < r.size(); ++u) {
      const bool ok = allow_zero_variance ? r(u) >= 0.0 : r(u) > 0.0;
      if (!ok || !std::isfinite(r(u))) throw InvalidArgument("observation error variances must be positive");
    }
  }
};

struct Observation {
  Vector y;
  int time_index = 0;
};

/// y = H x + nu with nu ~ N(0, R). Zero variances give exact observations.
inline Observation synth_observe(const StateVector& x_true, const ObservationModel& model, RngStream& rng, int k = 0) {
  model.validate(/*allow_zero_variance=*/true);
  if (x_true.size() != model.n_x()) throw DimensionMismatch("truth dimension differs from H columns");
  Observation obs;
  obs.time_index = k;
  obs.y = model.h * x_true;
  for (Eigen::Index u = 0; u < obs.y.size(); ++u) obs.y(u) += std::sqrt(model.r(u)) * rng.normal();
  return obs;
}

struct WeightResult {
  WeightVector weights;
  bool degenerate = false;      // likelihoods unusable, weights fell back to uniform
  bool extreme_range = false;   // log-weight spread above the linear-domain limit
  double log_weight_range = 0.0;
};

/// Precision-scaled log-likelihoods -(1/2) (Hx - y)^T diag(p) (Hx - y),
/// one per member. `precision` replaces R^{-1}.
inline Vector log_likelihoods(const EnsembleMatrix& x_fc, const Observation& y, const ObservationModel& model,
                              const Vector& precision) {
  if (x_fc.rows() != model.n_x()) throw DimensionMismatch("ensemble rows differ from H columns");
  if (y.y.size() != model.n_y()) throw DimensionMismatch("observation length differs from N_y");
  const Matrix innov = (model.h * x_fc).colwise() - y.y;
  return -0.5 * (innov.array().square().colwise() * precision.array()).colwise().sum().transpose();
}

namespace detail {

constexpr double kLinearDomainLimit = 700.0;

inline WeightResult weights_from_log(const Vector& log_w) {
  WeightResult out;
  const Eigen::Index m = log_w.size();
  if (!log_w.allFinite()) {
    out.weights = WeightVector::uniform(m);
    out.degenerate = true;
    out.log_weight_range = std::numeric_limits<double>::infinity();
    return out;
  }
  const double hi = log_w.maxCoeff();
  out.log_weight_range = hi - log_w.minCoeff();
  out.extreme_range = out.log_weight_range > kLinearDomainLimit;
  const Vector shifted = (log_w.array() - hi).exp().matrix();
  out.weights = WeightVector::normalized(shifted);
  return out;
}

}  // namespace detail

/// Normalized importance weights for the tempered likelihood p(y|x)^alpha,
/// i.e. R replaced by R / alpha. Computed with log-sum-exp.
inline WeightResult importance_weights(const EnsembleMatrix& x_fc, const Observation& y, const ObservationModel& model,
                                       double alpha = 1.0) {
  if (!(alpha > 0.0) || alpha > 1.0) throw InvalidArgument("tempering factor must lie in (0, 1]");
  model.validate();
  const Vector precision = alpha * model.r.cwiseInverse();
  return detail::weights_from_log(log_likelihoods(x_fc, y, model, precision));
}

/// Weights with R^{-1} replaced by C R^{-1}; `taper` holds the diagonal of C.
inline WeightResult localized_weights(const EnsembleMatrix& x_fc, const Observation& y, const ObservationModel& model,
                                      const Vector& taper, double alpha = 1.0) {
  if (taper.size() != model.n_y()) throw DimensionMismatch("taper length differs from N_y");
  if (taper.size() > 0 && (taper.minCoeff() < 0.0 || taper.maxCoeff() > 1.0))
    throw InvalidArgument("taper entries must lie in [0, 1]");
  if (!(alpha > 0.0) || alpha > 1.0) throw InvalidArgument("tempering factor must lie in (0, 1]");
  model.validate();
  const Vector precision = alpha * taper.cwiseProduct(model.r.cwiseInverse());
  return detail::weights_from_log(log_likelihoods(x_fc, y, model, precision));
}

/// 1 / sum w_i^2.
inline double effective_sample_size(const WeightVector& w) { return 1.0 / w.values().squaredNorm(); }

}  // namespace lets
