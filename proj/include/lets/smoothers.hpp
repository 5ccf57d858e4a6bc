#pragma once

// Transform constructions for the ensemble smoothers and the per-step
// assimilation cycle. Every analysis is a right-multiplication X D of the
// prior window by an M x M matrix whose columns sum to one.

#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "lets/core.hpp"
#include "lets/error.hpp"
#include "lets/models.hpp"
#include "lets/observation.hpp"
#include "lets/random.hpp"
#include "lets/transport.hpp"

namespace lets {

// ---------------------------------------------------------------------------
// ESRS
// ---------------------------------------------------------------------------

struct EsrsFactors {
  Matrix s;      // symmetric PSD
  Vector w_hat;

  TransformMatrix transform() const {
    Matrix d = s;
    d.colwise() += w_hat;
    return {std::move(d), Scheme::kEsrs};
  }
};

/// S = {I + (HA)^T P (HA) / (M-1)}^{-1/2},  w_hat = S^2 (HA)^T P innov / (M-1)
/// with P a diagonal precision. Observations with zero precision drop out;
/// when fewer observations than members remain, the bracket is inverted
/// through the thin SVD of the scaled innovations instead of an M x M
/// eigendecomposition.
inline EsrsFactors esrs_factors(const Matrix& h_a, const Vector& innov, const Vector& precision) {
  const Eigen::Index m = h_a.cols();
  if (m < 2) throw InvalidEnsemble("ESRS needs at least two members");
  if (innov.size() != h_a.rows() || precision.size() != h_a.rows())
    throw DimensionMismatch("innovation/precision length differs from the rows of HA");
  std::vector<Eigen::Index> active;
  for (Eigen::Index u = 0; u < precision.size(); ++u)
    if (precision(u) > 0.0) active.push_back(u);
  const auto n_active = static_cast<Eigen::Index>(active.size());
  const double scale = 1.0 / std::sqrt(static_cast<double>(m - 1));

  EsrsFactors out;
  if (n_active == 0) {
    out.s = Matrix::Identity(m, m);
    out.w_hat = Vector::Zero(m);
    return out;
  }
  // G = (HA)^T P^{1/2} / sqrt(M-1) and z = P^{1/2} innov / sqrt(M-1), so that
  // the bracket is I + G G^T and w_hat = S^2 G z.
  Matrix g(m, n_active);
  Vector z(n_active);
  for (Eigen::Index a = 0; a < n_active; ++a) {
    const double root = std::sqrt(precision(active[static_cast<std::size_t>(a)]));
    g.col(a) = h_a.row(active[static_cast<std::size_t>(a)]).transpose() * (root * scale);
    z(a) = innov(active[static_cast<std::size_t>(a)]) * root * scale;
  }
  const Vector gz = g * z;
  if (n_active < m) {
    Eigen::JacobiSVD<Matrix> svd(g, Eigen::ComputeThinU);
    const Matrix& u = svd.matrixU();
    const Vector sig2 = svd.singularValues().array().square().matrix();
    const Vector inv_root = ((1.0 + sig2.array()).rsqrt() - 1.0).matrix();
    const Vector inv = ((1.0 + sig2.array()).inverse() - 1.0).matrix();
    out.s = Matrix::Identity(m, m) + u * inv_root.asDiagonal() * u.transpose();
    out.s = 0.5 * (out.s + out.s.transpose());
    out.w_hat = gz + u * (inv.asDiagonal() * (u.transpose() * gz));
  } else {
    Matrix bracket = Matrix::Identity(m, m) + g * g.transpose();
    Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (bracket + bracket.transpose()));
    if (eig.info() != Eigen::Success) throw SolverError("ESRS eigendecomposition failed");
    const Matrix& v = eig.eigenvectors();
    const Vector lam = eig.eigenvalues();
    out.s = v * lam.array().rsqrt().matrix().asDiagonal() * v.transpose();
    out.s = 0.5 * (out.s + out.s.transpose());
    out.w_hat = v * (lam.cwiseInverse().asDiagonal() * (v.transpose() * gz));
  }
  return out;
}

/// ESRS transform for the forecast ensemble at the current observation
/// time, with R replaced by R / alpha.
inline TransformMatrix esrs_transform(const EnsembleMatrix& x_fc, const Observation& y, const ObservationModel& model,
                                      double alpha = 1.0) {
  if (!(alpha > 0.0) || alpha > 1.0) throw InvalidArgument("tempering factor must lie in (0, 1]");
  model.validate();
  if (x_fc.rows() != model.n_x()) throw DimensionMismatch("ensemble rows differ from H columns");
  if (y.y.size() != model.n_y()) throw DimensionMismatch("observation length differs from N_y");
  const EnsembleStats st = mean_and_deviations(x_fc);
  const Vector precision = alpha * model.r.cwiseInverse();
  return esrs_factors(model.h * st.deviations, y.y - model.h * st.mean, precision).transform();
}

// ---------------------------------------------------------------------------
// Rotations in the complement of the ones vector
// ---------------------------------------------------------------------------

namespace detail {

/// M x (M-1) orthonormal basis of the orthogonal complement of 1, taken
/// from the Householder reflection that maps e_1 to 1 / sqrt(M).
inline Matrix ones_complement_basis(Eigen::Index m) {
  Vector v = Vector::Constant(m, 1.0 / std::sqrt(static_cast<double>(m)));
  v(0) -= 1.0;
  const double vv = v.squaredNorm();
  Matrix h = Matrix::Identity(m, m);
  if (vv > 0.0) h -= (2.0 / vv) * v * v.transpose();
  return h.rightCols(m - 1);
}

/// Q R Q^T + 1 1^T / M for an (M-1) x (M-1) orthogonal R.
inline Matrix embed_rotation(const Matrix& q, const Matrix& r) {
  const Eigen::Index m = q.rows();
  Matrix omega = q * r * q.transpose();
  omega.array() += 1.0 / static_cast<double>(m);
  return omega;
}

}  // namespace detail

struct RotationMatrix {
  Matrix omega;
};

/// Orthogonal Omega with Omega 1 = 1 maximizing <K, Omega>, i.e. the polar
/// factor of K restricted to the complement of 1. K must annihilate 1 from
/// both sides for the restriction to be exact. A vanishing K gives Omega = I.
inline RotationMatrix polar_rotation(const Matrix& k) {
  const Eigen::Index m = k.rows();
  if (k.cols() != m) throw DimensionMismatch("rotation target must be square");
  if (m == 1) return {Matrix::Ones(1, 1)};
  const Matrix q = detail::ones_complement_basis(m);
  const Matrix kr = q.transpose() * k * q;
  if (!(kr.cwiseAbs().maxCoeff() > 1e-300)) return {Matrix::Identity(m, m)};
  Eigen::BDCSVD<Matrix> svd(kr, Eigen::ComputeFullU | Eigen::ComputeFullV);
  return {detail::embed_rotation(q, svd.matrixU() * svd.matrixV().transpose())};
}

/// Haar-distributed rotation of the complement of 1, embedded so that
/// Omega 1 = 1.
inline RotationMatrix random_rotation(Eigen::Index m, RngStream& rng) {
  if (m < 1) throw InvalidArgument("rotation size must be positive");
  if (m == 1) return {Matrix::Ones(1, 1)};
  const Matrix g = rng.normal_matrix(m - 1, m - 1);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix r_orth = qr.householderQ() * Matrix::Identity(m - 1, m - 1);
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < m - 1; ++j)
    if (r(j, j) < 0.0) r_orth.col(j) = -r_orth.col(j);
  return {detail::embed_rotation(detail::ones_complement_basis(m), r_orth)};
}

// ---------------------------------------------------------------------------
// NETS
// ---------------------------------------------------------------------------

struct CorrectionMatrix {
  Matrix delta;
};

/// sqrt(M) (W - w w^T)^{1/2}.
inline CorrectionMatrix nets_delta(const WeightVector& w) {
  const Eigen::Index m = w.size();
  Matrix t = Matrix(w.values().asDiagonal()) - w.values() * w.values().transpose();
  return {std::sqrt(static_cast<double>(m)) * psd_sqrt(t)};
}

/// Rotation minimizing the transport functional of w 1^T + Delta Omega for
/// the prior window deviations A: polar factor of Delta^T A^T A.
inline RotationMatrix optimal_rotation(const CorrectionMatrix& delta, const Matrix& deviations) {
  if (deviations.cols() != delta.delta.rows()) throw DimensionMismatch("deviations need one column per member");
  const Matrix gram = deviations.transpose() * deviations;
  return polar_rotation(delta.delta.transpose() * gram);
}

enum class RotationMode { kIdentity, kRandom, kOptimal };

inline const char* to_string(RotationMode r) {
  switch (r) {
    case RotationMode::kIdentity: return "identity";
    case RotationMode::kRandom: return "random";
    case RotationMode::kOptimal: return "optimal";
  }
  return "unknown";
}

/// D = w 1^T + Delta Omega.
inline TransformMatrix nets_transform(const TrajectoryEnsemble& x, const WeightVector& w, RotationMode mode,
                                      RngStream& rng) {
  if (w.size() != x.m()) throw DimensionMismatch("weight length differs from M");
  const Eigen::Index m = w.size();
  const CorrectionMatrix delta = nets_delta(w);
  Matrix omega;
  switch (mode) {
    case RotationMode::kIdentity: omega = Matrix::Identity(m, m); break;
    case RotationMode::kRandom: omega = random_rotation(m, rng).omega; break;
    case RotationMode::kOptimal: {
      const Matrix flat = x.flatten();
      const Matrix a = flat.colwise() - flat.rowwise().mean();
      omega = optimal_rotation(delta, a).omega;
      break;
    }
  }
  Matrix d = delta.delta * omega;
  d.colwise() += w.values();
  return {std::move(d), Scheme::kNets};
}

/// Transport functional sum_ij d_ij ||x_i - x_j||^2 of a transform.
inline double transport_functional(const Matrix& d, const CostMatrix& c) { return d.cwiseProduct(c.c).sum(); }

// ---------------------------------------------------------------------------
// Second-order correction
// ---------------------------------------------------------------------------

struct RiccatiResult {
  CorrectionMatrix correction;
  double residual = 0.0;   // Frobenius norm of the Riccati residual
  double tolerance = 0.0;  // tol (1 + ||M (W - w w^T)||)
  bool converged = true;
};

/// Frobenius norm of
///   M (W - w w^T) - B B^T - (B Delta^T + Delta B^T + Delta Delta^T),
/// with B = D - w 1^T.
inline double riccati_residual(const Matrix& d, const WeightVector& w, const Matrix& delta) {
  const Eigen::Index m = w.size();
  Matrix b = d;
  b.colwise() -= w.values();
  const Matrix t = static_cast<double>(m) * (Matrix(w.values().asDiagonal()) - w.values() * w.values().transpose());
  const Matrix lhs = t - b * b.transpose();
  const Matrix rhs = b * delta.transpose() + delta * b.transpose() + delta * delta.transpose();
  return (lhs - rhs).norm();
}

namespace detail {

/// Orthogonal Omega with Omega 1 = 1 close to the polar factor of K: U V^T
/// from K^T K = V S^2 V^T on the part of K well above round-off, completed
/// by an orthonormal basis of the remaining directions. Several times
/// cheaper than an SVD; the small singular values are only resolved to
/// about 1e-8 relative, which moves Omega but keeps it orthogonal.
inline Matrix near_polar(const Matrix& k) {
  const Eigen::Index m = k.rows();
  if (m == 1) return Matrix::Ones(1, 1);
  const Eigen::Index n = m - 1;
  const Matrix q = ones_complement_basis(m);
  const Matrix kr = q.transpose() * k * q;
  const Eigen::SelfAdjointEigenSolver<Matrix> eig(kr.transpose() * kr);
  if (eig.info() != Eigen::Success) throw SolverError("symmetric eigendecomposition failed");
  const Vector& s2 = eig.eigenvalues();  // ascending
  const double cut = 1e-8 * s2(n - 1);
  Eigen::Index r = 0;
  while (r < n && s2(n - 1 - r) > cut && s2(n - 1 - r) > 0.0) ++r;
  if (r == 0) return Matrix::Identity(m, m);
  const Matrix& v = eig.eigenvectors();
  const Matrix u_r = kr * v.rightCols(r) * s2.tail(r).cwiseSqrt().cwiseInverse().asDiagonal();
  const Eigen::HouseholderQR<Matrix> qr(u_r);
  Matrix basis = qr.householderQ() * Matrix::Identity(n, n);
  for (Eigen::Index i = 0; i < r; ++i)
    if (basis.col(i).dot(u_r.col(i)) < 0.0) basis.col(i) = -basis.col(i);
  const Matrix u = basis.leftCols(r) * v.rightCols(r).transpose() + basis.rightCols(n - r) * v.leftCols(n - r).transpose();
  return embed_rotation(q, u);
}

}  // namespace detail

/// Minimal-norm Delta with Delta 1 = 0, Delta^T 1 = 0 such that D + Delta
/// reproduces the importance-weighted covariance. The Riccati equation says
/// (B + Delta)(B + Delta)^T = T with T = M (W - w w^T), so B + Delta =
/// T^{1/2} Omega; Omega is the rotation closest to B, which makes Delta = 0
/// whenever D is already second-order accurate.
/// `t_root` is sqrt(M) (W - w w^T)^{1/2}, i.e. T^{1/2}.
inline RiccatiResult riccati_correction(const TransformMatrix& d, const WeightVector& w, const Matrix& t_root,
                                        double tol = 1e-8) {
  const Eigen::Index m = w.size();
  if (d.d.rows() != m || d.d.cols() != m) throw DimensionMismatch("transform and weights disagree on M");
  if (t_root.rows() != m || t_root.cols() != m) throw DimensionMismatch("square root and weights disagree on M");
  Matrix b = d.d;
  b.colwise() -= w.values();
  RiccatiResult out;
  out.tolerance = tol * (1.0 + (t_root * t_root).norm());
  auto attempt = [&](const Matrix& omega) {
    out.correction.delta = t_root * omega - b;
    out.residual = riccati_residual(d.d, w, out.correction.delta);
    out.converged = out.residual < out.tolerance;
    return out.converged;
  };
  const Matrix k = t_root * b;
  if (!attempt(detail::near_polar(k))) attempt(polar_rotation(k).omega);
  return out;
}

/// Same, computing T^{1/2} from w.
inline RiccatiResult riccati_correction(const TransformMatrix& d, const WeightVector& w, double tol = 1e-8) {
  return riccati_correction(d, w, nets_delta(w).delta, tol);
}

// ---------------------------------------------------------------------------
// ETPS
// ---------------------------------------------------------------------------

enum class TemporalMode { kPathwise, kPerTime, kConstant };

inline const char* to_string(TemporalMode t) {
  switch (t) {
    case TemporalMode::kPathwise: return "pathwise";
    case TemporalMode::kPerTime: return "per-time";
    case TemporalMode::kConstant: return "constant";
  }
  return "unknown";
}

struct EtpsOptions {
  TransportSolver solver = TransportSolver::kExact;
  double lambda = 40.0;
  bool correction = false;
  TemporalMode temporal = TemporalMode::kPathwise;
  SinkhornOptions sinkhorn{};
  ExactSolverOptions exact{};
  double correction_tol = 1e-8;
};

struct EtpsResult {
  /// One transform for the pathwise mode, otherwise one per window block.
  std::vector<TransformMatrix> transforms;
  double objective = 0.0;
  double correction_residual = 0.0;
  bool converged = true;

  bool per_time() const { return transforms.size() > 1; }
};

/// Optimal plan for one cost; scalar problems with the exact solver use the
/// sorting algorithm.
inline TransportPlan solve_plan(const Matrix& samples, const WeightVector& w, const EtpsOptions& opts) {
  if (opts.solver == TransportSolver::kSorted1d || (opts.solver == TransportSolver::kExact && samples.rows() == 1)) {
    if (samples.rows() != 1) throw InvalidArgument("the sorting solver needs scalar samples");
    return solve_1d(samples.row(0).transpose(), w);
  }
  const CostMatrix c = cost_matrix(samples);
  if (opts.solver == TransportSolver::kSinkhorn) return solve_sinkhorn(c, w, opts.lambda, opts.sinkhorn);
  return solve_exact(c, w, opts.exact);
}

inline EtpsResult etps_transform(const TrajectoryEnsemble& x, const WeightVector& w, const EtpsOptions& opts = {}) {
  if (w.size() != x.m()) throw DimensionMismatch("weight length differs from M");
  EtpsResult out;
  const Matrix t_root = opts.correction ? nets_delta(w).delta : Matrix();
  auto finish = [&](const TransportPlan& plan) {
    TransformMatrix d = plan.transform();
    out.objective += plan.objective;
    out.converged = out.converged && plan.converged;
    if (opts.correction) {
      const RiccatiResult r = riccati_correction(d, w, t_root, opts.correction_tol);
      d.d += r.correction.delta;
      out.correction_residual = std::max(out.correction_residual, r.residual);
      out.converged = out.converged && r.converged;
    }
    return d;
  };
  switch (opts.temporal) {
    case TemporalMode::kPathwise:
      out.transforms.push_back(finish(solve_plan(x.flatten(), w, opts)));
      break;
    case TemporalMode::kPerTime:
      for (Eigen::Index l = 0; l < x.num_blocks(); ++l) out.transforms.push_back(finish(solve_plan(x.block(l), w, opts)));
      break;
    case TemporalMode::kConstant: {
      const TransformMatrix d = finish(solve_plan(x.newest(), w, opts));
      out.transforms.assign(static_cast<std::size_t>(x.num_blocks()), d);
      break;
    }
  }
  return out;
}

inline TrajectoryEnsemble apply_etps(const TrajectoryEnsemble& x, const EtpsResult& r) {
  if (r.transforms.size() == 1) return apply_transform(x, r.transforms.front());
  return apply_transform_per_time(x, r.transforms);
}

// ---------------------------------------------------------------------------
// Bootstrap particle smoother
// ---------------------------------------------------------------------------

/// Systematic resampling as a 0/1 selection matrix: column j has a single
/// one in the row of the member it copies.
inline TransformMatrix bootstrap_resample_matrix(const WeightVector& w, RngStream& rng) {
  const Eigen::Index m = w.size();
  Matrix d = Matrix::Zero(m, m);
  const double u = rng.uniform();
  double cumulative = w[0];
  Eigen::Index i = 0;
  for (Eigen::Index j = 0; j < m; ++j) {
    const double point = (static_cast<double>(j) + u) / static_cast<double>(m);
    while (point > cumulative && i < m - 1) cumulative += w[++i];
    // Never select a zero-weight member through round-off in the cumulative sum.
    Eigen::Index pick = i;
    while (w[pick] <= 0.0 && pick > 0) --pick;
    d(pick, j) = 1.0;
  }
  return {std::move(d), Scheme::kBootstrap};
}

// ---------------------------------------------------------------------------
// Configuration and orchestration
// ---------------------------------------------------------------------------

enum class SmootherKind { kNone, kEsrs, kNets, kEtps, kBootstrap, kHybrid };

inline const char* to_string(SmootherKind k) {
  switch (k) {
    case SmootherKind::kNone: return "none";
    case SmootherKind::kEsrs: return "esrs";
    case SmootherKind::kNets: return "nets";
    case SmootherKind::kEtps: return "etps";
    case SmootherKind::kBootstrap: return "bootstrap";
    case SmootherKind::kHybrid: return "hybrid";
  }
  return "unknown";
}

struct SmootherConfig {
  SmootherKind kind = SmootherKind::kEsrs;
  RotationMode rotation = RotationMode::kOptimal;  // NETS
  EtpsOptions etps{};                              // ETPS
  std::vector<SmootherConfig> stages;              // hybrid: first, second
  double alpha = 0.5;                              // hybrid split of the likelihood
  int lag = 0;
  double rejuvenation = 0.0;

  static SmootherConfig hybrid(SmootherConfig first, SmootherConfig second, double alpha) {
    SmootherConfig c;
    c.kind = SmootherKind::kHybrid;
    c.alpha = alpha;
    c.lag = std::max(first.lag, second.lag);
    c.rejuvenation = first.rejuvenation;
    c.stages = {std::move(first), std::move(second)};
    return c;
  }

  void validate() const {
    if (lag < 0) throw ConfigError("smoother.lag", "lag must be nonnegative");
    if (rejuvenation < 0.0) throw ConfigError("smoother.rejuvenation", "rejuvenation must be nonnegative");
    if (kind == SmootherKind::kEtps && etps.solver == TransportSolver::kSinkhorn && !(etps.lambda > 0.0))
      throw ConfigError("smoother.lambda", "lambda must be positive");
    if (kind == SmootherKind::kHybrid) {
      if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("smoother.alpha", "alpha must lie in [0, 1]");
      if (stages.size() != 2) throw ConfigError("smoother.stages", "a hybrid needs exactly two stages");
      for (const auto& s : stages) {
        if (s.kind == SmootherKind::kHybrid) throw ConfigError("smoother.stages", "hybrid stages cannot nest");
        s.validate();
      }
    }
  }

  std::string label() const {
    switch (kind) {
      case SmootherKind::kNets: return std::string("nets-") + to_string(rotation);
      case SmootherKind::kEtps: {
        std::string s = etps.correction ? "etps2" : "etps";
        if (etps.temporal != TemporalMode::kPathwise) s += std::string("-") + to_string(etps.temporal);
        return s;
      }
      case SmootherKind::kHybrid: return "hybrid-" + stages.at(0).label() + "-" + stages.at(1).label();
      default: return to_string(kind);
    }
  }
};

struct AnalysisDiagnostics {
  double ess = 0.0;
  double objective = 0.0;
  double correction_residual = 0.0;
  double column_residual = 0.0;
  bool degenerate_weights = false;
  bool converged = true;
  std::string scheme;
};

namespace detail {

inline void merge(AnalysisDiagnostics& into, const AnalysisDiagnostics& part) {
  into.ess = part.ess;
  into.objective += part.objective;
  into.correction_residual = std::max(into.correction_residual, part.correction_residual);
  into.column_residual = std::max(into.column_residual, part.column_residual);
  into.degenerate_weights = into.degenerate_weights || part.degenerate_weights;
  into.converged = into.converged && part.converged;
}

}  // namespace detail

/// One analysis of the prior window given the observation of its newest
/// block, with the likelihood tempered by `alpha`.
inline TrajectoryEnsemble smoother_analysis(const TrajectoryEnsemble& x, const Observation& y,
                                            const ObservationModel& model, const SmootherConfig& config, RngStream& rng,
                                            AnalysisDiagnostics* diag = nullptr, double alpha = 1.0) {
  AnalysisDiagnostics local;
  local.scheme = config.label();
  TrajectoryEnsemble out;
  switch (config.kind) {
    case SmootherKind::kNone:
      out = x;
      break;
    case SmootherKind::kEsrs: {
      const TransformMatrix d = esrs_transform(x.newest(), y, model, alpha);
      local.column_residual = d.column_sum_residual();
      out = apply_transform(x, d);
      break;
    }
    case SmootherKind::kNets: {
      const WeightResult wr = importance_weights(x.newest(), y, model, alpha);
      local.ess = effective_sample_size(wr.weights);
      local.degenerate_weights = wr.degenerate;
      const TransformMatrix d = nets_transform(x, wr.weights, config.rotation, rng);
      local.column_residual = d.column_sum_residual();
      out = apply_transform(x, d);
      break;
    }
    case SmootherKind::kEtps: {
      const WeightResult wr = importance_weights(x.newest(), y, model, alpha);
      local.ess = effective_sample_size(wr.weights);
      local.degenerate_weights = wr.degenerate;
      const EtpsResult r = etps_transform(x, wr.weights, config.etps);
      local.objective = r.objective;
      local.correction_residual = r.correction_residual;
      local.converged = r.converged;
      for (const auto& d : r.transforms) local.column_residual = std::max(local.column_residual, d.column_sum_residual());
      out = apply_etps(x, r);
      break;
    }
    case SmootherKind::kBootstrap: {
      const WeightResult wr = importance_weights(x.newest(), y, model, alpha);
      local.ess = effective_sample_size(wr.weights);
      local.degenerate_weights = wr.degenerate;
      out = apply_transform(x, bootstrap_resample_matrix(wr.weights, rng));
      break;
    }
    case SmootherKind::kHybrid:
      out = x;
      local.scheme = config.label();
      if (config.alpha > 0.0) {
        AnalysisDiagnostics part;
        out = smoother_analysis(out, y, model, config.stages.at(0), rng, &part, alpha * config.alpha);
        detail::merge(local, part);
      }
      if (config.alpha < 1.0) {
        AnalysisDiagnostics part;
        out = smoother_analysis(out, y, model, config.stages.at(1), rng, &part, alpha * (1.0 - config.alpha));
        detail::merge(local, part);
      }
      break;
  }
  if (diag) *diag = local;
  return out;
}

/// Hybrid update: the first smoother with likelihood power alpha, then the
/// second on the result with power 1 - alpha.
inline TrajectoryEnsemble hybrid_cycle(const TrajectoryEnsemble& x, const Observation& y, const ObservationModel& model,
                                       double alpha, const SmootherConfig& first, const SmootherConfig& second,
                                       RngStream& rng) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidArgument("alpha must lie in [0, 1]");
  SmootherConfig c = SmootherConfig::hybrid(first, second, alpha);
  c.validate();
  return smoother_analysis(x, y, model, c, rng);
}

}  // namespace lets
