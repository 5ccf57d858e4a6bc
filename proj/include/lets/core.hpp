#pragma once

// Ensemble containers, moment computations, the fixed-lag window and the
// generic right-multiplication update shared by every transform smoother.

#include <Eigen/Dense>

#include <cmath>
#include <deque>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lets/error.hpp"

namespace lets {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using StateVector = Eigen::VectorXd;

/// N_x x M matrix, one ensemble member per column.
using EnsembleMatrix = Eigen::MatrixXd;

/// Default numerical tolerances. Every function taking one of these accepts
/// an override.
struct Tolerances {
  double weight_sum = 1e-12;
  double transform_columns = 1e-10;
  double symmetry = 1e-10;
  double eigen_clamp = 1e-12;  // relative; smaller eigenvalues are round-off
  double eigen_negative = 1e-6;
};

inline void require_finite(const Matrix& x, const char* what) {
  if (!x.allFinite()) throw InvalidEnsemble(std::string(what) + " has non-finite entries");
}

inline void require_members(const Matrix& x, Eigen::Index min_members = 2) {
  if (x.cols() < min_members)
    throw InvalidEnsemble("ensemble needs at least " + std::to_string(min_members) +
                          " members, got " + std::to_string(x.cols()));
}

/// Importance weights on the probability simplex.
class WeightVector {
 public:
  WeightVector() = default;

  explicit WeightVector(Vector w, double tol = Tolerances{}.weight_sum) : w_(std::move(w)) {
    if (w_.size() == 0) throw InvalidArgument("empty weight vector");
    if (!w_.allFinite()) throw InvalidArgument("weights must be finite");
    if (w_.minCoeff() < 0.0) throw InvalidArgument("weights must be nonnegative");
    if (std::abs(w_.sum() - 1.0) > tol) throw InvalidArgument("weights must sum to one");
  }

  /// Divides by the sum. Raw weights must be nonnegative with positive sum.
  static WeightVector normalized(const Vector& raw) {
    const double total = raw.sum();
    if (!(total > 0.0) || !std::isfinite(total))
      throw InvalidArgument("cannot normalize weights with nonpositive sum");
    Vector w = raw / total;
    // Renormalize once more so the sum error stays at round-off level.
    w /= w.sum();
    return WeightVector(std::move(w));
  }

  static WeightVector uniform(Eigen::Index m) {
    return WeightVector(Vector::Constant(m, 1.0 / static_cast<double>(m)));
  }

  static WeightVector degenerate(Eigen::Index m, Eigen::Index i) {
    Vector w = Vector::Zero(m);
    w(i) = 1.0;
    return WeightVector(std::move(w));
  }

  Eigen::Index size() const { return w_.size(); }
  double operator[](Eigen::Index i) const { return w_(i); }
  const Vector& values() const { return w_; }

 private:
  Vector w_;
};

enum class Scheme { kIdentity, kEsrs, kNets, kEtps, kBootstrap, kHybridStage };

inline const char* to_string(Scheme s) {
  switch (s) {
    case Scheme::kIdentity: return "identity";
    case Scheme::kEsrs: return "esrs";
    case Scheme::kNets: return "nets";
    case Scheme::kEtps: return "etps";
    case Scheme::kBootstrap: return "bootstrap";
    case Scheme::kHybridStage: return "hybrid-stage";
  }
  return "unknown";
}

/// M x M right-multiplication transform. Columns sum to one.
struct TransformMatrix {
  Matrix d;
  Scheme scheme = Scheme::kIdentity;

  static TransformMatrix identity(Eigen::Index m) { return {Matrix::Identity(m, m), Scheme::kIdentity}; }

  Eigen::Index size() const { return d.rows(); }

  /// Max-norm of D^T 1 - 1.
  double column_sum_residual() const {
    return (d.colwise().sum().array() - 1.0).abs().maxCoeff();
  }

  /// Max-norm of D 1 - M w.
  double row_sum_residual(const WeightVector& w) const {
    return (d.rowwise().sum() - static_cast<double>(d.cols()) * w.values()).cwiseAbs().maxCoeff();
  }
};

struct EnsembleStats {
  StateVector mean;
  Matrix deviations;
  Matrix covariance;  // A A^T / (M - 1)
};

/// Fixed-lag window of ensemble blocks, oldest first. Block l holds the
/// ensemble at time `time_index() - lag() + l`.
class TrajectoryEnsemble {
 public:
  TrajectoryEnsemble() = default;

  TrajectoryEnsemble(std::vector<EnsembleMatrix> blocks, int time_index) : time_index_(time_index) {
    for (auto& b : blocks) append(std::move(b));
  }

  bool empty() const { return blocks_.empty(); }
  Eigen::Index num_blocks() const { return static_cast<Eigen::Index>(blocks_.size()); }
  int lag() const { return static_cast<int>(blocks_.size()) - 1; }
  int time_index() const { return time_index_; }
  Eigen::Index n_x() const { return empty() ? 0 : blocks_.front().rows(); }
  Eigen::Index m() const { return empty() ? 0 : blocks_.front().cols(); }
  Eigen::Index flat_rows() const { return n_x() * num_blocks(); }

  const EnsembleMatrix& block(Eigen::Index l) const { return blocks_.at(static_cast<std::size_t>(l)); }
  const EnsembleMatrix& newest() const { return blocks_.back(); }
  const EnsembleMatrix& oldest() const { return blocks_.front(); }

  void set_block(Eigen::Index l, EnsembleMatrix x) {
    auto& b = blocks_.at(static_cast<std::size_t>(l));
    if (x.rows() != b.rows() || x.cols() != b.cols()) throw DimensionMismatch("set_block: shape differs");
    b = std::move(x);
  }

  /// (L+1) N_x x M matrix with the oldest block on top.
  Matrix flatten() const {
    Matrix out(flat_rows(), m());
    for (Eigen::Index l = 0; l < num_blocks(); ++l) out.middleRows(l * n_x(), n_x()) = block(l);
    return out;
  }

  static TrajectoryEnsemble from_flat(const Matrix& flat, Eigen::Index n_x, int time_index) {
    if (n_x <= 0 || flat.rows() % n_x != 0) throw DimensionMismatch("from_flat: rows not a multiple of n_x");
    std::vector<EnsembleMatrix> blocks;
    for (Eigen::Index l = 0; l < flat.rows() / n_x; ++l) blocks.emplace_back(flat.middleRows(l * n_x, n_x));
    return TrajectoryEnsemble(std::move(blocks), time_index);
  }

  /// Appends a block for the next time level and drops the oldest blocks so
  /// that at most `max_lag + 1` remain.
  void push(EnsembleMatrix block, int max_lag) {
    if (max_lag < 0) throw InvalidArgument("max_lag must be nonnegative");
    append(std::move(block));
    ++time_index_;
    while (static_cast<int>(blocks_.size()) > max_lag + 1) blocks_.pop_front();
  }

  /// Window made of the newest `lag + 1` blocks (fewer during warm-up).
  TrajectoryEnsemble tail(int lag) const {
    TrajectoryEnsemble out;
    out.time_index_ = time_index_;
    const auto n = std::min<std::size_t>(blocks_.size(), static_cast<std::size_t>(lag) + 1);
    out.blocks_.assign(blocks_.end() - static_cast<std::ptrdiff_t>(n), blocks_.end());
    return out;
  }

  /// Overwrites the newest blocks with those of `window`.
  void assign_tail(const TrajectoryEnsemble& window) {
    if (window.num_blocks() > num_blocks()) throw DimensionMismatch("assign_tail: window longer than history");
    const std::size_t offset = blocks_.size() - window.blocks_.size();
    for (std::size_t l = 0; l < window.blocks_.size(); ++l) set_block(static_cast<Eigen::Index>(offset + l), window.blocks_[l]);
  }

 private:
  void append(EnsembleMatrix block) {
    require_finite(block, "ensemble block");
    if (!blocks_.empty() && (block.rows() != n_x() || block.cols() != m()))
      throw DimensionMismatch("window blocks must share N_x and M");
    blocks_.push_back(std::move(block));
  }

  std::deque<EnsembleMatrix> blocks_;
  int time_index_ = -1;
};

inline EnsembleStats mean_and_deviations(const EnsembleMatrix& x) {
  require_members(x);
  require_finite(x, "ensemble");
  EnsembleStats s;
  s.mean = x.rowwise().mean();
  s.deviations = x.colwise() - s.mean;
  s.covariance = s.deviations * s.deviations.transpose() / static_cast<double>(x.cols() - 1);
  return s;
}

inline Vector weighted_mean(const Matrix& x, const WeightVector& w) {
  if (x.cols() != w.size()) throw DimensionMismatch("weighted_mean: weight length differs from M");
  return x * w.values();
}

inline Vector weighted_mean(const TrajectoryEnsemble& x, const WeightVector& w) {
  return weighted_mean(x.flatten(), w);
}

/// sum_i w_i (x_i - m)(x_i - m)^T with m the weighted mean.
inline Matrix weighted_covariance(const Matrix& x, const WeightVector& w) {
  const Vector m = weighted_mean(x, w);
  const Matrix a = x.colwise() - m;
  Matrix p = a * w.values().asDiagonal() * a.transpose();
  return 0.5 * (p + p.transpose());
}

inline Matrix weighted_covariance(const TrajectoryEnsemble& x, const WeightVector& w) {
  return weighted_covariance(x.flatten(), w);
}

/// (1/M) sum_i (x_i - m)(x_i - m)^T with m the plain mean.
inline Matrix empirical_covariance(const Matrix& x) {
  require_finite(x, "ensemble");
  const Vector m = x.rowwise().mean();
  const Matrix a = x.colwise() - m;
  Matrix p = a * a.transpose() / static_cast<double>(x.cols());
  return 0.5 * (p + p.transpose());
}

inline Matrix empirical_covariance(const TrajectoryEnsemble& x) { return empirical_covariance(x.flatten()); }

inline void require_transform_shape(const TrajectoryEnsemble& x, const TransformMatrix& d) {
  if (d.d.rows() != x.m() || d.d.cols() != x.m())
    throw DimensionMismatch("transform is " + std::to_string(d.d.rows()) + "x" + std::to_string(d.d.cols()) +
                            " but the ensemble has " + std::to_string(x.m()) + " members");
}

/// X D applied to the whole window. Lag and time index are preserved.
inline TrajectoryEnsemble apply_transform(const TrajectoryEnsemble& x, const TransformMatrix& d) {
  require_transform_shape(x, d);
  std::vector<EnsembleMatrix> blocks;
  blocks.reserve(static_cast<std::size_t>(x.num_blocks()));
  for (Eigen::Index l = 0; l < x.num_blocks(); ++l) blocks.emplace_back(x.block(l) * d.d);
  return TrajectoryEnsemble(std::move(blocks), x.time_index());
}

/// Block l of the output is block l of the input times ds[l].
inline TrajectoryEnsemble apply_transform_per_time(const TrajectoryEnsemble& x, std::span<const TransformMatrix> ds) {
  if (static_cast<Eigen::Index>(ds.size()) != x.num_blocks())
    throw DimensionMismatch("need one transform per window block: got " + std::to_string(ds.size()) + " for " +
                            std::to_string(x.num_blocks()) + " blocks");
  std::vector<EnsembleMatrix> blocks;
  blocks.reserve(ds.size());
  for (Eigen::Index l = 0; l < x.num_blocks(); ++l) {
    require_transform_shape(x, ds[static_cast<std::size_t>(l)]);
    blocks.emplace_back(x.block(l) * ds[static_cast<std::size_t>(l)].d);
  }
  return TrajectoryEnsemble(std::move(blocks), x.time_index());
}

/// Pure form of TrajectoryEnsemble::push.
inline TrajectoryEnsemble shift_window(TrajectoryEnsemble x, EnsembleMatrix new_block, int max_lag) {
  x.push(std::move(new_block), max_lag);
  return x;
}

namespace detail {

inline double symmetry_scale(const Matrix& s) { return std::max(1.0, s.cwiseAbs().maxCoeff()); }

inline void require_symmetric(const Matrix& s, double tol) {
  if (s.rows() != s.cols()) throw DimensionMismatch("matrix must be square");
  if ((s - s.transpose()).cwiseAbs().maxCoeff() > tol * detail::symmetry_scale(s))
    throw InvalidArgument("matrix must be symmetric");
}

/// Eigenvalues of a symmetric PSD matrix. Values within round-off of zero
/// become exactly zero, so null directions stay null under square roots.
inline Eigen::SelfAdjointEigenSolver<Matrix> psd_eigen(const Matrix& s, const Tolerances& tol, Vector& clamped) {
  require_symmetric(s, tol.symmetry);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (s + s.transpose()));
  if (eig.info() != Eigen::Success) throw SolverError("symmetric eigendecomposition failed");
  const double scale = std::max(1.0, eig.eigenvalues().cwiseAbs().maxCoeff());
  clamped = eig.eigenvalues();
  for (Eigen::Index i = 0; i < clamped.size(); ++i) {
    if (clamped(i) < -tol.eigen_negative * scale)
      throw NotPsd("eigenvalue " + std::to_string(clamped(i)) + " is below the PSD tolerance");
    if (clamped(i) < tol.eigen_clamp * scale) clamped(i) = 0.0;
  }
  return eig;
}

}  // namespace detail

/// Symmetric PSD square root via eigendecomposition.
inline Matrix psd_sqrt(const Matrix& s, const Tolerances& tol = {}) {
  Vector lambda;
  const auto eig = detail::psd_eigen(s, tol, lambda);
  const Matrix& v = eig.eigenvectors();
  Matrix r = v * lambda.cwiseSqrt().asDiagonal() * v.transpose();
  return 0.5 * (r + r.transpose());
}

/// Inverse square root of a symmetric positive definite matrix.
inline Matrix spd_inverse_sqrt(const Matrix& s, const Tolerances& tol = {}) {
  Vector lambda;
  const auto eig = detail::psd_eigen(s, tol, lambda);
  if (lambda.minCoeff() <= 0.0) throw NotPsd("matrix is singular");
  const Matrix& v = eig.eigenvectors();
  Matrix r = v * lambda.cwiseSqrt().cwiseInverse().asDiagonal() * v.transpose();
  return 0.5 * (r + r.transpose());
}

}  // namespace lets
