#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <deque>
#include <memory>
#include <string>
#include <vector>

#include "lets/core.hpp"
#include "lets/error.hpp"
#include "lets/random.hpp"

namespace lets {

// ---------------------------------------------------------------------------
// Single-step integrators
// ---------------------------------------------------------------------------

struct Lorenz63Params {
  double sigma = 10.0;
  double rho = 28.0;
  double beta = 8.0 / 3.0;
};

/// Forward Euler step of the Lorenz 63 system.
inline StateVector lorenz63_step(const StateVector& x, double dt, const Lorenz63Params& p = {}) {
  if (x.size() != 3) throw DimensionMismatch("lorenz63_step expects a 3-vector");
  StateVector out(3);
  out(0) = x(0) + dt * p.sigma * (x(1) - x(0));
  out(1) = x(1) + dt * (x(0) * (p.rho - x(2)) - x(1));
  out(2) = x(2) + dt * (x(0) * x(1) - p.beta * x(2));
  return out;
}

/// Forward Euler step of Lorenz 96 with periodic indexing.
inline StateVector lorenz96_step(const StateVector& x, double dt, double forcing) {
  const Eigen::Index n = x.size();
  if (n < 4) throw InvalidArgument("lorenz96_step needs at least 4 components");
  StateVector out(n);
  for (Eigen::Index s = 0; s < n; ++s) {
    const double xp1 = x((s + 1) % n);
    const double xm1 = x((s + n - 1) % n);
    const double xm2 = x((s + n - 2) % n);
    out(s) = x(s) + dt * ((xp1 - xm2) * xm1 - x(s) + forcing);
  }
  return out;
}

struct MackeyGlassParams {
  double phi = 0.2;
  double gamma = 0.1;
  double kappa = 10.0;
  double nu = 17.0;
};

/// Number of internal steps spanned by the delay.
inline int mackey_glass_delay_steps(const MackeyGlassParams& p, double dt) {
  const double ratio = p.nu / dt;
  const long n = std::lround(ratio);
  if (n < 1 || std::abs(ratio - static_cast<double>(n)) > 1e-9 * ratio)
    throw InvalidArgument("dt must divide the delay nu");
  return static_cast<int>(n);
}

/// History of a scalar delay equation: the current value and the n values
/// before it, x(t - n dt), ..., x(t).
class DelayBuffer {
 public:
  explicit DelayBuffer(int delay_steps) : n_(delay_steps) {
    if (delay_steps < 1) throw InvalidArgument("delay must span at least one step");
  }

  int delay_steps() const { return n_; }
  bool warm() const { return static_cast<int>(values_.size()) == n_ + 1; }
  std::size_t size() const { return values_.size(); }

  void push(double x) {
    values_.push_back(x);
    if (static_cast<int>(values_.size()) > n_ + 1) values_.pop_front();
  }

  /// x(t - j dt) for j = 0..n.
  double lagged(int j) const { return values_.at(values_.size() - 1 - static_cast<std::size_t>(j)); }
  double current() const { return values_.back(); }

 private:
  int n_;
  std::deque<double> values_;
};

namespace detail {

inline double mackey_glass_rate(double x, double delayed, const MackeyGlassParams& p) {
  return p.phi * delayed / (1.0 + std::pow(delayed, p.kappa)) - p.gamma * x;
}

/// RK4 step with the delayed argument linearly interpolated at half steps.
inline double mackey_glass_rk4(double x, double delayed_now, double delayed_next, const MackeyGlassParams& p, double dt) {
  const double delayed_half = 0.5 * (delayed_now + delayed_next);
  const double k1 = mackey_glass_rate(x, delayed_now, p);
  const double k2 = mackey_glass_rate(x + 0.5 * dt * k1, delayed_half, p);
  const double k3 = mackey_glass_rate(x + 0.5 * dt * k2, delayed_half, p);
  const double k4 = mackey_glass_rate(x + dt * k3, delayed_next, p);
  return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

}  // namespace detail

/// One RK4 step of the Mackey-Glass delay equation.
inline StateVector mackey_glass_step(const DelayBuffer& buffer, const MackeyGlassParams& p, double dt) {
  if (!buffer.warm()) throw InvalidArgument("Mackey-Glass buffer is not warmed up");
  if (buffer.delay_steps() != mackey_glass_delay_steps(p, dt))
    throw DimensionMismatch("buffer length does not match nu / dt");
  const int n = buffer.delay_steps();
  StateVector out(1);
  out(0) = detail::mackey_glass_rk4(buffer.current(), buffer.lagged(n), buffer.lagged(n - 1), p, dt);
  return out;
}

// ---------------------------------------------------------------------------
// Ensemble models
// ---------------------------------------------------------------------------

/// Forecast model x_k = f(x_{k-n}, ..., x_{k-1}) + eps_k, eps_k ~ N(0, Q).
///
/// `advance` maps the stored history (oldest block first, current state
/// last) to the deterministic part of the next block. One block is the
/// assimilation time unit; for Markov models it may span several internal
/// integrator steps.
class Model {
 public:
  virtual ~Model() = default;

  virtual std::string name() const = 0;
  virtual Eigen::Index state_dim() const = 0;
  virtual double dt() const = 0;

  /// Number of past blocks (besides the current one) the step reads.
  virtual int memory() const { return 0; }

  /// Deterministic advance by `steps` internal steps. Models with memory
  /// only support steps == 1.
  virtual EnsembleMatrix advance(const TrajectoryEnsemble& history, int steps) const = 0;

  const Matrix& process_noise() const { return q_; }
  bool stochastic() const { return q_.size() > 0 && q_.cwiseAbs().maxCoeff() > 0.0; }

  void set_process_noise(Matrix q) {
    if (q.rows() != state_dim() || q.cols() != state_dim()) throw DimensionMismatch("Q must be N_x x N_x");
    q_ = std::move(q);
    q_sqrt_ = psd_sqrt(q_);
  }

  const Matrix& process_noise_sqrt() const { return q_sqrt_; }

 private:
  Matrix q_;
  Matrix q_sqrt_;
};

class Lorenz63Model : public Model {
 public:
  explicit Lorenz63Model(double dt, Lorenz63Params p = {}) : dt_(dt), p_(p) {
    if (!(dt > 0.0)) throw InvalidArgument("dt must be positive");
  }

  std::string name() const override { return "lorenz63"; }
  Eigen::Index state_dim() const override { return 3; }
  double dt() const override { return dt_; }

  EnsembleMatrix advance(const TrajectoryEnsemble& history, int steps) const override {
    EnsembleMatrix x = history.newest();
    for (int n = 0; n < steps; ++n)
      for (Eigen::Index i = 0; i < x.cols(); ++i) x.col(i) = lorenz63_step(x.col(i), dt_, p_);
    return x;
  }

 private:
  double dt_;
  Lorenz63Params p_;
};

class Lorenz96Model : public Model {
 public:
  Lorenz96Model(Eigen::Index n_x, double forcing, double dt) : n_x_(n_x), forcing_(forcing), dt_(dt) {
    if (n_x < 4) throw InvalidArgument("Lorenz 96 needs at least 4 components");
    if (!(dt > 0.0)) throw InvalidArgument("dt must be positive");
  }

  std::string name() const override { return "lorenz96"; }
  Eigen::Index state_dim() const override { return n_x_; }
  double dt() const override { return dt_; }
  double forcing() const { return forcing_; }

  EnsembleMatrix advance(const TrajectoryEnsemble& history, int steps) const override {
    EnsembleMatrix x = history.newest();
    for (int n = 0; n < steps; ++n)
      for (Eigen::Index i = 0; i < x.cols(); ++i) x.col(i) = lorenz96_step(x.col(i), dt_, forcing_);
    return x;
  }

 private:
  Eigen::Index n_x_;
  double forcing_;
  double dt_;
};

/// Scalar delay model; one block is one RK4 step and the history must hold
/// the last nu/dt blocks plus the current one.
class MackeyGlassModel : public Model {
 public:
  explicit MackeyGlassModel(double dt, MackeyGlassParams p = {})
      : dt_(dt), p_(p), delay_(mackey_glass_delay_steps(p, dt)) {}

  std::string name() const override { return "mackey_glass"; }
  Eigen::Index state_dim() const override { return 1; }
  double dt() const override { return dt_; }
  int memory() const override { return delay_; }
  const MackeyGlassParams& params() const { return p_; }

  EnsembleMatrix advance(const TrajectoryEnsemble& history, int steps) const override {
    if (steps != 1) throw InvalidArgument("delay model advances one step per block");
    if (history.num_blocks() < delay_ + 1) throw InvalidArgument("Mackey-Glass history is not warmed up");
    const Eigen::Index last = history.num_blocks() - 1;
    const EnsembleMatrix& x = history.block(last);
    const EnsembleMatrix& d0 = history.block(last - delay_);
    const EnsembleMatrix& d1 = history.block(last - delay_ + 1);
    EnsembleMatrix out(1, x.cols());
    for (Eigen::Index i = 0; i < x.cols(); ++i) out(0, i) = detail::mackey_glass_rk4(x(0, i), d0(0, i), d1(0, i), p_, dt_);
    return out;
  }

 private:
  double dt_;
  MackeyGlassParams p_;
  int delay_;
};

/// f = 0: every block is a fresh draw from N(0, Q).
class WhiteNoiseModel : public Model {
 public:
  WhiteNoiseModel(Eigen::Index n_x, double variance) : n_x_(n_x) {
    set_process_noise(variance * Matrix::Identity(n_x, n_x));
  }

  std::string name() const override { return "white_noise"; }
  Eigen::Index state_dim() const override { return n_x_; }
  double dt() const override { return 1.0; }

  EnsembleMatrix advance(const TrajectoryEnsemble& history, int) const override {
    return EnsembleMatrix::Zero(n_x_, history.m());
  }

 private:
  Eigen::Index n_x_;
};

/// Advances a Markov ensemble by `steps` internal steps. When the model has
/// process noise, one draw eps ~ N(0, Q) per member is added at the end of
/// the interval.
inline EnsembleMatrix propagate_ensemble(const EnsembleMatrix& x, const Model& model, int steps, RngStream& rng) {
  if (steps < 0) throw InvalidArgument("steps must be nonnegative");
  if (model.memory() > 0) throw InvalidArgument("propagate_ensemble needs a Markov model; use advance_history");
  if (x.rows() != model.state_dim()) throw DimensionMismatch("ensemble rows differ from the model dimension");
  if (steps == 0) return x;
  TrajectoryEnsemble history({x}, 0);
  EnsembleMatrix out = model.advance(history, steps);
  if (model.stochastic()) out += model.process_noise_sqrt() * rng.normal_matrix(out.rows(), out.cols());
  return out;
}

/// Next block for a model with memory, read from the stored history.
inline EnsembleMatrix advance_history(const TrajectoryEnsemble& history, const Model& model, int steps, RngStream& rng) {
  EnsembleMatrix out = model.advance(history, steps);
  if (model.stochastic()) out += model.process_noise_sqrt() * rng.normal_matrix(out.rows(), out.cols());
  return out;
}

/// Adds beta * P^{1/2} xi to every member, with P the (M-1)-normalized
/// covariance of the forecast ensemble and xi ~ N(0, I).
inline EnsembleMatrix rejuvenate(const EnsembleMatrix& x_post, const EnsembleStats& prior, double beta, RngStream& rng) {
  if (beta < 0.0) throw InvalidArgument("rejuvenation factor must be nonnegative");
  if (beta == 0.0) return x_post;
  if (prior.covariance.rows() != x_post.rows()) throw DimensionMismatch("prior covariance does not match the ensemble");
  const Matrix root = psd_sqrt(prior.covariance);
  return x_post + beta * root * rng.normal_matrix(x_post.rows(), x_post.cols());
}

}  // namespace lets
