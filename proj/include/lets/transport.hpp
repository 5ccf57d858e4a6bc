#pragma once

// Discrete optimal transport between M equally weighted source points and
// the same points carrying importance weights. Plans use the convention
//
//   d_ij >= 0,   D 1 = M w,   D^T 1 = 1,
//
// so that column j of X D is the new j-th member.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "lets/core.hpp"
#include "lets/error.hpp"

namespace lets {

/// c_ij = ||x_i - x_j||^2 between ensemble columns.
struct CostMatrix {
  Matrix c;

  Eigen::Index size() const { return c.rows(); }
};

inline CostMatrix cost_matrix(const Matrix& flat) {
  require_members(flat);
  require_finite(flat, "ensemble");
  const Eigen::Index m = flat.cols();
  CostMatrix out{Matrix::Zero(m, m)};
  for (Eigen::Index j = 0; j < m; ++j)
    for (Eigen::Index i = j + 1; i < m; ++i) {
      const double v = (flat.col(i) - flat.col(j)).squaredNorm();
      out.c(i, j) = v;
      out.c(j, i) = v;
    }
  return out;
}

/// Pathwise cost over the flattened window.
inline CostMatrix cost_matrix(const TrajectoryEnsemble& x) { return cost_matrix(x.flatten()); }

enum class TransportSolver { kExact, kSinkhorn, kSorted1d };

inline const char* to_string(TransportSolver s) {
  switch (s) {
    case TransportSolver::kExact: return "exact";
    case TransportSolver::kSinkhorn: return "sinkhorn";
    case TransportSolver::kSorted1d: return "sorted-1d";
  }
  return "unknown";
}

struct TransportPlan {
  Matrix d;
  double objective = 0.0;  // sum_ij d_ij c_ij
  TransportSolver solver = TransportSolver::kExact;
  double lambda = 0.0;     // Sinkhorn only
  double regularized_objective = 0.0;
  int iterations = 0;
  bool converged = true;
  double duality_gap = 0.0;     // exact solver only
  double min_reduced_cost = 0.0;

  double row_residual(const WeightVector& w) const {
    return (d.rowwise().sum() - static_cast<double>(d.cols()) * w.values()).cwiseAbs().maxCoeff();
  }
  double column_residual() const { return (d.colwise().sum().array() - 1.0).abs().maxCoeff(); }

  TransformMatrix transform() const { return {d, Scheme::kEtps}; }
};

/// Raised when the simplex fails to terminate; carries the last iterate.
class TransportSolverError : public SolverError {
 public:
  TransportSolverError(const std::string& message, Matrix iterate)
      : SolverError(message), iterate_(std::move(iterate)) {}
  const Matrix& iterate() const { return iterate_; }

 private:
  Matrix iterate_;
};

namespace detail {

inline void require_plan_inputs(const CostMatrix& c, const WeightVector& w) {
  if (c.c.rows() != c.c.cols()) throw DimensionMismatch("cost matrix must be square");
  if (c.c.rows() != w.size()) throw DimensionMismatch("cost matrix size differs from weight length");
  if (!c.c.allFinite()) throw InvalidArgument("costs must be finite");
}

/// Leading principal coordinate of the points behind a squared-distance
/// matrix, via power iteration on the Gram matrix relative to point 0.
/// Used only to order the initial basis.
inline std::vector<Eigen::Index> principal_order(const Matrix& c, const std::vector<Eigen::Index>& idx) {
  const auto n = static_cast<Eigen::Index>(idx.size());
  std::vector<Eigen::Index> order(idx.size());
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  if (n <= 2) return order;
  const Eigen::Index o = idx[0];
  Matrix g(n, n);
  for (Eigen::Index b = 0; b < n; ++b)
    for (Eigen::Index a = 0; a < n; ++a)
      g(a, b) = 0.5 * (c(idx[a], o) + c(o, idx[b]) - c(idx[a], idx[b]));
  Vector v = Vector::LinSpaced(n, 1.0, 2.0);
  for (int it = 0; it < 60; ++it) {
    Vector next = g * v;
    const double norm = next.norm();
    if (!(norm > 0.0)) break;
    v = next / norm;
  }
  Eigen::Index big;
  v.cwiseAbs().maxCoeff(&big);
  if (v(big) < 0.0) v = -v;
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return v(a) < v(b); });
  return order;
}

/// Transportation simplex on the complete bipartite graph rows -> columns.
/// The basis is a spanning tree of nr + nc - 1 arcs; potentials are
/// recomputed by a tree traversal after each pivot. Pricing is block search
/// (Dantzig within a block); after a long run of degenerate pivots it falls
/// back to Bland's rule, which cannot cycle.
class TransportationSimplex {
 public:
  TransportationSimplex(const Matrix& cost, std::vector<Eigen::Index> rows, std::vector<double> supply,
                        std::vector<double> demand)
      : rows_(std::move(rows)), supply_(std::move(supply)), demand_(std::move(demand)) {
    nr_ = static_cast<Eigen::Index>(rows_.size());
    nc_ = static_cast<Eigen::Index>(demand_.size());
    cost_.resize(static_cast<std::size_t>(nr_ * nc_));
    for (Eigen::Index i = 0; i < nr_; ++i)
      for (Eigen::Index j = 0; j < nc_; ++j) cost_[static_cast<std::size_t>(i * nc_ + j)] = cost(rows_[i], j);
    cmax_ = 1.0;
    for (double v : cost_) cmax_ = std::max(cmax_, std::abs(v));
  }

  void initialize(const std::vector<Eigen::Index>& row_order, const std::vector<Eigen::Index>& col_order) {
    const Eigen::Index nb = nr_ + nc_ - 1;
    arc_row_.assign(static_cast<std::size_t>(nb), 0);
    arc_col_.assign(static_cast<std::size_t>(nb), 0);
    flow_.assign(static_cast<std::size_t>(nb), 0.0);
    basic_.assign(static_cast<std::size_t>(nr_ * nc_), 0);
    adj_.assign(static_cast<std::size_t>(nr_ + nc_), {});
    // North-west corner rule in the given orders.
    Eigen::Index a = 0, b = 0, k = 0;
    double s = supply_[static_cast<std::size_t>(row_order[0])];
    double t = demand_[static_cast<std::size_t>(col_order[0])];
    while (true) {
      const Eigen::Index i = row_order[static_cast<std::size_t>(a)];
      const Eigen::Index j = col_order[static_cast<std::size_t>(b)];
      const double f = std::max(0.0, std::min(s, t));
      set_arc(k++, i, j, f);
      s -= f;
      t -= f;
      if (a == nr_ - 1 && b == nc_ - 1) break;
      if (b == nc_ - 1 || (a < nr_ - 1 && s <= t)) {
        ++a;
        s = supply_[static_cast<std::size_t>(row_order[static_cast<std::size_t>(a)])];
      } else {
        ++b;
        t = demand_[static_cast<std::size_t>(col_order[static_cast<std::size_t>(b)])];
      }
    }
    parent_.assign(static_cast<std::size_t>(nr_ + nc_), -1);
    parent_arc_.assign(static_cast<std::size_t>(nr_ + nc_), -1);
    depth_.assign(static_cast<std::size_t>(nr_ + nc_), 0);
    pot_.assign(static_cast<std::size_t>(nr_ + nc_), 0.0);
    refresh_tree();
  }

  /// Runs pivots to optimality. Returns the number of pivots.
  int solve(int max_pivots, double pricing_tol) {
    const double tol = pricing_tol * cmax_;
    const Eigen::Index total = nr_ * nc_;
    const Eigen::Index block = std::max<Eigen::Index>(10, static_cast<Eigen::Index>(std::sqrt(static_cast<double>(total))));
    const int degenerate_limit = static_cast<int>(2 * (nr_ + nc_));
    Eigen::Index next = 0;
    int degenerate_run = 0;
    int pivots = 0;
    std::vector<Eigen::Index> up_row, up_col;
    while (true) {
      const bool bland = degenerate_run > degenerate_limit;
      Eigen::Index enter = -1;
      double best = -tol;
      if (bland) {
        for (Eigen::Index e = 0; e < total; ++e) {
          if (basic_[static_cast<std::size_t>(e)]) continue;
          if (reduced_cost(e) < -tol) {
            enter = e;
            break;
          }
        }
      } else {
        Eigen::Index e = next;
        for (Eigen::Index scanned = 1; scanned <= total; ++scanned) {
          if (!basic_[static_cast<std::size_t>(e)]) {
            const double r = reduced_cost(e);
            if (r < best) {
              best = r;
              enter = e;
            }
          }
          if (++e == total) e = 0;
          if (enter >= 0 && scanned % block == 0) break;
        }
        next = e;
      }
      if (enter < 0) return pivots;
      if (pivots >= max_pivots) {
        throw TransportSolverError("transport simplex exceeded " + std::to_string(max_pivots) + " pivots", plan());
      }
      ++pivots;
      const bool degenerate = pivot(enter / nc_, enter % nc_);
      degenerate_run = degenerate ? degenerate_run + 1 : 0;
    }
  }

  Matrix plan() const {
    const Eigen::Index m = nc_;
    Matrix d = Matrix::Zero(m, nc_);
    for (std::size_t k = 0; k < flow_.size(); ++k) d(rows_[static_cast<std::size_t>(arc_row_[k])], arc_col_[k]) += std::max(0.0, flow_[k]);
    return d;
  }

  /// Primal objective, dual objective and the most negative reduced cost.
  void certificate(double& primal, double& dual, double& min_reduced) const {
    primal = 0.0;
    for (std::size_t k = 0; k < flow_.size(); ++k)
      primal += std::max(0.0, flow_[k]) * cost_[static_cast<std::size_t>(arc_row_[k] * nc_ + arc_col_[k])];
    dual = 0.0;
    for (Eigen::Index i = 0; i < nr_; ++i) dual += supply_[static_cast<std::size_t>(i)] * pot_[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < nc_; ++j) dual += demand_[static_cast<std::size_t>(j)] * pot_[static_cast<std::size_t>(nr_ + j)];
    min_reduced = 0.0;
    for (Eigen::Index e = 0; e < nr_ * nc_; ++e) min_reduced = std::min(min_reduced, reduced_cost(e));
  }

 private:
  double reduced_cost(Eigen::Index e) const {
    const Eigen::Index i = e / nc_, j = e % nc_;
    return cost_[static_cast<std::size_t>(e)] - pot_[static_cast<std::size_t>(i)] - pot_[static_cast<std::size_t>(nr_ + j)];
  }

  void set_arc(Eigen::Index k, Eigen::Index i, Eigen::Index j, double f) {
    arc_row_[static_cast<std::size_t>(k)] = i;
    arc_col_[static_cast<std::size_t>(k)] = j;
    flow_[static_cast<std::size_t>(k)] = f;
    basic_[static_cast<std::size_t>(i * nc_ + j)] = 1;
    adj_[static_cast<std::size_t>(i)].push_back(k);
    adj_[static_cast<std::size_t>(nr_ + j)].push_back(k);
  }

  void unlink(Eigen::Index k) {
    const Eigen::Index i = arc_row_[static_cast<std::size_t>(k)], j = arc_col_[static_cast<std::size_t>(k)];
    basic_[static_cast<std::size_t>(i * nc_ + j)] = 0;
    for (Eigen::Index node : {i, nr_ + j}) {
      auto& list = adj_[static_cast<std::size_t>(node)];
      list.erase(std::find(list.begin(), list.end(), k));
    }
  }

  Eigen::Index other_end(Eigen::Index k, Eigen::Index node) const {
    const Eigen::Index r = arc_row_[static_cast<std::size_t>(k)];
    return node == r ? nr_ + arc_col_[static_cast<std::size_t>(k)] : r;
  }

  /// Parent pointers, depths and potentials from root node 0 (u_0 = 0).
  void refresh_tree() {
    const Eigen::Index n = nr_ + nc_;
    stack_.clear();
    stack_.push_back(0);
    parent_[0] = -1;
    parent_arc_[0] = -1;
    depth_[0] = 0;
    pot_[0] = 0.0;
    Eigen::Index visited = 0;
    while (!stack_.empty()) {
      const Eigen::Index node = stack_.back();
      stack_.pop_back();
      ++visited;
      for (Eigen::Index k : adj_[static_cast<std::size_t>(node)]) {
        if (k == parent_arc_[static_cast<std::size_t>(node)]) continue;
        const Eigen::Index child = other_end(k, node);
        parent_[static_cast<std::size_t>(child)] = node;
        parent_arc_[static_cast<std::size_t>(child)] = k;
        depth_[static_cast<std::size_t>(child)] = depth_[static_cast<std::size_t>(node)] + 1;
        const double c = cost_[static_cast<std::size_t>(arc_row_[static_cast<std::size_t>(k)] * nc_ + arc_col_[static_cast<std::size_t>(k)])];
        // u_i + v_j = c_ij on every basic arc.
        pot_[static_cast<std::size_t>(child)] = c - pot_[static_cast<std::size_t>(node)];
        stack_.push_back(child);
      }
    }
    if (visited != n) throw SolverError("transport basis is not a spanning tree");
  }

  /// Re-roots the detached subtree containing `start` below `anchor` via
  /// basic arc `k`, updating parents, depths and potentials.
  void rehang(Eigen::Index start, Eigen::Index anchor, Eigen::Index k) {
    auto attach = [&](Eigen::Index child, Eigen::Index node, Eigen::Index arc) {
      parent_[static_cast<std::size_t>(child)] = node;
      parent_arc_[static_cast<std::size_t>(child)] = arc;
      depth_[static_cast<std::size_t>(child)] = depth_[static_cast<std::size_t>(node)] + 1;
      const double c = cost_[static_cast<std::size_t>(arc_row_[static_cast<std::size_t>(arc)] * nc_ + arc_col_[static_cast<std::size_t>(arc)])];
      pot_[static_cast<std::size_t>(child)] = c - pot_[static_cast<std::size_t>(node)];
    };
    attach(start, anchor, k);
    stack_.clear();
    stack_.push_back(start);
    while (!stack_.empty()) {
      const Eigen::Index node = stack_.back();
      stack_.pop_back();
      for (Eigen::Index a : adj_[static_cast<std::size_t>(node)]) {
        if (a == parent_arc_[static_cast<std::size_t>(node)]) continue;
        const Eigen::Index child = other_end(a, node);
        attach(child, node, a);
        stack_.push_back(child);
      }
    }
  }

  /// Pivots arc (i, j) into the basis. Returns true for a degenerate pivot.
  bool pivot(Eigen::Index i, Eigen::Index j) {
    // Tree path from column j and row i up to their common ancestor.
    Eigen::Index a = i, b = nr_ + j;
    up_row_.clear();
    up_col_.clear();
    while (a != b) {
      if (depth_[static_cast<std::size_t>(a)] >= depth_[static_cast<std::size_t>(b)]) {
        up_row_.push_back(parent_arc_[static_cast<std::size_t>(a)]);
        a = parent_[static_cast<std::size_t>(a)];
      } else {
        up_col_.push_back(parent_arc_[static_cast<std::size_t>(b)]);
        b = parent_[static_cast<std::size_t>(b)];
      }
    }
    // Cycle: entering arc (+), then the tree path from j back to i with
    // alternating signs starting with (-).
    cycle_.assign(up_col_.begin(), up_col_.end());
    cycle_.insert(cycle_.end(), up_row_.rbegin(), up_row_.rend());
    double theta = std::numeric_limits<double>::infinity();
    Eigen::Index leave = -1;
    std::size_t leave_pos = 0;
    Eigen::Index leave_id = std::numeric_limits<Eigen::Index>::max();
    for (std::size_t p = 0; p < cycle_.size(); p += 2) {
      const Eigen::Index k = cycle_[p];
      const double f = std::max(0.0, flow_[static_cast<std::size_t>(k)]);
      const Eigen::Index id = arc_row_[static_cast<std::size_t>(k)] * nc_ + arc_col_[static_cast<std::size_t>(k)];
      if (f < theta || (f == theta && id < leave_id)) {
        theta = f;
        leave = k;
        leave_pos = p;
        leave_id = id;
      }
    }
    for (std::size_t p = 0; p < cycle_.size(); ++p) {
      double& f = flow_[static_cast<std::size_t>(cycle_[p])];
      f += (p % 2 == 0) ? -theta : theta;
    }
    // Removing the leaving arc detaches the subtree on the side of the
    // entering arc's column end (leaving arc on the column path) or row end.
    const bool column_side = leave_pos < up_col_.size();
    unlink(leave);
    set_arc(leave, i, j, theta);
    if (column_side) rehang(nr_ + j, i, leave);
    else rehang(i, nr_ + j, leave);
    return theta <= 0.0;
  }

  std::vector<Eigen::Index> rows_;
  std::vector<double> supply_, demand_;
  Eigen::Index nr_ = 0, nc_ = 0;
  std::vector<double> cost_;
  double cmax_ = 1.0;

  std::vector<Eigen::Index> arc_row_, arc_col_;
  std::vector<double> flow_;
  std::vector<char> basic_;
  std::vector<std::vector<Eigen::Index>> adj_;
  std::vector<Eigen::Index> parent_, parent_arc_, depth_;
  std::vector<double> pot_;
  std::vector<Eigen::Index> stack_, up_row_, up_col_, cycle_;
};

}  // namespace detail

struct ExactSolverOptions {
  double pricing_tol = 1e-11;  // relative to max |c_ij|
  int max_pivots = 0;          // 0: automatic
};

/// Exact optimal plan by the transportation simplex. Rows with zero weight
/// are removed before solving; the returned plan carries the LP duality gap
/// and the most negative reduced cost as an optimality certificate.
inline TransportPlan solve_exact(const CostMatrix& c, const WeightVector& w, const ExactSolverOptions& opts = {}) {
  detail::require_plan_inputs(c, w);
  const Eigen::Index m = w.size();
  std::vector<Eigen::Index> rows;
  std::vector<double> supply;
  for (Eigen::Index i = 0; i < m; ++i)
    if (w[i] > 0.0) {
      rows.push_back(i);
      supply.push_back(static_cast<double>(m) * w[i]);
    }
  std::vector<double> demand(static_cast<std::size_t>(m), 1.0);

  TransportPlan plan;
  plan.solver = TransportSolver::kExact;
  if (rows.size() == 1) {
    plan.d = Matrix::Zero(m, m);
    plan.d.row(rows[0]).setOnes();
    plan.objective = plan.d.cwiseProduct(c.c).sum();
    return plan;
  }

  // Initial basis: north-west corner along the leading principal coordinate
  // (optimal outright for collinear points).
  std::vector<Eigen::Index> all(static_cast<std::size_t>(m));
  std::iota(all.begin(), all.end(), Eigen::Index{0});
  const std::vector<Eigen::Index> col_order = detail::principal_order(c.c, all);
  std::vector<Eigen::Index> rank(static_cast<std::size_t>(m));
  for (std::size_t p = 0; p < col_order.size(); ++p) rank[static_cast<std::size_t>(col_order[p])] = static_cast<Eigen::Index>(p);
  std::vector<Eigen::Index> row_order(rows.size());
  std::iota(row_order.begin(), row_order.end(), Eigen::Index{0});
  std::stable_sort(row_order.begin(), row_order.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return rank[static_cast<std::size_t>(rows[a])] < rank[static_cast<std::size_t>(rows[b])]; });

  detail::TransportationSimplex simplex(c.c, rows, supply, demand);
  simplex.initialize(row_order, col_order);
  const int max_pivots = opts.max_pivots > 0 ? opts.max_pivots : static_cast<int>(std::min<long long>(
      std::numeric_limits<int>::max() / 2, 50LL * m * m + 10000));
  plan.iterations = simplex.solve(max_pivots, opts.pricing_tol);
  plan.d = simplex.plan();
  double primal = 0.0, dual = 0.0, min_reduced = 0.0;
  simplex.certificate(primal, dual, min_reduced);
  plan.objective = plan.d.cwiseProduct(c.c).sum();
  plan.duality_gap = std::abs(primal - dual);
  plan.min_reduced_cost = min_reduced;
  return plan;
}

/// Reference scale the costs are divided by before regularizing, so that
/// lambda is comparable across state magnitudes.
enum class CostScale { kRaw, kMax, kMean };

inline const char* to_string(CostScale s) {
  switch (s) {
    case CostScale::kRaw: return "raw";
    case CostScale::kMax: return "max";
    case CostScale::kMean: return "mean";
  }
  return "unknown";
}

struct SinkhornOptions {
  int max_iter = 10000;
  double tol = 1e-8;
  bool log_domain = true;
  /// Anneal the regularization from the cost scale down to 1/lambda.
  bool epsilon_scaling = true;
  CostScale cost_scale = CostScale::kMax;
};

/// Factor dividing the costs under `scale`; 1 when the costs vanish.
inline double cost_scale_factor(const CostMatrix& c, CostScale scale) {
  const auto m = c.size();
  double f = 1.0;
  if (scale == CostScale::kMax) f = c.c.maxCoeff();
  else if (scale == CostScale::kMean && m > 1) f = c.c.sum() / static_cast<double>(m * (m - 1));
  return f > 0.0 ? f : 1.0;
}

namespace detail {

/// Moves a nearly feasible plan onto the exact marginals D 1 = M w and
/// D^T 1 = 1: shrink rows and columns that overshoot, then spread the
/// remaining deficit as a rank-one update (Altschuler, Weed and Rigollet).
/// The change is bounded by the marginal residual.
inline void round_to_marginals(Matrix& d, const WeightVector& w) {
  const auto m = d.rows();
  const Vector rows_target = static_cast<double>(m) * w.values();
  const Vector row_sums = d.rowwise().sum();
  for (Eigen::Index i = 0; i < m; ++i)
    if (row_sums(i) > rows_target(i)) d.row(i) *= row_sums(i) > 0.0 ? rows_target(i) / row_sums(i) : 0.0;
  const Vector col_sums = d.colwise().sum().transpose();
  for (Eigen::Index j = 0; j < m; ++j)
    if (col_sums(j) > 1.0) d.col(j) /= col_sums(j);
  const Vector row_gap = rows_target - d.rowwise().sum();
  const Vector col_gap = Vector::Ones(m) - d.colwise().sum().transpose();
  const double total = col_gap.sum();
  if (total > 0.0) d += row_gap * col_gap.transpose() / total;
}

inline TransportPlan sinkhorn_linear(const CostMatrix& c, const WeightVector& w, double lambda, const SinkhornOptions& opts) {
  const Eigen::Index m = w.size();
  const Vector a = static_cast<double>(m) * w.values();
  // Kernel of the reference plan w 1^T.
  // std::exp rather than Eigen's exp, which clamps its argument and would
  // hide underflow.
  Matrix k = (-lambda * c.c).unaryExpr([](double v) { return std::exp(v); });
  k = w.values().asDiagonal() * k;
  for (Eigen::Index j = 0; j < m; ++j)
    if (!(k.col(j).sum() > 0.0))
      throw SolverError("Sinkhorn kernel underflows for lambda = " + std::to_string(lambda) +
                        "; use the log-domain mode");
  Vector u = Vector::Ones(m), v = Vector::Ones(m);
  TransportPlan plan;
  plan.solver = TransportSolver::kSinkhorn;
  plan.lambda = lambda;
  plan.converged = false;
  for (int it = 0; it < opts.max_iter; ++it) {
    const Vector kv = k * v;
    double residual = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) {
      residual = std::max(residual, std::abs(u(i) * kv(i) - a(i)));
      u(i) = a(i) > 0.0 ? a(i) / kv(i) : 0.0;
    }
    const Vector ktu = k.transpose() * u;
    v = ktu.cwiseInverse();
    plan.iterations = it + 1;
    if (it > 0 && residual < opts.tol) {
      plan.converged = true;
      break;
    }
  }
  plan.d = u.asDiagonal() * k * v.asDiagonal();
  round_to_marginals(plan.d, w);
  return plan;
}

/// Log-stabilized Sinkhorn: scaling vectors u, v act on the kernel
/// exp((f + g - c) / eps), and grow only until they are folded back into the
/// potentials f, g. Rows whose kernel underflows are updated in log form.
inline TransportPlan sinkhorn_log(const CostMatrix& c, const WeightVector& w, double lambda, const SinkhornOptions& opts) {
  const Eigen::Index m = w.size();
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < m; ++i)
    if (w[i] > 0.0) rows.push_back(i);
  const auto nr = static_cast<Eigen::Index>(rows.size());
  Vector a(nr), log_a(nr);
  for (Eigen::Index r = 0; r < nr; ++r) {
    a(r) = static_cast<double>(m) * w[rows[r]];
    log_a(r) = std::log(a(r));
  }
  Matrix cr(nr, m);
  for (Eigen::Index r = 0; r < nr; ++r) cr.row(r) = c.c.row(rows[r]);

  const double eps_target = 1.0 / lambda;
  double eps = eps_target;
  if (opts.epsilon_scaling) eps = std::max(eps_target, cr.maxCoeff());
  constexpr double kAbsorb = 1e30;

  Vector f = Vector::Zero(nr), g = Vector::Zero(m), u = Vector::Ones(nr), v = Vector::Ones(m);
  Matrix k(nr, m);
  auto rebuild = [&] {
    for (Eigen::Index j = 0; j < m; ++j)
      for (Eigen::Index r = 0; r < nr; ++r) k(r, j) = std::exp((f(r) + g(j) - cr(r, j)) / eps);
  };
  auto absorb = [&] {
    f.array() += eps * u.array().log();
    g.array() += eps * v.array().log();
    u.setOnes();
    v.setOnes();
    rebuild();
  };
  auto log_row_update = [&](Eigen::Index r) {
    double hi = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < m; ++j) hi = std::max(hi, (g(j) - cr(r, j)) / eps);
    double acc = 0.0;
    for (Eigen::Index j = 0; j < m; ++j) acc += std::exp((g(j) - cr(r, j)) / eps - hi);
    f(r) = eps * (log_a(r) - hi - std::log(acc));
    for (Eigen::Index j = 0; j < m; ++j) k(r, j) = std::exp((f(r) + g(j) - cr(r, j)) / eps);
  };
  auto log_col_update = [&](Eigen::Index j) {
    double hi = -std::numeric_limits<double>::infinity();
    for (Eigen::Index r = 0; r < nr; ++r) hi = std::max(hi, (f(r) - cr(r, j)) / eps);
    double acc = 0.0;
    for (Eigen::Index r = 0; r < nr; ++r) acc += std::exp((f(r) - cr(r, j)) / eps - hi);
    g(j) = -eps * (hi + std::log(acc));
    for (Eigen::Index r = 0; r < nr; ++r) k(r, j) = std::exp((f(r) + g(j) - cr(r, j)) / eps);
  };
  rebuild();

  TransportPlan plan;
  plan.solver = TransportSolver::kSinkhorn;
  plan.lambda = lambda;
  plan.converged = false;
  int total = 0;
  while (true) {
    const bool final_stage = eps <= eps_target * (1.0 + 1e-12);
    const double stage_tol = final_stage ? opts.tol : std::max(opts.tol, 1e-3);
    const int stage_cap = final_stage ? opts.max_iter - total : std::min(200, opts.max_iter - total);
    bool stage_done = false;
    for (int it = 0; it < stage_cap; ++it, ++total) {
      // Row update; the pre-update row sums give the marginal residual.
      Vector kv = k * v;
      if (!(kv.minCoeff() > 1e-280) || !kv.allFinite()) {
        absorb();
        kv = k * v;
      }
      double residual = 0.0;
      for (Eigen::Index r = 0; r < nr; ++r) {
        if (kv(r) > 1e-280) {
          residual = std::max(residual, std::abs(u(r) * kv(r) - a(r)));
          u(r) = a(r) / kv(r);
        } else {
          residual = std::max(residual, a(r));
          u(r) = 1.0;
          log_row_update(r);
        }
      }
      if (it > 0 && residual < stage_tol) {
        stage_done = true;
        ++total;
        break;
      }
      // Column update: column marginals are exact afterwards.
      if (u.maxCoeff() > kAbsorb || u.minCoeff() < 1.0 / kAbsorb) absorb();
      const Vector ktu = k.transpose() * u;
      for (Eigen::Index j = 0; j < m; ++j) {
        if (ktu(j) > 1e-280) {
          v(j) = 1.0 / ktu(j);
        } else {
          v(j) = 1.0;
          log_col_update(j);
        }
      }
      if (u.maxCoeff() > kAbsorb || v.maxCoeff() > kAbsorb || u.minCoeff() < 1.0 / kAbsorb ||
          v.minCoeff() < 1.0 / kAbsorb || !v.allFinite())
        absorb();
    }
    if (final_stage) {
      plan.converged = stage_done;
      break;
    }
    if (total >= opts.max_iter) break;
    absorb();
    eps = std::max(eps_target, 0.5 * eps);
    rebuild();
  }
  absorb();
  // Finish with a column update so that D^T 1 = 1 holds to round-off.
  for (Eigen::Index j = 0; j < m; ++j) log_col_update(j);
  plan.iterations = total;
  plan.d = Matrix::Zero(m, m);
  for (Eigen::Index r = 0; r < nr; ++r)
    for (Eigen::Index j = 0; j < m; ++j) plan.d(rows[r], j) = std::exp((f(r) + g(j) - cr(r, j)) / eps);
  round_to_marginals(plan.d, w);
  return plan;
}

}  // namespace detail

/// Entropy-regularized plan minimizing
///   sum d_ij c_ij + (s/lambda) sum d_ij log(d_ij / d0_ij),  d0 = w 1^T,
/// by alternating marginal scaling, where s is the cost scale chosen in
/// `opts` (1 for raw costs). If `max_iter` is exhausted the last
/// iterate is returned with `converged == false`.
inline TransportPlan solve_sinkhorn(const CostMatrix& c, const WeightVector& w, double lambda,
                                    const SinkhornOptions& opts = {}) {
  detail::require_plan_inputs(c, w);
  if (!(lambda > 0.0)) throw InvalidArgument("lambda must be positive");
  // Solving with costs c / s at lambda is solving with c at lambda / s.
  const double effective = lambda / cost_scale_factor(c, opts.cost_scale);
  TransportPlan plan = opts.log_domain ? detail::sinkhorn_log(c, w, effective, opts) : detail::sinkhorn_linear(c, w, effective, opts);
  plan.lambda = lambda;
  plan.objective = plan.d.cwiseProduct(c.c).sum();
  double entropy = 0.0;
  for (Eigen::Index j = 0; j < plan.d.cols(); ++j)
    for (Eigen::Index i = 0; i < plan.d.rows(); ++i) {
      const double d = plan.d(i, j);
      if (d > 0.0) entropy += d * std::log(d / w[i]);
    }
  plan.regularized_objective = plan.objective + entropy / effective;
  return plan;
}

/// Exact plan for scalar samples under squared distance: sort, then fill
/// mass monotonically.
inline TransportPlan solve_1d(const Vector& x, const WeightVector& w) {
  if (x.size() != w.size()) throw DimensionMismatch("solve_1d: sample and weight lengths differ");
  if (!x.allFinite()) throw InvalidArgument("samples must be finite");
  const Eigen::Index m = x.size();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(m));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return x(a) < x(b); });

  TransportPlan plan;
  plan.solver = TransportSolver::kSorted1d;
  plan.d = Matrix::Zero(m, m);
  std::size_t a = 0, b = 0;
  double s = static_cast<double>(m) * w[order[0]];
  double t = 1.0;
  while (a < order.size() && b < order.size()) {
    const double f = std::max(0.0, std::min(s, t));
    plan.d(order[a], order[b]) += f;
    s -= f;
    t -= f;
    if (a + 1 == order.size() && b + 1 == order.size()) break;
    if (b + 1 == order.size() || (a + 1 < order.size() && s <= t)) {
      ++a;
      s = static_cast<double>(m) * w[order[a]];
    } else {
      ++b;
      t = 1.0;
    }
  }
  for (Eigen::Index j = 0; j < m; ++j)
    for (Eigen::Index i = 0; i < m; ++i) plan.objective += plan.d(i, j) * (x(i) - x(j)) * (x(i) - x(j));
  return plan;
}

}  // namespace lets
