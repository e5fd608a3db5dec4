#include "cebd/transport.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>

#include "cebd/error.hpp"

namespace cebd {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
// Pricing threshold on costs normalised to max |c| = 1.
constexpr double kPriceEps = 1e-11;

void check_weights(const VectorXd& w, const char* what, double tol) {
  if (w.size() == 0) {
    throw Error(ErrorCode::InfeasibleMarginals, std::string(what) + " weights are empty");
  }
  if (!w.allFinite() || w.minCoeff() < 0.0) {
    throw Error(ErrorCode::InfeasibleMarginals, std::string(what) + " weights must be nonnegative");
  }
  if (std::abs(w.sum() - 1.0) > tol) {
    std::ostringstream os;
    os << what << " weights sum to " << w.sum() << ", expected 1";
    throw Error(ErrorCode::InfeasibleMarginals, os.str());
  }
}

void check_size(Eigen::Index n, Eigen::Index r, const LpOptions& opts) {
  if (n * r > opts.max_entries) {
    throw Error(ErrorCode::ProblemTooLarge,
                "cost matrix has " + std::to_string(n * r) + " entries; subsample below " +
                    std::to_string(opts.max_entries));
  }
}

// Network simplex on the complete bipartite graph rows -> cols with an
// artificial root. Follows the strongly feasible spanning tree scheme: the
// leaving arc is the last blocking arc met when walking the cycle in the
// direction of flow.
class TransportSimplex {
 public:
  TransportSimplex(const MatrixXd& cost, const VectorXd& supply, const VectorXd& demand)
      : n_(supply.size()), r_(demand.size()), nodes_(n_ + r_ + 1), root_(n_ + r_) {
    scale_ = cost.size() > 0 ? cost.cwiseAbs().maxCoeff() : 0.0;
    if (!(scale_ > 0.0)) scale_ = 1.0;
    cost_.resize(std::size_t(n_ * r_));
    for (Eigen::Index i = 0; i < n_; ++i) {
      for (Eigen::Index j = 0; j < r_; ++j) cost_[std::size_t(i * r_ + j)] = cost(i, j) / scale_;
    }
    art_cost_ = double(nodes_) * 2.0;
    const Eigen::Index arcs = n_ * r_ + n_ + r_;
    flow_.assign(std::size_t(arcs), 0.0);
    in_tree_.assign(std::size_t(arcs), 0);
    parent_.assign(std::size_t(nodes_), -1);
    pred_.assign(std::size_t(nodes_), -1);
    up_.assign(std::size_t(nodes_), 0);
    depth_.assign(std::size_t(nodes_), 0);
    pi_.assign(std::size_t(nodes_), 0.0);
    children_.assign(std::size_t(nodes_), {});
    balance_.assign(std::size_t(nodes_), 0.0);
    art_up_.assign(std::size_t(n_ + r_), 0);

    for (Eigen::Index k = 0; k < n_ + r_; ++k) {
      const double b = k < n_ ? supply[k] : -demand[k - n_];
      balance_[std::size_t(k)] = b;
      const Eigen::Index a = n_ * r_ + k;
      parent_[std::size_t(k)] = root_;
      pred_[std::size_t(k)] = a;
      depth_[std::size_t(k)] = 1;
      in_tree_[std::size_t(a)] = 1;
      children_[std::size_t(root_)].push_back(k);
      if (b >= 0.0) {
        art_up_[std::size_t(k)] = 1;  // k -> root, zero cost
        up_[std::size_t(k)] = 1;
        flow_[std::size_t(a)] = b;
        pi_[std::size_t(k)] = 0.0;
      } else {
        up_[std::size_t(k)] = 0;  // root -> k
        flow_[std::size_t(a)] = -b;
        pi_[std::size_t(k)] = art_cost_;
      }
    }
  }

  void run(long max_pivots) {
    const Eigen::Index arcs = n_ * r_;
    block_ = std::max<Eigen::Index>(10, Eigen::Index(std::sqrt(double(arcs))));
    const long stall_limit = 50L * long(n_ + r_);
    long degenerate = 0;
    bool bland = false;
    for (;;) {
      const Eigen::Index in = bland ? find_entering_bland() : find_entering_block();
      if (in < 0) break;
      if (pivots_ >= max_pivots) {
        throw Error(ErrorCode::CycleLimit,
                    "network simplex exceeded " + std::to_string(max_pivots) + " pivots");
      }
      const double delta = pivot(in);
      ++pivots_;
      if (bland) ++bland_pivots_;
      if (delta > 0.0) {
        degenerate = 0;
        bland = false;
      } else if (++degenerate > stall_limit) {
        bland = true;
      }
    }
  }

  Coupling result(const MatrixXd& cost, const VectorXd& supply, const VectorXd& demand) {
    recompute_tree_flows();
    Coupling c;
    c.rows = n_;
    c.cols = r_;
    c.row_marginal = supply;
    c.col_marginal = demand;
    c.iterations = pivots_;
    c.bland_pivots = bland_pivots_;
    for (Eigen::Index k = 0; k < n_ + r_; ++k) {
      if (flow_[std::size_t(n_ * r_ + k)] > 1e-9) {
        throw Error(ErrorCode::InfeasibleMarginals,
                    "network simplex finished with flow on an artificial arc");
      }
    }
    double obj = 0.0;
    double min_rc = kInf;
    double max_cs = 0.0;
    for (Eigen::Index i = 0; i < n_; ++i) {
      for (Eigen::Index j = 0; j < r_; ++j) {
        const std::size_t a = std::size_t(i * r_ + j);
        const double rc = reduced_cost(Eigen::Index(a)) * scale_;
        min_rc = std::min(min_rc, rc);
        const double f = flow_[a];
        if (f > 0.0) {
          c.entries.push_back({i, j, f});
          obj += f * cost(i, j);
          if (f > 1e-12) max_cs = std::max(max_cs, std::abs(rc));
        }
      }
    }
    c.objective = obj;
    c.min_reduced_cost = min_rc;
    c.max_slackness_violation = max_cs;
    c.row_duals.resize(n_);
    c.col_duals.resize(r_);
    for (Eigen::Index i = 0; i < n_; ++i) c.row_duals[i] = -pi_[std::size_t(i)] * scale_;
    for (Eigen::Index j = 0; j < r_; ++j) c.col_duals[j] = pi_[std::size_t(n_ + j)] * scale_;
    return c;
  }

 private:
  Eigen::Index source(Eigen::Index a) const {
    if (a < n_ * r_) return a / r_;
    const Eigen::Index k = a - n_ * r_;
    return art_up_[std::size_t(k)] ? k : root_;
  }
  Eigen::Index target(Eigen::Index a) const {
    if (a < n_ * r_) return n_ + a % r_;
    const Eigen::Index k = a - n_ * r_;
    return art_up_[std::size_t(k)] ? root_ : k;
  }
  double arc_cost(Eigen::Index a) const {
    if (a < n_ * r_) return cost_[std::size_t(a)];
    return art_up_[std::size_t(a - n_ * r_)] ? 0.0 : art_cost_;
  }
  double reduced_cost(Eigen::Index a) const {
    return arc_cost(a) + pi_[std::size_t(source(a))] - pi_[std::size_t(target(a))];
  }

  Eigen::Index find_entering_block() {
    const Eigen::Index arcs = n_ * r_;
    double best = -kPriceEps;
    Eigen::Index best_arc = -1;
    Eigen::Index count = block_;
    for (Eigen::Index step = 0; step < arcs; ++step) {
      const Eigen::Index a = next_arc_;
      next_arc_ = (next_arc_ + 1 == arcs) ? 0 : next_arc_ + 1;
      if (!in_tree_[std::size_t(a)]) {
        const Eigen::Index i = a / r_;
        const double rc = cost_[std::size_t(a)] + pi_[std::size_t(i)] - pi_[std::size_t(n_ + a % r_)];
        if (rc < best) {
          best = rc;
          best_arc = a;
        }
      }
      if (--count == 0) {
        if (best_arc >= 0) return best_arc;
        count = block_;
      }
    }
    return best_arc;
  }

  Eigen::Index find_entering_bland() const {
    for (Eigen::Index a = 0; a < n_ * r_; ++a) {
      if (!in_tree_[std::size_t(a)] && reduced_cost(a) < -kPriceEps) return a;
    }
    return -1;
  }

  void remove_child(Eigen::Index p, Eigen::Index c) {
    auto& ch = children_[std::size_t(p)];
    auto it = std::find(ch.begin(), ch.end(), c);
    *it = ch.back();
    ch.pop_back();
  }

  // Returns the amount of flow pushed around the cycle.
  double pivot(Eigen::Index in) {
    const Eigen::Index first = source(in);
    const Eigen::Index second = target(in);
    Eigen::Index u = first, v = second;
    while (u != v) {
      if (depth_[std::size_t(u)] >= depth_[std::size_t(v)]) {
        u = parent_[std::size_t(u)];
      } else {
        v = parent_[std::size_t(v)];
      }
    }
    const Eigen::Index join = u;

    double delta = kInf;
    Eigen::Index u_out = -1;
    int side = 0;
    for (Eigen::Index w = first; w != join; w = parent_[std::size_t(w)]) {
      const double d = up_[std::size_t(w)] ? flow_[std::size_t(pred_[std::size_t(w)])] : kInf;
      if (d < delta) {
        delta = d;
        u_out = w;
        side = 1;
      }
    }
    for (Eigen::Index w = second; w != join; w = parent_[std::size_t(w)]) {
      const double d = up_[std::size_t(w)] ? kInf : flow_[std::size_t(pred_[std::size_t(w)])];
      if (d <= delta) {
        delta = d;
        u_out = w;
        side = 2;
      }
    }
    if (side == 0) throw Error(ErrorCode::Unbounded, "transportation problem is unbounded");

    if (delta > 0.0) {
      flow_[std::size_t(in)] += delta;
      for (Eigen::Index w = first; w != join; w = parent_[std::size_t(w)]) {
        flow_[std::size_t(pred_[std::size_t(w)])] += up_[std::size_t(w)] ? -delta : delta;
      }
      for (Eigen::Index w = second; w != join; w = parent_[std::size_t(w)]) {
        flow_[std::size_t(pred_[std::size_t(w)])] += up_[std::size_t(w)] ? delta : -delta;
      }
    }

    const double sigma = reduced_cost(in);
    const Eigen::Index u_in = side == 1 ? first : second;
    const Eigen::Index v_in = side == 1 ? second : first;
    const Eigen::Index out = pred_[std::size_t(u_out)];
    in_tree_[std::size_t(out)] = 0;
    flow_[std::size_t(out)] = 0.0;
    in_tree_[std::size_t(in)] = 1;

    // Re-hang the subtree of u_out from u_in.
    path_.clear();
    for (Eigen::Index w = u_in;; w = parent_[std::size_t(w)]) {
      path_.push_back(w);
      if (w == u_out) break;
    }
    remove_child(parent_[std::size_t(u_out)], u_out);
    for (std::size_t t = path_.size() - 1; t >= 1; --t) {
      const Eigen::Index p = path_[t];
      const Eigen::Index c = path_[t - 1];
      remove_child(p, c);
      parent_[std::size_t(p)] = c;
      pred_[std::size_t(p)] = pred_[std::size_t(c)];
      up_[std::size_t(p)] = !up_[std::size_t(c)];
      children_[std::size_t(c)].push_back(p);
    }
    parent_[std::size_t(u_in)] = v_in;
    pred_[std::size_t(u_in)] = in;
    up_[std::size_t(u_in)] = side == 1 ? 1 : 0;
    children_[std::size_t(v_in)].push_back(u_in);

    const double shift = side == 1 ? -sigma : sigma;
    stack_.clear();
    stack_.push_back(u_in);
    while (!stack_.empty()) {
      const Eigen::Index w = stack_.back();
      stack_.pop_back();
      depth_[std::size_t(w)] = depth_[std::size_t(parent_[std::size_t(w)])] + 1;
      pi_[std::size_t(w)] += shift;
      for (Eigen::Index c : children_[std::size_t(w)]) stack_.push_back(c);
    }
    return delta;
  }

  // Basic flows are determined by the tree and the balances; recomputing them
  // removes drift accumulated over many pivots.
  void recompute_tree_flows() {
    std::vector<Eigen::Index> order;
    order.reserve(std::size_t(nodes_));
    stack_.assign(1, root_);
    while (!stack_.empty()) {
      const Eigen::Index w = stack_.back();
      stack_.pop_back();
      order.push_back(w);
      for (Eigen::Index c : children_[std::size_t(w)]) stack_.push_back(c);
    }
    std::vector<double> excess = balance_;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      const Eigen::Index w = *it;
      if (w == root_) continue;
      const double e = excess[std::size_t(w)];
      double f = up_[std::size_t(w)] ? e : -e;
      if (f < 0.0) {
        if (f < -1e-9) {
          throw Error(ErrorCode::InfeasibleMarginals, "negative basic flow after solve");
        }
        f = 0.0;
      }
      flow_[std::size_t(pred_[std::size_t(w)])] = f;
      excess[std::size_t(parent_[std::size_t(w)])] += e;
    }
  }

  Eigen::Index n_, r_, nodes_, root_;
  double scale_ = 1.0;
  double art_cost_ = 0.0;
  std::vector<double> cost_;
  std::vector<double> flow_;
  std::vector<char> in_tree_;
  std::vector<Eigen::Index> parent_, pred_;
  std::vector<char> up_;
  std::vector<Eigen::Index> depth_;
  std::vector<double> pi_;
  std::vector<std::vector<Eigen::Index>> children_;
  std::vector<double> balance_;
  std::vector<char> art_up_;
  std::vector<Eigen::Index> path_, stack_;
  Eigen::Index block_ = 10;
  Eigen::Index next_arc_ = 0;
  long pivots_ = 0;
  long bland_pivots_ = 0;
};

}  // namespace

CostMatrix squared_distance_cost(const MatrixXd& from, const MatrixXd& to) {
  CostMatrix c(from.rows(), to.rows());
  for (Eigen::Index j = 0; j < to.rows(); ++j) {
    c.col(j) = (from.rowwise() - to.row(j)).rowwise().squaredNorm();
  }
  return c;
}

VectorXd Coupling::row_sums() const {
  VectorXd s = VectorXd::Zero(rows);
  for (const auto& e : entries) s[e.row] += e.mass;
  return s;
}

VectorXd Coupling::col_sums() const {
  VectorXd s = VectorXd::Zero(cols);
  for (const auto& e : entries) s[e.col] += e.mass;
  return s;
}

MatrixXd Coupling::dense() const {
  MatrixXd d = MatrixXd::Zero(rows, cols);
  for (const auto& e : entries) d(e.row, e.col) += e.mass;
  return d;
}

Coupling solve_ot(const CostMatrix& cost, const VectorXd& row_w, const VectorXd& col_w,
                  const LpOptions& opts) {
  if (cost.rows() != row_w.size() || cost.cols() != col_w.size()) {
    throw Error(ErrorCode::InfeasibleMarginals, "solve_ot: cost shape does not match marginals");
  }
  if (!cost.allFinite()) throw Error(ErrorCode::InfeasibleMarginals, "solve_ot: non-finite cost");
  check_weights(row_w, "row", opts.marginal_tol);
  check_weights(col_w, "column", opts.marginal_tol);
  check_size(cost.rows(), cost.cols(), opts);
  // Balance exactly so the artificial root carries no flow at the optimum.
  const VectorXd demand = col_w * (row_w.sum() / col_w.sum());
  TransportSimplex simplex(cost, row_w, demand);
  const long budget = opts.max_pivots > 0
                          ? opts.max_pivots
                          : 1000L + 200L * long(cost.rows() + cost.cols()) * long(std::max<Eigen::Index>(
                                                  1, std::min(cost.rows(), cost.cols())));
  simplex.run(budget);
  Coupling c = simplex.result(cost, row_w, demand);
  c.col_marginal = col_w;
  return c;
}

// ---------------------------------------------------------------------------
// Constraint functions

double ConstraintFunction::operator()(const Eigen::Ref<const VectorXd>& eta) const {
  switch (kind) {
    case ConstraintKind::Constant:
      return 1.0;
    case ConstraintKind::Monomial: {
      double v = 1.0;
      for (std::size_t c = 0; c < exponents.size(); ++c) {
        v *= std::pow(eta[Eigen::Index(c)], exponents[c]);
      }
      return v;
    }
    case ConstraintKind::BoxDistance: {
      const VectorXd clamped = eta.cwiseMax(lower).cwiseMin(upper);
      return (eta - clamped).norm();
    }
    case ConstraintKind::HalfSpaceDistance: {
      const double slack = offset - normal.dot(eta);
      return std::max(0.0, slack) / normal.norm();
    }
  }
  return 0.0;
}

std::string ConstraintFunction::describe() const {
  std::ostringstream os;
  switch (kind) {
    case ConstraintKind::Constant:
      os << "1";
      break;
    case ConstraintKind::Monomial:
      os << "eta^(";
      for (std::size_t c = 0; c < exponents.size(); ++c) os << (c ? "," : "") << exponents[c];
      os << ")";
      break;
    case ConstraintKind::BoxDistance:
      os << "dist(eta, box)";
      break;
    case ConstraintKind::HalfSpaceDistance:
      os << "dist(eta, half-space)";
      break;
  }
  return os.str();
}

ConstraintFunction ConstraintFunction::constant() { return {}; }

ConstraintFunction ConstraintFunction::monomial(std::vector<int> exponents) {
  ConstraintFunction f;
  f.kind = ConstraintKind::Monomial;
  f.exponents = std::move(exponents);
  return f;
}

ConstraintFunction ConstraintFunction::box_distance(VectorXd lower, VectorXd upper) {
  ConstraintFunction f;
  f.kind = ConstraintKind::BoxDistance;
  f.lower = std::move(lower);
  f.upper = std::move(upper);
  return f;
}

ConstraintFunction ConstraintFunction::half_space_distance(VectorXd normal, double offset) {
  ConstraintFunction f;
  f.kind = ConstraintKind::HalfSpaceDistance;
  f.normal = std::move(normal);
  f.offset = offset;
  return f;
}

ConstraintSpec ConstraintSpec::moments(Eigen::Index m, int max_degree) {
  ConstraintSpec spec;
  std::vector<int> e(std::size_t(m), 0);
  for (int degree = 1; degree <= max_degree; ++degree) {
    // Enumerate exponent vectors of total degree `degree` in graded order.
    std::fill(e.begin(), e.end(), 0);
    auto emit = [&](auto&& self, std::size_t pos, int left) -> void {
      if (pos + 1 == e.size()) {
        e[pos] = left;
        spec.add(ConstraintFunction::monomial(e));
        return;
      }
      for (int k = left; k >= 0; --k) {
        e[pos] = k;
        self(self, pos + 1, left - k);
      }
    };
    if (m > 0) emit(emit, 0, degree);
  }
  return spec;
}

void ConstraintSpec::add(ConstraintFunction fn, double target) {
  functions.push_back(std::move(fn));
  targets.conservativeResize(targets.size() + 1);
  targets[targets.size() - 1] = target;
}

MatrixXd ConstraintSpec::evaluate(const MatrixXd& atoms) const {
  MatrixXd out(atoms.rows(), size());
  for (Eigen::Index j = 0; j < atoms.rows(); ++j) {
    const VectorXd eta = atoms.row(j).transpose();
    for (Eigen::Index l = 0; l < size(); ++l) out(j, l) = functions[std::size_t(l)](eta);
  }
  return out;
}

void ConstraintSpec::set_targets_from(const DiscreteDistribution& prior) {
  targets = evaluate(prior.atoms).transpose() * prior.weights;
}

// ---------------------------------------------------------------------------
// Moment-constrained coupling LP.
//
// Every variable x_ij belongs to exactly one row-sum constraint, so a basis
// holds one "key" variable per row plus k further basic variables (real or
// artificial). Eliminating the keys leaves a k x k working matrix W whose
// column for a non-key x_ij is psi(grid_j) - psi(grid_key(i)).

namespace {

struct NonKey {
  bool artificial = false;
  Eigen::Index row = -1;  // real: row i
  Eigen::Index col = -1;  // real: grid column j; artificial: constraint index
  double sign = 1.0;      // artificial column is sign * e_col
};

class GubSimplex {
 public:
  GubSimplex(const MatrixXd& cost, const VectorXd& row_w, const MatrixXd& psi, const VectorXd& targets)
      : n_(cost.rows()), r_(cost.cols()), k_(psi.cols()), a_(row_w) {
    cost_scale_ = cost.size() > 0 ? cost.cwiseAbs().maxCoeff() : 0.0;
    if (!(cost_scale_ > 0.0)) cost_scale_ = 1.0;
    cost_ = cost / cost_scale_;
    psi_scale_.resize(k_);
    for (Eigen::Index l = 0; l < k_; ++l) {
      double s = std::max(psi.col(l).cwiseAbs().maxCoeff(), std::abs(targets[l]));
      psi_scale_[l] = s > 0.0 ? s : 1.0;
    }
    psi_ = psi * psi_scale_.cwiseInverse().asDiagonal();
    t_ = targets.cwiseQuotient(psi_scale_);
    key_.resize(std::size_t(n_));
    for (Eigen::Index i = 0; i < n_; ++i) {
      Eigen::Index j;
      cost_.row(i).minCoeff(&j);
      key_[std::size_t(i)] = j;
    }
    const VectorXd resid = t_ - key_moments();
    for (Eigen::Index l = 0; l < k_; ++l) {
      nonkey_.push_back({true, -1, l, resid[l] >= 0.0 ? 1.0 : -1.0});
    }
  }

  // Runs both phases. Returns the phase-1 objective.
  void solve(long max_pivots, double feas_tol) {
    phase_ = 1;
    iterate(max_pivots);
    factor();
    double infeas = 0.0;
    Eigen::Index worst = -1;
    double worst_val = 0.0;
    for (Eigen::Index q = 0; q < k_; ++q) {
      if (nonkey_[std::size_t(q)].artificial) {
        const double v = std::max(0.0, xq_[q]);
        infeas += v;
        if (v > worst_val) {
          worst_val = v;
          worst = nonkey_[std::size_t(q)].col;
        }
      }
    }
    phase1_objective_ = infeas;
    if (infeas > feas_tol) {
      std::ostringstream os;
      os << "moment constraints infeasible on the grid: phase-1 objective " << infeas
         << ", most violated constraint " << worst;
      throw Error(ErrorCode::Infeasible, os.str());
    }
    phase_ = 2;
    iterate(max_pivots);
    factor();
  }

  Coupling result(const MatrixXd& cost, const VectorXd& row_w, const MatrixXd& psi,
                  const VectorXd& targets) const {
    Coupling c;
    c.rows = n_;
    c.cols = r_;
    c.row_marginal = row_w;
    c.iterations = pivots_;
    c.bland_pivots = bland_pivots_;
    MatrixXd dense_keys = MatrixXd::Zero(0, 0);
    std::vector<CouplingEntry> entries;
    for (Eigen::Index i = 0; i < n_; ++i) {
      const double v = xkey_[i];
      if (v > 0.0) entries.push_back({i, key_[std::size_t(i)], v});
    }
    for (Eigen::Index q = 0; q < k_; ++q) {
      const auto& nk = nonkey_[std::size_t(q)];
      if (!nk.artificial && xq_[q] > 0.0) entries.push_back({nk.row, nk.col, xq_[q]});
    }
    std::sort(entries.begin(), entries.end(), [](const CouplingEntry& a, const CouplingEntry& b) {
      return a.row != b.row ? a.row < b.row : a.col < b.col;
    });
    c.entries = std::move(entries);
    double obj = 0.0;
    VectorXd achieved = VectorXd::Zero(psi.cols());
    for (const auto& e : c.entries) {
      obj += e.mass * cost(e.row, e.col);
      achieved += e.mass * psi.row(e.col).transpose();
    }
    c.objective = obj;
    c.constraint_residuals = achieved - targets;
    c.row_duals = u_ * cost_scale_;
    c.constraint_duals = y_.cwiseQuotient(psi_scale_) * cost_scale_;

    double min_rc = kInf;
    double max_cs = 0.0;
    const VectorXd s = psi_ * y_;
    for (Eigen::Index i = 0; i < n_; ++i) {
      for (Eigen::Index j = 0; j < r_; ++j) {
        const double rc = (cost_(i, j) - u_[i] - s[j]) * cost_scale_;
        min_rc = std::min(min_rc, rc);
      }
    }
    for (const auto& e : c.entries) {
      if (e.mass > 1e-12) {
        const double rc = (cost_(e.row, e.col) - u_[e.row] - s[e.col]) * cost_scale_;
        max_cs = std::max(max_cs, std::abs(rc));
      }
    }
    c.min_reduced_cost = min_rc;
    c.max_slackness_violation = max_cs;
    return c;
  }

  double phase1_objective() const { return phase1_objective_; }

 private:
  VectorXd key_moments() const {
    VectorXd s = VectorXd::Zero(k_);
    for (Eigen::Index i = 0; i < n_; ++i) s += a_[i] * psi_.row(key_[std::size_t(i)]).transpose();
    return s;
  }

  VectorXd column_of(const NonKey& nk) const {
    if (nk.artificial) {
      VectorXd e = VectorXd::Zero(k_);
      e[nk.col] = nk.sign;
      return e;
    }
    return (psi_.row(nk.col) - psi_.row(key_[std::size_t(nk.row)])).transpose();
  }

  double var_cost(const NonKey& nk) const {
    if (nk.artificial) return phase_ == 1 ? 1.0 : 0.0;
    return phase_ == 1 ? 0.0 : cost_(nk.row, nk.col);
  }

  double key_cost(Eigen::Index i) const {
    return phase_ == 1 ? 0.0 : cost_(i, key_[std::size_t(i)]);
  }

  // Rebuilds W, primal values and duals from the current basis.
  void factor() {
    MatrixXd w(k_, k_);
    VectorXd chat(k_);
    for (Eigen::Index q = 0; q < k_; ++q) {
      const auto& nk = nonkey_[std::size_t(q)];
      w.col(q) = column_of(nk);
      chat[q] = var_cost(nk) - (nk.artificial ? 0.0 : key_cost(nk.row));
    }
    lu_.compute(w);
    if (!lu_.isInvertible()) {
      throw Error(ErrorCode::Infeasible, "working basis became singular");
    }
    xq_ = lu_.solve(t_ - key_moments());
    xkey_ = a_;
    for (Eigen::Index q = 0; q < k_; ++q) {
      const auto& nk = nonkey_[std::size_t(q)];
      if (!nk.artificial) xkey_[nk.row] -= xq_[q];
    }
    y_ = lu_.transpose().solve(chat);
    u_.resize(n_);
    for (Eigen::Index i = 0; i < n_; ++i) {
      u_[i] = key_cost(i) - psi_.row(key_[std::size_t(i)]).dot(y_);
    }
  }

  bool is_basic(Eigen::Index i, Eigen::Index j) const {
    if (key_[std::size_t(i)] == j) return true;
    for (const auto& nk : nonkey_) {
      if (!nk.artificial && nk.row == i && nk.col == j) return true;
    }
    return false;
  }

  void iterate(long max_pivots) {
    const long stall_limit = 50L * long(n_ + r_);
    long degenerate = 0;
    bool bland = false;
    for (;;) {
      factor();
      const VectorXd s = psi_ * y_;
      Eigen::Index ei = -1, ej = -1;
      double best = -kPriceEps;
      for (Eigen::Index i = 0; i < n_ && !(bland && ei >= 0); ++i) {
        for (Eigen::Index j = 0; j < r_; ++j) {
          const double c = phase_ == 1 ? 0.0 : cost_(i, j);
          const double rc = c - u_[i] - s[j];
          if (rc < best && !is_basic(i, j)) {
            best = rc;
            ei = i;
            ej = j;
            if (bland) break;
          }
        }
      }
      if (ei < 0) return;
      if (pivots_ >= max_pivots) {
        throw Error(ErrorCode::CycleLimit,
                    "constrained coupling simplex exceeded " + std::to_string(max_pivots) + " pivots");
      }

      // Change of each basic variable per unit increase of x_{ei,ej}.
      const VectorXd de = (psi_.row(ej) - psi_.row(key_[std::size_t(ei)])).transpose();
      const VectorXd dq = -lu_.solve(de);
      VectorXd dkey = VectorXd::Zero(n_);
      dkey[ei] -= 1.0;
      for (Eigen::Index q = 0; q < k_; ++q) {
        const auto& nk = nonkey_[std::size_t(q)];
        if (!nk.artificial) dkey[nk.row] -= dq[q];
      }

      constexpr double piv_tol = 1e-11;
      double ratio = kInf;
      double pivot_mag = 0.0;
      Eigen::Index leave_q = -1, leave_row = -1;
      long leave_index = std::numeric_limits<long>::max();
      auto consider = [&](double value, double change, Eigen::Index q, Eigen::Index row, long index) {
        const double rt = std::max(0.0, value) / -change;
        const double mag = -change;
        bool take = false;
        if (rt < ratio - 1e-12) {
          take = true;
        } else if (rt <= ratio + 1e-12) {
          take = bland ? index < leave_index : mag > pivot_mag;
        }
        if (take) {
          ratio = std::min(rt, ratio);
          pivot_mag = mag;
          leave_q = q;
          leave_row = row;
          leave_index = index;
        }
      };
      for (Eigen::Index q = 0; q < k_; ++q) {
        const auto& nk = nonkey_[std::size_t(q)];
        const long index = nk.artificial ? long(n_ * r_ + nk.col) : long(nk.row * r_ + nk.col);
        if (nk.artificial && phase_ == 2) {
          // Artificial variables are pinned at zero in phase 2.
          if (std::abs(dq[q]) > piv_tol) consider(0.0, -std::abs(dq[q]), q, -1, index);
        } else if (dq[q] < -piv_tol) {
          consider(xq_[q], dq[q], q, -1, index);
        }
      }
      for (Eigen::Index i = 0; i < n_; ++i) {
        if (dkey[i] < -piv_tol) consider(xkey_[i], dkey[i], -1, i, long(i * r_ + key_[std::size_t(i)]));
      }
      if (leave_q < 0 && leave_row < 0) {
        throw Error(ErrorCode::Unbounded, "constrained coupling LP is unbounded");
      }

      const NonKey entering{false, ei, ej, 1.0};
      if (leave_q >= 0) {
        nonkey_[std::size_t(leave_q)] = entering;
      } else if (leave_row == ei) {
        key_[std::size_t(ei)] = ej;
      } else {
        // Promote a non-key of that row to key; the entering variable takes its slot.
        Eigen::Index slot = -1;
        double mag = 0.0;
        for (Eigen::Index q = 0; q < k_; ++q) {
          const auto& nk = nonkey_[std::size_t(q)];
          if (!nk.artificial && nk.row == leave_row && std::abs(dq[q]) >= mag) {
            mag = std::abs(dq[q]);
            slot = q;
          }
        }
        key_[std::size_t(leave_row)] = nonkey_[std::size_t(slot)].col;
        nonkey_[std::size_t(slot)] = entering;
      }
      ++pivots_;
      if (bland) ++bland_pivots_;
      if (ratio > 1e-14) {
        degenerate = 0;
        bland = false;
      } else if (++degenerate > stall_limit) {
        bland = true;
      }
    }
  }

  Eigen::Index n_, r_, k_;
  VectorXd a_;
  MatrixXd cost_;
  double cost_scale_ = 1.0;
  MatrixXd psi_;
  VectorXd psi_scale_;
  VectorXd t_;
  std::vector<Eigen::Index> key_;
  std::vector<NonKey> nonkey_;
  Eigen::FullPivLU<MatrixXd> lu_;
  VectorXd xq_, xkey_, y_, u_;
  int phase_ = 1;
  long pivots_ = 0;
  long bland_pivots_ = 0;
  double phase1_objective_ = 0.0;
};

}  // namespace

Coupling solve_constrained_coupling(const CostMatrix& cost, const VectorXd& row_w,
                                    const ConstraintSpec& constraints, const MatrixXd& grid_atoms,
                                    const LpOptions& opts) {
  if (constraints.size() < 1) {
    throw Error(ErrorCode::Infeasible, "at least one constraint function is required");
  }
  if (cost.rows() != row_w.size() || cost.cols() != grid_atoms.rows()) {
    throw Error(ErrorCode::InfeasibleMarginals, "constrained coupling: shape mismatch");
  }
  check_weights(row_w, "row", opts.marginal_tol);
  check_size(cost.rows(), cost.cols(), opts);
  const MatrixXd psi = constraints.evaluate(grid_atoms);
  if (!psi.allFinite() || !constraints.targets.allFinite()) {
    throw Error(ErrorCode::Infeasible, "constraint functions are not finite on the grid");
  }
  GubSimplex lp(cost, row_w, psi, constraints.targets);
  const long budget = opts.max_pivots > 0 ? opts.max_pivots
                                          : 10000L + 100L * long(cost.rows() + cost.cols()) *
                                                         long(constraints.size() + 1);
  lp.solve(budget, 1e-10);
  return lp.result(cost, row_w, psi, constraints.targets);
}

MatrixXd barycentric_projection(const Coupling& pi, const MatrixXd& atoms) {
  MatrixXd out = MatrixXd::Zero(pi.rows, atoms.cols());
  VectorXd mass = VectorXd::Zero(pi.rows);
  for (const auto& e : pi.entries) {
    out.row(e.row) += e.mass * atoms.row(e.col);
    mass[e.row] += e.mass;
  }
  for (Eigen::Index i = 0; i < pi.rows; ++i) {
    if (!(mass[i] > 0.0)) {
      throw Error(ErrorCode::EmptyRow, "coupling row " + std::to_string(i) + " carries no mass");
    }
    out.row(i) /= mass[i];
  }
  return out;
}

namespace {

// On the line the monotone (quantile) coupling is optimal for squared cost.
double w2_sq_line(const DiscreteDistribution& a, const DiscreteDistribution& b) {
  auto order = [](const DiscreteDistribution& d) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(d.size()));
    std::iota(idx.begin(), idx.end(), Eigen::Index(0));
    std::stable_sort(idx.begin(), idx.end(),
                     [&](Eigen::Index i, Eigen::Index j) { return d.atoms(i, 0) < d.atoms(j, 0); });
    return idx;
  };
  const auto ia = order(a), ib = order(b);
  const double scale = a.weights.sum() / b.weights.sum();
  std::size_t i = 0, j = 0;
  double left_a = a.weights[ia[0]], left_b = b.weights[ib[0]] * scale, total = 0.0;
  while (i < ia.size() && j < ib.size()) {
    const double mass = std::min(left_a, left_b);
    const double d = a.atoms(ia[i], 0) - b.atoms(ib[j], 0);
    total += mass * d * d;
    left_a -= mass;
    left_b -= mass;
    if (left_a <= left_b) {
      if (++i < ia.size()) left_a = a.weights[ia[i]];
    } else {
      if (++j < ib.size()) left_b = b.weights[ib[j]] * scale;
    }
  }
  return total;
}

}  // namespace

double w2_sq(const DiscreteDistribution& a, const DiscreteDistribution& b) {
  a.validate();
  b.validate();
  if (a.dim() != b.dim()) throw Error(ErrorCode::DimensionError, "w2_sq: dimensions differ");
  if (a.dim() == 1) return w2_sq_line(a, b);
  return solve_ot(squared_distance_cost(a.atoms, b.atoms), a.weights, b.weights).objective;
}

}  // namespace cebd
