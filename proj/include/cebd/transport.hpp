#pragma once

// Exact discrete optimal transport and moment-constrained couplings.

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "cebd/distribution.hpp"

namespace cebd {

/// n x r matrix of transport costs.
using CostMatrix = MatrixXd;

/// ||a_i - b_j||^2 for rows a_i of `from` and b_j of `to`.
CostMatrix squared_distance_cost(const MatrixXd& from, const MatrixXd& to);

struct CouplingEntry {
  Eigen::Index row;
  Eigen::Index col;
  double mass;
};

/// Sparse nonnegative mass matrix together with its solver certificate.
struct Coupling {
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  std::vector<CouplingEntry> entries;
  VectorXd row_marginal;  // prescribed row weights
  VectorXd col_marginal;  // prescribed column weights (plain OT); empty otherwise
  double objective = 0.0;

  // Dual multipliers: row_duals u_i, and either column duals v_j (plain OT)
  // or one multiplier per moment constraint.
  VectorXd row_duals;
  VectorXd col_duals;
  VectorXd constraint_duals;
  VectorXd constraint_residuals;

  // Certificates, in units of the original cost.
  double min_reduced_cost = 0.0;         // >= -tol means dual feasible
  double max_slackness_violation = 0.0;  // max |reduced cost| over entries with mass > 1e-12

  long iterations = 0;
  long bland_pivots = 0;

  VectorXd row_sums() const;
  VectorXd col_sums() const;
  MatrixXd dense() const;
};

struct LpOptions {
  double marginal_tol = 1e-12;
  Eigen::Index max_entries = 2'000'000;
  long max_pivots = 0;  // 0 selects a size-dependent budget
};

/// Optimal coupling of row_w and col_w for `cost` (network simplex on the
/// transportation graph, block pricing with a Bland fallback after
/// 50 (n + r) consecutive degenerate pivots).
Coupling solve_ot(const CostMatrix& cost, const VectorXd& row_w, const VectorXd& col_w,
                  const LpOptions& opts = {});

enum class ConstraintKind { Constant, Monomial, BoxDistance, HalfSpaceDistance };

/// One function psi(eta) evaluated on grid atoms.
struct ConstraintFunction {
  ConstraintKind kind = ConstraintKind::Constant;
  std::vector<int> exponents;  // Monomial: prod_c eta_c^exponents[c]
  VectorXd lower, upper;       // BoxDistance: distance to [lower, upper]
  VectorXd normal;             // HalfSpaceDistance: distance to {x : normal . x >= offset}
  double offset = 0.0;

  double operator()(const Eigen::Ref<const VectorXd>& eta) const;
  std::string describe() const;

  static ConstraintFunction constant();
  static ConstraintFunction monomial(std::vector<int> exponents);
  static ConstraintFunction box_distance(VectorXd lower, VectorXd upper);
  static ConstraintFunction half_space_distance(VectorXd normal, double offset);
};

struct ConstraintSpec {
  std::vector<ConstraintFunction> functions;
  VectorXd targets;

  Eigen::Index size() const { return Eigen::Index(functions.size()); }

  /// All monomials of total degree 1..max_degree in dimension m (cross
  /// moments included), targets left at zero.
  static ConstraintSpec moments(Eigen::Index m, int max_degree);

  void add(ConstraintFunction fn, double target = 0.0);

  /// r x k matrix of psi_l(eta_j).
  MatrixXd evaluate(const MatrixXd& atoms) const;

  /// Sets targets to sum_j w_j psi_l(theta_j).
  void set_targets_from(const DiscreteDistribution& prior);
};

/// Minimises <cost, pi> over pi >= 0 with row sums row_w and
/// sum_ij psi_l(grid_j) pi_ij = target_l, by a two-phase revised simplex that
/// keeps one key variable per row so that only a k x k working basis is
/// factorised. Dantzig pricing, Bland fallback on stalling.
Coupling solve_constrained_coupling(const CostMatrix& cost, const VectorXd& row_w,
                                    const ConstraintSpec& constraints, const MatrixXd& grid_atoms,
                                    const LpOptions& opts = {});

/// Row i -> sum_j pi_ij atoms_j / sum_j pi_ij.
MatrixXd barycentric_projection(const Coupling& pi, const MatrixXd& atoms);

/// Squared 2-Wasserstein distance between two discrete measures. In one
/// dimension the monotone coupling is used instead of the LP.
double w2_sq(const DiscreteDistribution& a, const DiscreteDistribution& b);

}  // namespace cebd
