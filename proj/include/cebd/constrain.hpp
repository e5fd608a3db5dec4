#pragma once

// Constrained empirical Bayes denoisers: variance-constrained (affine in the
// Bayes rule), distribution-constrained (optimal transport to the prior) and
// general moment-constrained (coupling LP on a grid), with their
// heterogeneous variants.

#include <Eigen/Dense>

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cebd/distribution.hpp"
#include "cebd/gmodel.hpp"
#include "cebd/models.hpp"
#include "cebd/transport.hpp"

namespace cebd {

enum class Method { Bayes, VCB, DCB, GCB, MVCB, CVCB, MDCB, MGCB, Conjugate };

std::string_view method_name(Method m);
std::optional<Method> parse_method(std::string_view name);

struct ReportDiagnostics {
  long iterations = 0;
  long bland_pivots = 0;
  double kkt_gap = std::numeric_limits<double>::quiet_NaN();
  double col_marginal_residual = std::numeric_limits<double>::quiet_NaN();
  double min_reduced_cost = std::numeric_limits<double>::quiet_NaN();
  double max_slackness_violation = std::numeric_limits<double>::quiet_NaN();
  bool truncated = false;  // VCB: target or source covariance was not PD
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> warnings;
};

struct DenoiseReport {
  MatrixXd values;  // n x m
  Method method = Method::Bayes;

  // VCB family. `affine` acts on Bayes values; CVCB keeps one map per
  // heterogeneity group, with group_of_row[i] indexing group_maps.
  std::optional<AffineDenoiser> affine;
  std::vector<AffineDenoiser> group_maps;
  std::vector<Eigen::Index> group_of_row;
  std::optional<Moments> target;

  VectorXd constraint_residuals;  // coupling level (DCB: column marginal; GCB: psi)
  VectorXd projection_residuals;  // GCB: mean psi over values minus target
  double objective = std::numeric_limits<double>::quiet_NaN();

  std::optional<DiscreteDistribution> prior_used;
  std::optional<Coupling> coupling;
  MatrixXd grid;                                   // GCB columns
  std::optional<DiscreteDistribution> projected;   // GCB: column marginal H

  ReportDiagnostics diagnostics;
};

/// Wraps precomputed Bayes values.
DenoiseReport bayes_report(const MatrixXd& bayes, std::optional<DiscreteDistribution> prior = {});

enum class MomentSource { Auto, Data, Prior };

struct VcbOptions {
  MomentSource moments = MomentSource::Auto;
  double pd_ridge = 0.0;  // added to the Bayes covariance when it is singular
};

/// Affine map b -> T (b - mean(bayes)) + target.mean with
/// T = transport_map(Cov(bayes), target.cov).
DenoiseReport variance_constrained_to(const MatrixXd& bayes, const Moments& target,
                                      const VcbOptions& opts = {});

/// Target mean = sample mean of the standardized data, target covariance
/// (S - Sigma)_+ with Sigma = estimate_noise_cov. With
/// opts.moments == Prior the target comes from prior_moments(*prior) instead.
DenoiseReport variance_constrained(const Dataset& data, const LikelihoodModel& model,
                                   const MatrixXd& bayes,
                                   const std::optional<DiscreteDistribution>& prior = {},
                                   const VcbOptions& opts = {});

/// Heterogeneous VCB: target moments from the prior (unless opts.moments == Data),
/// source covariance from the pooled Bayes values.
DenoiseReport marginal_variance_constrained(const Dataset& data, const LikelihoodModel& model,
                                            const MatrixXd& bayes,
                                            const DiscreteDistribution& prior,
                                            const VcbOptions& opts = {});

struct CvcbOptions {
  int mc_samples = 100;
  std::uint64_t seed = 0;
  double pd_ridge = 0.0;
};

/// Per-heterogeneity-group VCB: each group g uses
/// T_g = transport_map(E[(d_B - mu)(d_B - mu)^T | xi_g], Cov(prior)), the
/// conditional covariance estimated by Monte Carlo with seed
/// derive_seed(opts.seed, g).
DenoiseReport conditional_variance_constrained(const Dataset& data, const LikelihoodModel& model,
                                               const DiscreteDistribution& prior,
                                               const CvcbOptions& opts = {});

/// Optimal coupling of the Bayes values (mass 1/n each) with the prior under
/// squared distance, followed by barycentric projection.
DenoiseReport distribution_constrained(const MatrixXd& bayes, const DiscreteDistribution& prior,
                                       const LpOptions& lp = {});

struct GcbGridOptions {
  int points_per_axis = 0;   // 0: 200 for m = 1, 50 per axis otherwise
  double expand = 0.1;       // box enlargement per side, relative to its width
  Eigen::Index max_atoms = 100000;
  bool targets_from_prior = true;
};

/// Lattice over the box of standardized observations and prior atoms,
/// augmented with the prior atoms.
MatrixXd gcb_grid(const Dataset& data, const LikelihoodModel& model,
                  const DiscreteDistribution& prior, const GcbGridOptions& opts = {});

DenoiseReport general_constrained(const Dataset& data, const LikelihoodModel& model,
                                  const MatrixXd& bayes, const DiscreteDistribution& prior,
                                  ConstraintSpec constraints, const GcbGridOptions& grid_opts = {},
                                  const LpOptions& lp = {});

/// Same LP on a caller-supplied grid.
DenoiseReport general_constrained_on_grid(const MatrixXd& bayes, const MatrixXd& grid,
                                          const ConstraintSpec& constraints,
                                          const LpOptions& lp = {});

struct Metrics {
  std::optional<double> empirical_risk;  // (1/n) sum ||value_i - latent_i||^2
  double mean_residual = 0.0;            // max |mean(values) - target mean|
  double cov_residual = 0.0;             // relative Frobenius, sample cov vs target cov
  std::optional<double> w2_to_prior;
  VectorXd constraint_residuals;
};

/// Target moments are the report's own VCB target when present, otherwise
/// the prior's. For m > 1, w2_to_prior is skipped when the coupling would
/// exceed LpOptions::max_entries.
Metrics diagnostics(const MatrixXd& values, const std::optional<Moments>& target,
                    const std::optional<DiscreteDistribution>& prior,
                    const std::optional<MatrixXd>& latents,
                    const VectorXd& constraint_residuals = {});
Metrics diagnostics(const DenoiseReport& report, const std::optional<DiscreteDistribution>& prior,
                    const std::optional<MatrixXd>& latents);

}  // namespace cebd
