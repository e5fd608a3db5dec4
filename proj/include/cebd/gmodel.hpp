#pragma once

// Nonparametric prior estimation (G-modeling): NPMLE over a fixed grid, EM
// refinement of atoms, the smooth NPMLE, posterior responsibilities and the
// Bayes denoiser.

#include <Eigen/Dense>

#include <vector>

#include "cebd/distribution.hpp"
#include "cebd/models.hpp"

namespace cebd {

enum class GridStrategy { Exemplar, Lattice };

struct GridOptions {
  GridStrategy strategy = GridStrategy::Exemplar;
  int points_per_axis = 50;
  Eigen::Index max_atoms = 100000;
};

/// Candidate atoms on the standardized scale. Exemplar returns the distinct
/// standardized observations; Lattice returns k^m points spanning their
/// bounding box (clipped to theta >= 0 for Poisson).
MatrixXd build_grid(const Dataset& data, const LikelihoodModel& model, const GridOptions& opts);

struct FitOptions {
  double tol = 1e-9;      // stop once the log-likelihood gain falls below this
  int max_iter = 5000;
  double kkt_tol = 1e-4;  // certificate threshold
  int em_warmup = 50;     // plain EM sweeps before the active-set phase
};

struct WeightFit {
  DiscreteDistribution prior;  // zero-weight atoms removed
  double log_likelihood = 0.0; // (1/n) sum_i log f(Z_i)
  double kkt_gap = 0.0;
  int iterations = 0;
};

/// Maximises the mean marginal log-likelihood over mixing weights on fixed
/// atoms. The result satisfies
///   max_j (1/n) sum_i p_j(Z_i) / f(Z_i) <= 1 + kkt_tol
/// with equality up to kkt_tol on every atom that keeps weight.
WeightFit fit_weights(const MatrixXd& atoms, const Dataset& data, const LikelihoodModel& model,
                      const FitOptions& opts = {});

/// Same as fit_weights for a precomputed n x r log-likelihood matrix.
WeightFit fit_weights_loglik(const MatrixXd& loglik, const MatrixXd& atoms,
                             const FitOptions& opts = {});

/// KKT gradient (1/n) sum_i p_j(Z_i) / f(Z_i) for every atom j.
VectorXd npmle_gradient(const MatrixXd& loglik, const VectorXd& weights);

struct EmOptions {
  int max_iter = 200;
  double tol = 1e-10;
  double merge_radius_rel = 1e-6;  // relative to the data diameter
};

struct EmResult {
  DiscreteDistribution prior;
  std::vector<double> log_likelihood_trace;  // one entry per E-step
  int iterations = 0;
};

/// Joint EM over atoms and weights. Gaussian atoms move to the
/// responsibility- and precision-weighted mean; Poisson atoms to
/// sum_i r_ij Z_i / sum_i r_ij lambda_i.
EmResult em_refine(const DiscreteDistribution& mix, const Dataset& data,
                   const LikelihoodModel& model, const EmOptions& opts = {});

struct NpmleOptions {
  GridOptions grid;
  FitOptions fit;
  EmOptions em;
  bool refine = true;
};

struct NpmleResult {
  DiscreteDistribution prior;
  double log_likelihood = 0.0;
  double kkt_gap = 0.0;
  int iterations = 0;
};

/// Grid, weight fit, EM refinement and a final certified weight fit.
NpmleResult npmle(const Dataset& data, const LikelihoodModel& model, const NpmleOptions& opts = {});

struct SmoothFit {
  SmoothPrior prior;
  double log_likelihood = 0.0;
  double kkt_gap = 0.0;
  int iterations = 0;
};

/// NPMLE over Gaussian mixtures whose components have covariance kernel_cov:
/// a discrete NPMLE under the noise covariance inflated by kernel_cov.
SmoothFit smooth_npmle(const Dataset& data, const LikelihoodModel& model,
                       const MatrixXd& kernel_cov, const NpmleOptions& opts = {});

struct PosteriorTable {
  MatrixXd resp;          // n x r, rows sum to one
  MatrixXd atoms;         // r x m
  MatrixXd kernel_shift;  // n x m; zero for discrete priors
};

PosteriorTable posterior_table(const DiscreteDistribution& prior, const Dataset& data,
                               const LikelihoodModel& model);
/// Responsibilities under the inflated model; kernel_shift carries
/// K (K + Sigma_i)^{-1} (Z_i - sum_j r_ij theta_j).
PosteriorTable posterior_table(const SmoothPrior& prior, const Dataset& data,
                               const LikelihoodModel& model);

/// Posterior means E[Theta | Z_i], n x m.
MatrixXd bayes_denoise(const PosteriorTable& table);

struct Moments {
  VectorXd mean;
  MatrixXd cov;
};

Moments prior_moments(const DiscreteDistribution& prior);
Moments prior_moments(const SmoothPrior& prior);

/// Mean marginal log-likelihood (1/n) sum_i log sum_j w_j p_j(Z_i).
double mean_log_likelihood(const DiscreteDistribution& prior, const Dataset& data,
                           const LikelihoodModel& model);

}  // namespace cebd
