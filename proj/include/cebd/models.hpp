#pragma once

// Likelihood families, noise-covariance estimation and closed-form conjugate
// denoisers.

#include <Eigen/Dense>

#include <cstdint>
#include <variant>
#include <vector>

#include "cebd/bures.hpp"
#include "cebd/distribution.hpp"
#include "cebd/rng.hpp"

namespace cebd {

struct GaussianHomoscedastic {
  MatrixXd noise_cov;
};

struct GaussianHeteroscedastic {
  std::vector<MatrixXd> row_covs;
};

/// Components are conditionally independent: Z_ic ~ Poisson(exposure_ic * theta_c).
struct PoissonExposure {
  MatrixXd exposure;  // n x m, strictly positive
};

/// Observations Z_1..Z_n, one row each. Poisson rows hold raw counts; the
/// per-row heterogeneity (covariances or exposures) lives in LikelihoodModel.
struct Dataset {
  MatrixXd observations;

  Eigen::Index n() const { return observations.rows(); }
  Eigen::Index m() const { return observations.cols(); }
};

class LikelihoodModel {
 public:
  using Kind = std::variant<GaussianHomoscedastic, GaussianHeteroscedastic, PoissonExposure>;

  static LikelihoodModel gaussian(MatrixXd noise_cov);
  static LikelihoodModel gaussian_heteroscedastic(std::vector<MatrixXd> row_covs);
  static LikelihoodModel poisson(MatrixXd exposure);
  /// Poisson with unit exposure for n rows in dimension m.
  static LikelihoodModel poisson_unit(Eigen::Index n, Eigen::Index m);

  const Kind& kind() const { return kind_; }
  bool is_gaussian() const { return !std::holds_alternative<PoissonExposure>(kind_); }
  bool is_poisson() const { return std::holds_alternative<PoissonExposure>(kind_); }
  bool is_heterogeneous() const;

  /// Gaussian noise covariance of row i.
  MatrixXd row_cov(Eigen::Index i) const;
  /// Poisson exposure of row i.
  VectorXd row_exposure(Eigen::Index i) const;

  /// Same family with every Gaussian covariance increased by `kernel_cov`.
  LikelihoodModel inflated(const MatrixXd& kernel_cov) const;

  /// Model for `count` rows that all share row i's heterogeneity.
  LikelihoodModel replicate_row(Eigen::Index i, Eigen::Index count) const;

  /// Groups row indices by exact equality of their heterogeneity parameters,
  /// in order of first appearance.
  std::vector<std::vector<Eigen::Index>> heterogeneity_groups(Eigen::Index n) const;

  /// Throws when invariants fail for a dataset of n rows and dimension m.
  void validate(Eigen::Index n, Eigen::Index m) const;

 private:
  explicit LikelihoodModel(Kind k) : kind_(std::move(k)) {}
  Kind kind_;
};

/// Observation on the latent scale: identity for Gaussian, Z / exposure for Poisson.
MatrixXd standardized(const LikelihoodModel& model, const Dataset& data);

/// log p_theta(z) for row `row` (its heterogeneity), z on the raw scale.
double log_density(const LikelihoodModel& model, Eigen::Index row, const VectorXd& z,
                   const VectorXd& theta);

/// n x r matrix of log p_{theta_j}(Z_i).
MatrixXd log_likelihood_matrix(const LikelihoodModel& model, const Dataset& data,
                               const MatrixXd& atoms);

/// Draw an observation for row `row` at latent value theta.
VectorXd sample_observation(const LikelihoodModel& model, Eigen::Index row,
                            const VectorXd& theta, CounterRng& rng);

/// Estimate of E[Cov(Z | Theta)] on the standardized scale.
MatrixXd estimate_noise_cov(const LikelihoodModel& model, const Dataset& data);

/// Exact affine map z -> slope * z + intercept.
struct AffineDenoiser {
  MatrixXd slope;
  VectorXd intercept;

  VectorXd operator()(const VectorXd& z) const { return slope * z + intercept; }
  /// Applies the map to every row of an n x m matrix.
  MatrixXd apply(const MatrixXd& rows) const;
  /// (this o inner)(z) = this(inner(z)).
  AffineDenoiser compose(const AffineDenoiser& inner) const;
};

enum class ConjugateFamily { Gaussian, PoissonGamma, ExponentialInvGamma, GeometricConjugate };

struct ConjugateSpec {
  ConjugateFamily family = ConjugateFamily::Gaussian;
  double noise_var = 1.0;  // Gaussian only
};

/// Quadratic variance function V(mu) of the family.
double variance_function(const ConjugateSpec& spec, double mu);
/// V''(0) for the family.
double variance_curvature(const ConjugateSpec& spec);

/// Linear empirical Bayes posterior mean for a conjugate pair, from the
/// sample mean and unbiased sample variance.
AffineDenoiser conjugate_bayes(const ConjugateSpec& spec, const Dataset& data);

/// Closed-form variance-constrained denoiser for a conjugate pair.
AffineDenoiser conjugate_vcb(const ConjugateSpec& spec, const Dataset& data);

/// Monte-Carlo estimate of E[(d_B(Z) - center)(d_B(Z) - center)^T] when
/// Theta ~ prior and Z ~ P_{Theta, xi}, with xi the heterogeneity of row
/// `xi_row`. Draws `mc_samples` observations per atom; atom j uses the
/// sub-stream derive_seed(seed, j).
MatrixXd conditional_cov_of_bayes(const LikelihoodModel& model, Eigen::Index xi_row,
                                  const DiscreteDistribution& prior, const VectorXd& center,
                                  int mc_samples, std::uint64_t seed);

}  // namespace cebd
