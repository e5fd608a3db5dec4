#pragma once

// Synthetic data sets with known latent variables.

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>

#include "cebd/distribution.hpp"
#include "cebd/gmodel.hpp"
#include "cebd/models.hpp"

namespace cebd {

struct Simulation {
  std::string name;
  Dataset data;
  LikelihoodModel model = LikelihoodModel::gaussian(MatrixXd::Identity(1, 1));
  MatrixXd latents;                        // n x m
  Moments true_moments;                    // of the latent law
  std::optional<SmoothPrior> true_prior;   // kernel_cov zero for discrete laws
  std::optional<MatrixXd> kernel_lower_bound;
};

/// Theta ~ sum_j w_j N(atom_j, kernel_cov), Z | Theta ~ N(Theta, noise_cov).
Simulation simulate_gaussian_mixture(const SmoothPrior& prior, const MatrixXd& noise_cov,
                                     Eigen::Index n, std::uint64_t seed);

/// Theta ~ prior (discrete), Z | Theta ~ Poisson(exposure * Theta) componentwise.
Simulation simulate_poisson_mixture(const DiscreteDistribution& prior, double exposure,
                                    Eigen::Index n, std::uint64_t seed);

/// Two components at (1, 1) and (-1, -1) with covariance 0.1 I, equal
/// weights, noise I, in R^2.
Simulation simulate_figure1(Eigen::Index n, std::uint64_t seed);

/// Theta ~ N(0, 1); noise variance 0.5 or 8 with equal probability.
Simulation simulate_figure7(Eigen::Index n, std::uint64_t seed);

/// Theta ~ N(prior_mean, prior_var), Z | Theta ~ N(Theta, noise_var).
Simulation simulate_conjugate_gaussian(Eigen::Index n, double prior_mean, double prior_var,
                                       double noise_var, std::uint64_t seed);

/// Theta ~ Gamma(shape, scale), Z | Theta ~ Poisson(Theta).
Simulation simulate_conjugate_poisson(Eigen::Index n, double shape, double scale,
                                      std::uint64_t seed);

}  // namespace cebd
