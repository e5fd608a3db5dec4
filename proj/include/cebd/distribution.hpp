#pragma once

#include <Eigen/Dense>

#include <optional>

#include "cebd/bures.hpp"

namespace cebd {

/// Finitely supported probability measure on R^m: one atom per row.
struct DiscreteDistribution {
  MatrixXd atoms;   // r x m
  VectorXd weights; // r, nonnegative, sums to one

  Eigen::Index size() const { return atoms.rows(); }
  Eigen::Index dim() const { return atoms.cols(); }

  static DiscreteDistribution point_mass(const VectorXd& atom);
  static DiscreteDistribution uniform(const MatrixXd& atoms);

  /// Throws DomainError when weights are negative, do not sum to one within
  /// 1e-10, or sizes disagree.
  void validate() const;

  /// Drops atoms whose weight is <= threshold and renormalises.
  DiscreteDistribution pruned(double threshold = 0.0) const;

  /// Merges atoms closer than `radius` (Euclidean), summing their weights.
  /// The surviving atom is the weighted mean of the merged group.
  DiscreteDistribution merged(double radius) const;
};

/// Discrete base measure convolved with N(0, kernel_cov).
struct SmoothPrior {
  DiscreteDistribution base;
  MatrixXd kernel_cov;
};

}  // namespace cebd
