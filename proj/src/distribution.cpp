#include "cebd/distribution.hpp"

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

namespace cebd {

DiscreteDistribution DiscreteDistribution::point_mass(const VectorXd& atom) {
  DiscreteDistribution d;
  d.atoms = atom.transpose();
  d.weights = VectorXd::Ones(1);
  return d;
}

DiscreteDistribution DiscreteDistribution::uniform(const MatrixXd& atoms) {
  DiscreteDistribution d;
  d.atoms = atoms;
  d.weights = VectorXd::Constant(atoms.rows(), 1.0 / double(atoms.rows()));
  return d;
}

void DiscreteDistribution::validate() const {
  if (atoms.rows() != weights.size() || atoms.rows() == 0) {
    throw Error(ErrorCode::DomainError, "distribution: atom/weight count mismatch or empty");
  }
  if (!atoms.allFinite() || !weights.allFinite()) {
    throw Error(ErrorCode::DomainError, "distribution: non-finite atoms or weights");
  }
  if (weights.minCoeff() < 0.0) {
    throw Error(ErrorCode::DomainError, "distribution: negative weight");
  }
  if (std::abs(weights.sum() - 1.0) > 1e-10) {
    throw Error(ErrorCode::DomainError,
                "distribution: weights sum to " + std::to_string(weights.sum()));
  }
}

DiscreteDistribution DiscreteDistribution::pruned(double threshold) const {
  std::vector<Eigen::Index> keep;
  for (Eigen::Index j = 0; j < weights.size(); ++j) {
    if (weights[j] > threshold) keep.push_back(j);
  }
  DiscreteDistribution out;
  out.atoms.resize(Eigen::Index(keep.size()), atoms.cols());
  out.weights.resize(Eigen::Index(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) {
    out.atoms.row(Eigen::Index(k)) = atoms.row(keep[k]);
    out.weights[Eigen::Index(k)] = weights[keep[k]];
  }
  out.weights /= out.weights.sum();
  return out;
}

DiscreteDistribution DiscreteDistribution::merged(double radius) const {
  const Eigen::Index r = size();
  // Heaviest atoms absorb their neighbours first.
  std::vector<Eigen::Index> order(static_cast<std::size_t>(r));
  std::iota(order.begin(), order.end(), Eigen::Index(0));
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return weights[a] > weights[b]; });
  std::vector<bool> used(static_cast<std::size_t>(r), false);
  std::vector<VectorXd> new_atoms;
  std::vector<double> new_weights;
  const double r2 = radius * radius;
  for (Eigen::Index head : order) {
    if (used[std::size_t(head)]) continue;
    used[std::size_t(head)] = true;
    VectorXd acc = weights[head] * atoms.row(head).transpose();
    double wsum = weights[head];
    for (Eigen::Index j : order) {
      if (used[std::size_t(j)]) continue;
      if ((atoms.row(j) - atoms.row(head)).squaredNorm() < r2) {
        used[std::size_t(j)] = true;
        acc += weights[j] * atoms.row(j).transpose();
        wsum += weights[j];
      }
    }
    new_atoms.push_back(wsum > 0.0 ? VectorXd(acc / wsum) : VectorXd(atoms.row(head).transpose()));
    new_weights.push_back(wsum);
  }
  DiscreteDistribution out;
  out.atoms.resize(Eigen::Index(new_atoms.size()), atoms.cols());
  out.weights.resize(Eigen::Index(new_atoms.size()));
  for (std::size_t k = 0; k < new_atoms.size(); ++k) {
    out.atoms.row(Eigen::Index(k)) = new_atoms[k].transpose();
    out.weights[Eigen::Index(k)] = new_weights[k];
  }
  out.weights /= out.weights.sum();
  return out;
}

}  // namespace cebd
