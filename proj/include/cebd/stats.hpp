#pragma once

#include <Eigen/Dense>

#include "cebd/bures.hpp"

namespace cebd {

/// Column means of an n x m sample.
template <typename Derived>
Vec<typename Derived::Scalar> sample_mean(const Eigen::MatrixBase<Derived>& x) {
  return x.colwise().mean().transpose();
}

/// Unbiased (1/(n-1)) sample covariance, exactly symmetric.
template <typename Derived>
Mat<typename Derived::Scalar> sample_cov(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  const Eigen::Index n = x.rows();
  const Vec<Scalar> mu = sample_mean(x);
  const Mat<Scalar> centred = x.rowwise() - mu.transpose();
  Mat<Scalar> s = centred.transpose() * centred / Scalar(n > 1 ? n - 1 : 1);
  return (s + s.transpose()) * Scalar(0.5);
}

/// Weighted mean and covariance of a discrete measure (weights sum to one).
template <typename DerivedX, typename DerivedW>
Mat<typename DerivedX::Scalar> weighted_cov(const Eigen::MatrixBase<DerivedX>& atoms,
                                            const Eigen::MatrixBase<DerivedW>& w,
                                            Vec<typename DerivedX::Scalar>* mean_out = nullptr) {
  using Scalar = typename DerivedX::Scalar;
  const Vec<Scalar> mu = atoms.transpose() * w;
  const Mat<Scalar> centred = atoms.rowwise() - mu.transpose();
  Mat<Scalar> c = centred.transpose() * w.asDiagonal() * centred;
  if (mean_out) *mean_out = mu;
  return (c + c.transpose()) * Scalar(0.5);
}

/// Relative Frobenius error ||a - b|| / max(||b||, floor).
template <typename DA, typename DB>
double rel_frobenius(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  const double denom = std::max(double(b.norm()), 1e-14);
  return double((a - b).norm()) / denom;
}

}  // namespace cebd
