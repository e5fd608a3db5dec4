#pragma once

// Symmetric PSD matrix functions and Bures-Wasserstein transport between
// centred Gaussians. Everything here is templated on the Eigen scalar type
// and header-only.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "cebd/error.hpp"

namespace cebd {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatrixXd = Mat<double>;
using VectorXd = Vec<double>;

namespace bures {

/// Absolute floor applied to every scale-relative tolerance.
inline constexpr double kAbsFloor = 1e-14;

template <typename Derived>
typename Derived::Scalar max_abs_entry(const Eigen::MatrixBase<Derived>& s) {
  return s.size() == 0 ? typename Derived::Scalar(0) : s.cwiseAbs().maxCoeff();
}

template <typename Derived>
bool is_symmetric(const Eigen::MatrixBase<Derived>& s) {
  using Scalar = typename Derived::Scalar;
  if (s.rows() != s.cols()) return false;
  const Scalar tol = Scalar(1e-12) * (Scalar(1) + max_abs_entry(s));
  return (s - s.transpose()).cwiseAbs().maxCoeff() <= tol;
}

template <typename Derived>
void require_symmetric(const Eigen::MatrixBase<Derived>& s) {
  if (!is_symmetric(s)) {
    throw Error(ErrorCode::NonSymmetric,
                "matrix of size " + std::to_string(s.rows()) + "x" +
                    std::to_string(s.cols()) + " is not symmetric");
  }
}

/// Symmetric eigendecomposition (Householder tridiagonalisation followed by
/// implicit symmetric QR). The input is symmetrised before decomposition.
template <typename Derived>
Eigen::SelfAdjointEigenSolver<Mat<typename Derived::Scalar>> eigh(
    const Eigen::MatrixBase<Derived>& s) {
  using Scalar = typename Derived::Scalar;
  const Mat<Scalar> sym = (s + s.transpose()) * Scalar(0.5);
  return Eigen::SelfAdjointEigenSolver<Mat<Scalar>>(sym);
}

template <typename Scalar>
Scalar spectral_norm(const Vec<Scalar>& eigenvalues) {
  return eigenvalues.size() == 0 ? Scalar(0) : eigenvalues.cwiseAbs().maxCoeff();
}

/// Threshold below which the smallest eigenvalue does not count as strictly
/// positive: 1e-10 times the spectral norm, floored.
template <typename Scalar>
Scalar pd_tolerance(const Vec<Scalar>& eigenvalues) {
  return std::max(Scalar(1e-10) * spectral_norm(eigenvalues), Scalar(kAbsFloor));
}

template <typename Derived>
bool is_positive_definite(const Eigen::MatrixBase<Derived>& s) {
  if (!is_symmetric(s)) return false;
  const auto es = eigh(s);
  return es.eigenvalues().minCoeff() > pd_tolerance<typename Derived::Scalar>(es.eigenvalues());
}

template <typename Derived>
bool is_psd(const Eigen::MatrixBase<Derived>& s) {
  using Scalar = typename Derived::Scalar;
  if (!is_symmetric(s)) return false;
  const auto es = eigh(s);
  return es.eigenvalues().minCoeff() >= -Scalar(1e-10) * spectral_norm<Scalar>(es.eigenvalues());
}

template <typename Scalar, typename Fn>
Mat<Scalar> apply_spectral(const Eigen::SelfAdjointEigenSolver<Mat<Scalar>>& es, Fn fn) {
  const Vec<Scalar> mapped = es.eigenvalues().unaryExpr(fn);
  const Mat<Scalar>& v = es.eigenvectors();
  Mat<Scalar> out = v * mapped.asDiagonal() * v.transpose();
  return (out + out.transpose()) * Scalar(0.5);
}

/// Eigenvalues clamped at zero; eigenvectors kept.
template <typename Derived>
Mat<typename Derived::Scalar> psd_truncate(const Eigen::MatrixBase<Derived>& s) {
  using Scalar = typename Derived::Scalar;
  require_symmetric(s);
  if (s.rows() == 0) return Mat<Scalar>(0, 0);
  return apply_spectral<Scalar>(eigh(s), [](Scalar x) { return std::max(x, Scalar(0)); });
}

/// Principal square root of a PSD matrix.
template <typename Derived>
Mat<typename Derived::Scalar> psd_sqrt(const Eigen::MatrixBase<Derived>& s) {
  using Scalar = typename Derived::Scalar;
  require_symmetric(s);
  if (s.rows() == 0) return Mat<Scalar>(0, 0);
  const auto es = eigh(s);
  const Scalar lo = es.eigenvalues().minCoeff();
  if (lo < -Scalar(1e-6) * spectral_norm<Scalar>(es.eigenvalues())) {
    throw Error(ErrorCode::IndefiniteBeyondTolerance,
                "psd_sqrt: smallest eigenvalue " + std::to_string(double(lo)));
  }
  // Eigenvalues at round-off level are zeroed so that rank-deficient inputs
  // do not pick up spurious square roots of order sqrt(eps).
  const Scalar noise = Scalar(16) * std::numeric_limits<Scalar>::epsilon() * Scalar(s.rows()) *
                       spectral_norm<Scalar>(es.eigenvalues());
  return apply_spectral<Scalar>(es, [noise](Scalar x) { return x > noise ? std::sqrt(x) : Scalar(0); });
}

/// Inverse square root of a strictly positive definite matrix.
template <typename Derived>
Mat<typename Derived::Scalar> pd_inv_sqrt(const Eigen::MatrixBase<Derived>& s) {
  using Scalar = typename Derived::Scalar;
  require_symmetric(s);
  const auto es = eigh(s);
  if (es.eigenvalues().minCoeff() <= pd_tolerance<Scalar>(es.eigenvalues())) {
    throw Error(ErrorCode::FromNotPositiveDefinite,
                "matrix is not strictly positive definite (min eigenvalue " +
                    std::to_string(double(es.eigenvalues().minCoeff())) + ")");
  }
  return apply_spectral<Scalar>(es, [](Scalar x) { return Scalar(1) / std::sqrt(x); });
}

/// The symmetric matrix T with T * from * T == to, i.e. the optimal transport
/// map between N(0, from) and N(0, to). `from` must be strictly positive
/// definite; `to` only PSD.
template <typename DerivedA, typename DerivedB>
Mat<typename DerivedA::Scalar> transport_map(const Eigen::MatrixBase<DerivedA>& from,
                                             const Eigen::MatrixBase<DerivedB>& to) {
  using Scalar = typename DerivedA::Scalar;
  require_symmetric(from);
  require_symmetric(to);
  if (from.rows() != to.rows()) {
    throw Error(ErrorCode::DimensionError, "transport_map: dimension mismatch");
  }
  const auto es = eigh(from);
  if (es.eigenvalues().minCoeff() <= pd_tolerance<Scalar>(es.eigenvalues())) {
    throw Error(ErrorCode::FromNotPositiveDefinite,
                "transport_map: source covariance is not strictly positive definite "
                "(min eigenvalue " + std::to_string(double(es.eigenvalues().minCoeff())) + ")");
  }
  const Mat<Scalar> root =
      apply_spectral<Scalar>(es, [](Scalar x) { return std::sqrt(x); });
  const Mat<Scalar> inv_root =
      apply_spectral<Scalar>(es, [](Scalar x) { return Scalar(1) / std::sqrt(x); });
  const Mat<Scalar> inner = root * to * root;
  const Mat<Scalar> mid = psd_sqrt(Mat<Scalar>((inner + inner.transpose()) * Scalar(0.5)));
  Mat<Scalar> t = inv_root * mid * inv_root;
  return (t + t.transpose()) * Scalar(0.5);
}

/// Squared 2-Wasserstein distance between N(0, a) and N(0, b).
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar bures_distance_sq(const Eigen::MatrixBase<DerivedA>& a,
                                            const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  const Mat<Scalar> ra = psd_sqrt(a);
  require_symmetric(b);
  const Mat<Scalar> inner = ra * b * ra;
  const Mat<Scalar> cross = psd_sqrt(Mat<Scalar>((inner + inner.transpose()) * Scalar(0.5)));
  const Scalar d = a.trace() + b.trace() - Scalar(2) * cross.trace();
  return std::max(d, Scalar(0));
}

}  // namespace bures
}  // namespace cebd
