#include "cebd/models.hpp"

#include <boost/random/normal_distribution.hpp>
#include <boost/random/poisson_distribution.hpp>

#include <cmath>
#include <map>
#include <numbers>
#include <string>

#include "cebd/gmodel.hpp"
#include "cebd/stats.hpp"

namespace cebd {

namespace {

constexpr double kPoissonThetaFloor = 1e-12;

struct GaussianFactor {
  Eigen::LLT<MatrixXd> llt;
  double log_det = 0.0;
};

GaussianFactor factor_cov(const MatrixXd& cov) {
  GaussianFactor f;
  f.llt.compute(cov);
  if (f.llt.info() != Eigen::Success || !bures::is_positive_definite(cov)) {
    throw Error(ErrorCode::SingularCovariance, "Gaussian noise covariance is not positive definite");
  }
  const MatrixXd l = f.llt.matrixL();
  f.log_det = 2.0 * l.diagonal().array().log().sum();
  return f;
}

std::vector<double> flatten(const MatrixXd& m) { return {m.data(), m.data() + m.size()}; }

// Fills rows `rows` of out with Gaussian log densities of whitened distances.
void gaussian_block(const MatrixXd& cov, const std::vector<Eigen::Index>& rows,
                    const MatrixXd& obs, const MatrixXd& atoms, MatrixXd& out) {
  const GaussianFactor f = factor_cov(cov);
  const Eigen::Index m = obs.cols();
  const double c = -0.5 * double(m) * std::log(2.0 * std::numbers::pi) - 0.5 * f.log_det;
  const MatrixXd wa = f.llt.matrixL().solve(atoms.transpose());  // m x r
  const VectorXd wa_sq = wa.colwise().squaredNorm().transpose();
  MatrixXd block(Eigen::Index(rows.size()), m);
  for (std::size_t k = 0; k < rows.size(); ++k) block.row(Eigen::Index(k)) = obs.row(rows[k]);
  const MatrixXd wz = f.llt.matrixL().solve(block.transpose());  // m x nb
  const MatrixXd cross = wz.transpose() * wa;                    // nb x r
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const double zz = wz.col(Eigen::Index(k)).squaredNorm();
    for (Eigen::Index j = 0; j < atoms.rows(); ++j) {
      const double d2 = std::max(zz + wa_sq[j] - 2.0 * cross(Eigen::Index(k), j), 0.0);
      out(rows[k], j) = c - 0.5 * d2;
    }
  }
}

double poisson_log_pmf(double count, double rate) {
  if (count == 0.0) return -rate;
  return count * std::log(rate) - rate - std::lgamma(count + 1.0);
}

}  // namespace

LikelihoodModel LikelihoodModel::gaussian(MatrixXd noise_cov) {
  bures::require_symmetric(noise_cov);
  return LikelihoodModel(GaussianHomoscedastic{std::move(noise_cov)});
}

LikelihoodModel LikelihoodModel::gaussian_heteroscedastic(std::vector<MatrixXd> row_covs) {
  for (const auto& c : row_covs) bures::require_symmetric(c);
  return LikelihoodModel(GaussianHeteroscedastic{std::move(row_covs)});
}

LikelihoodModel LikelihoodModel::poisson(MatrixXd exposure) {
  if (exposure.size() > 0 && exposure.minCoeff() <= 0.0) {
    throw Error(ErrorCode::DomainError, "Poisson exposures must be strictly positive");
  }
  return LikelihoodModel(PoissonExposure{std::move(exposure)});
}

LikelihoodModel LikelihoodModel::poisson_unit(Eigen::Index n, Eigen::Index m) {
  return poisson(MatrixXd::Ones(n, m));
}

bool LikelihoodModel::is_heterogeneous() const {
  return !std::holds_alternative<GaussianHomoscedastic>(kind_);
}

MatrixXd LikelihoodModel::row_cov(Eigen::Index i) const {
  if (const auto* g = std::get_if<GaussianHomoscedastic>(&kind_)) return g->noise_cov;
  if (const auto* h = std::get_if<GaussianHeteroscedastic>(&kind_)) {
    return h->row_covs.at(std::size_t(i));
  }
  throw Error(ErrorCode::DomainError, "row_cov: model is not Gaussian");
}

VectorXd LikelihoodModel::row_exposure(Eigen::Index i) const {
  if (const auto* p = std::get_if<PoissonExposure>(&kind_)) {
    return p->exposure.row(i).transpose();
  }
  throw Error(ErrorCode::DomainError, "row_exposure: model is not Poisson");
}

LikelihoodModel LikelihoodModel::inflated(const MatrixXd& kernel_cov) const {
  if (const auto* g = std::get_if<GaussianHomoscedastic>(&kind_)) {
    return gaussian(g->noise_cov + kernel_cov);
  }
  if (const auto* h = std::get_if<GaussianHeteroscedastic>(&kind_)) {
    std::vector<MatrixXd> covs = h->row_covs;
    for (auto& c : covs) c += kernel_cov;
    return gaussian_heteroscedastic(std::move(covs));
  }
  throw Error(ErrorCode::DomainError, "kernel inflation requires a Gaussian likelihood");
}

LikelihoodModel LikelihoodModel::replicate_row(Eigen::Index i, Eigen::Index count) const {
  if (const auto* g = std::get_if<GaussianHomoscedastic>(&kind_)) return gaussian(g->noise_cov);
  if (const auto* h = std::get_if<GaussianHeteroscedastic>(&kind_)) {
    return gaussian(h->row_covs.at(std::size_t(i)));
  }
  const auto& p = std::get<PoissonExposure>(kind_);
  return poisson(p.exposure.row(i).replicate(count, 1));
}

std::vector<std::vector<Eigen::Index>> LikelihoodModel::heterogeneity_groups(Eigen::Index n) const {
  std::vector<std::vector<Eigen::Index>> groups;
  if (std::holds_alternative<GaussianHomoscedastic>(kind_)) {
    groups.emplace_back();
    for (Eigen::Index i = 0; i < n; ++i) groups.back().push_back(i);
    return groups;
  }
  std::map<std::vector<double>, std::size_t> index;
  for (Eigen::Index i = 0; i < n; ++i) {
    std::vector<double> key = is_poisson() ? flatten(MatrixXd(row_exposure(i).transpose()))
                                           : flatten(row_cov(i));
    auto [it, inserted] = index.try_emplace(std::move(key), groups.size());
    if (inserted) groups.emplace_back();
    groups[it->second].push_back(i);
  }
  return groups;
}

void LikelihoodModel::validate(Eigen::Index n, Eigen::Index m) const {
  if (const auto* g = std::get_if<GaussianHomoscedastic>(&kind_)) {
    if (g->noise_cov.rows() != m || g->noise_cov.cols() != m) {
      throw Error(ErrorCode::DimensionError, "noise covariance dimension does not match data");
    }
    if (!bures::is_psd(g->noise_cov)) {
      throw Error(ErrorCode::SingularCovariance, "noise covariance is not PSD");
    }
  } else if (const auto* h = std::get_if<GaussianHeteroscedastic>(&kind_)) {
    if (Eigen::Index(h->row_covs.size()) != n) {
      throw Error(ErrorCode::DimensionError, "heteroscedastic covariance list length != n");
    }
    for (const auto& c : h->row_covs) {
      if (c.rows() != m || c.cols() != m) {
        throw Error(ErrorCode::DimensionError, "row covariance dimension does not match data");
      }
    }
  } else {
    const auto& p = std::get<PoissonExposure>(kind_);
    if (p.exposure.rows() != n || p.exposure.cols() != m) {
      throw Error(ErrorCode::DimensionError, "exposure matrix shape does not match data");
    }
  }
}

MatrixXd standardized(const LikelihoodModel& model, const Dataset& data) {
  if (const auto* p = std::get_if<PoissonExposure>(&model.kind())) {
    return data.observations.cwiseQuotient(p->exposure);
  }
  return data.observations;
}

double log_density(const LikelihoodModel& model, Eigen::Index row, const VectorXd& z,
                   const VectorXd& theta) {
  if (model.is_poisson()) {
    if (theta.size() > 0 && theta.minCoeff() < 0.0) {
      throw Error(ErrorCode::DomainError, "Poisson mean parameter must be nonnegative");
    }
    const VectorXd lambda = model.row_exposure(row);
    double s = 0.0;
    for (Eigen::Index c = 0; c < z.size(); ++c) {
      s += poisson_log_pmf(z[c], lambda[c] * std::max(theta[c], kPoissonThetaFloor));
    }
    return s;
  }
  const GaussianFactor f = factor_cov(model.row_cov(row));
  const VectorXd w = f.llt.matrixL().solve(z - theta);
  return -0.5 * double(z.size()) * std::log(2.0 * std::numbers::pi) - 0.5 * f.log_det -
         0.5 * w.squaredNorm();
}

MatrixXd log_likelihood_matrix(const LikelihoodModel& model, const Dataset& data,
                               const MatrixXd& atoms) {
  const Eigen::Index n = data.n();
  const Eigen::Index r = atoms.rows();
  MatrixXd out(n, r);
  if (const auto* p = std::get_if<PoissonExposure>(&model.kind())) {
    if (atoms.size() > 0 && atoms.minCoeff() < 0.0) {
      throw Error(ErrorCode::DomainError, "Poisson atoms must be nonnegative");
    }
    const MatrixXd clamped = atoms.cwiseMax(kPoissonThetaFloor);
    const MatrixXd log_atoms = clamped.array().log().matrix();
    for (Eigen::Index i = 0; i < n; ++i) {
      double base = 0.0;
      for (Eigen::Index c = 0; c < data.m(); ++c) {
        const double zc = data.observations(i, c);
        base += zc * std::log(p->exposure(i, c)) - std::lgamma(zc + 1.0);
      }
      for (Eigen::Index j = 0; j < r; ++j) {
        double s = base;
        for (Eigen::Index c = 0; c < data.m(); ++c) {
          s += data.observations(i, c) * log_atoms(j, c) - p->exposure(i, c) * clamped(j, c);
        }
        out(i, j) = s;
      }
    }
    return out;
  }
  for (const auto& rows : model.heterogeneity_groups(n)) {
    gaussian_block(model.row_cov(rows.front()), rows, data.observations, atoms, out);
  }
  return out;
}

VectorXd sample_observation(const LikelihoodModel& model, Eigen::Index row, const VectorXd& theta,
                            CounterRng& rng) {
  if (model.is_poisson()) {
    const VectorXd lambda = model.row_exposure(row);
    VectorXd z(theta.size());
    for (Eigen::Index c = 0; c < theta.size(); ++c) {
      const double rate = lambda[c] * std::max(theta[c], 0.0);
      if (rate <= 0.0) {
        z[c] = 0.0;
      } else {
        boost::random::poisson_distribution<long long, double> pois(rate);
        z[c] = double(pois(rng));
      }
    }
    return z;
  }
  const MatrixXd cov = model.row_cov(row);
  boost::random::normal_distribution<double> normal;
  VectorXd eps(theta.size());
  for (Eigen::Index c = 0; c < theta.size(); ++c) eps[c] = normal(rng);
  Eigen::LLT<MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) {
    // Singular but PSD noise: use the symmetric square root.
    return theta + bures::psd_sqrt(cov) * eps;
  }
  return theta + MatrixXd(llt.matrixL()) * eps;
}

MatrixXd estimate_noise_cov(const LikelihoodModel& model, const Dataset& data) {
  if (data.n() == 0) throw Error(ErrorCode::EmptyDataset, "estimate_noise_cov: no observations");
  if (const auto* g = std::get_if<GaussianHomoscedastic>(&model.kind())) return g->noise_cov;
  if (const auto* h = std::get_if<GaussianHeteroscedastic>(&model.kind())) {
    MatrixXd acc = MatrixXd::Zero(data.m(), data.m());
    for (const auto& c : h->row_covs) acc += c;
    return acc / double(h->row_covs.size());
  }
  const auto& p = std::get<PoissonExposure>(model.kind());
  const VectorXd diag =
      (data.observations.array() / p.exposure.array().square()).colwise().mean().transpose();
  return diag.asDiagonal();
}

MatrixXd AffineDenoiser::apply(const MatrixXd& rows) const {
  return (rows * slope.transpose()).rowwise() + intercept.transpose();
}

AffineDenoiser AffineDenoiser::compose(const AffineDenoiser& inner) const {
  return {slope * inner.slope, slope * inner.intercept + intercept};
}

double variance_function(const ConjugateSpec& spec, double mu) {
  switch (spec.family) {
    case ConjugateFamily::Gaussian: return spec.noise_var;
    case ConjugateFamily::PoissonGamma: return mu;
    case ConjugateFamily::ExponentialInvGamma: return mu * mu;
    case ConjugateFamily::GeometricConjugate: return mu + mu * mu;
  }
  return 0.0;
}

double variance_curvature(const ConjugateSpec& spec) {
  switch (spec.family) {
    case ConjugateFamily::Gaussian:
    case ConjugateFamily::PoissonGamma: return 0.0;
    case ConjugateFamily::ExponentialInvGamma:
    case ConjugateFamily::GeometricConjugate: return 2.0;
  }
  return 0.0;
}

namespace {

struct ScalarSample {
  double mean;
  double var;
};

ScalarSample scalar_sample(const Dataset& data) {
  if (data.m() != 1) throw Error(ErrorCode::DimensionError, "conjugate formulas require m = 1");
  if (data.n() < 2) throw Error(ErrorCode::DegenerateSample, "conjugate formulas require n >= 2");
  const double mean = data.observations.col(0).mean();
  const double var = sample_cov(data.observations)(0, 0);
  if (!(var > 0.0)) throw Error(ErrorCode::DegenerateSample, "sample variance is zero");
  return {mean, var};
}

AffineDenoiser scalar_affine(double slope, double mean) {
  AffineDenoiser d;
  d.slope = MatrixXd::Constant(1, 1, slope);
  d.intercept = VectorXd::Constant(1, (1.0 - slope) * mean);
  return d;
}

}  // namespace

AffineDenoiser conjugate_bayes(const ConjugateSpec& spec, const Dataset& data) {
  const auto s = scalar_sample(data);
  const double shrink = std::max(0.0, 1.0 - variance_function(spec, s.mean) / s.var);
  return scalar_affine(shrink / (1.0 + 0.5 * variance_curvature(spec)), s.mean);
}

AffineDenoiser conjugate_vcb(const ConjugateSpec& spec, const Dataset& data) {
  const auto s = scalar_sample(data);
  const double excess = std::max(0.0, s.var - variance_function(spec, s.mean));
  const double slope =
      std::sqrt(excess) / (std::sqrt(s.var) * std::sqrt(1.0 + 0.5 * variance_curvature(spec)));
  return scalar_affine(slope, s.mean);
}

MatrixXd conditional_cov_of_bayes(const LikelihoodModel& model, Eigen::Index xi_row,
                                  const DiscreteDistribution& prior, const VectorXd& center,
                                  int mc_samples, std::uint64_t seed) {
  prior.validate();
  const Eigen::Index m = prior.dim();
  const LikelihoodModel local = model.replicate_row(xi_row, mc_samples);
  MatrixXd acc = MatrixXd::Zero(m, m);
  for (Eigen::Index j = 0; j < prior.size(); ++j) {
    if (prior.weights[j] <= 0.0) continue;
    CounterRng rng(derive_seed(seed, std::uint64_t(j)));
    Dataset draws{MatrixXd(mc_samples, m)};
    const VectorXd theta = prior.atoms.row(j).transpose();
    for (int s = 0; s < mc_samples; ++s) {
      draws.observations.row(s) = sample_observation(local, s, theta, rng).transpose();
    }
    const MatrixXd means = bayes_denoise(posterior_table(prior, draws, local));
    const MatrixXd centred = means.rowwise() - center.transpose();
    acc += prior.weights[j] * (centred.transpose() * centred) / double(mc_samples);
  }
  return (acc + acc.transpose()) * 0.5;
}

}  // namespace cebd
