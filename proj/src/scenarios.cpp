#include "cebd/scenarios.hpp"

#include <boost/random/gamma_distribution.hpp>
#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_real_distribution.hpp>

#include "cebd/error.hpp"
#include "cebd/rng.hpp"

namespace cebd {

namespace {

Eigen::Index draw_component(const VectorXd& w, CounterRng& rng) {
  boost::random::uniform_real_distribution<double> u(0.0, 1.0);
  const double x = u(rng);
  double acc = 0.0;
  for (Eigen::Index j = 0; j + 1 < w.size(); ++j) {
    acc += w[j];
    if (x < acc) return j;
  }
  return w.size() - 1;
}

Moments smooth_moments(const SmoothPrior& p) {
  Moments mo = prior_moments(p.base);
  mo.cov += p.kernel_cov;
  return mo;
}

}  // namespace

Simulation simulate_gaussian_mixture(const SmoothPrior& prior, const MatrixXd& noise_cov,
                                     Eigen::Index n, std::uint64_t seed) {
  prior.base.validate();
  const Eigen::Index m = prior.base.dim();
  if (noise_cov.rows() != m || prior.kernel_cov.rows() != m) {
    throw Error(ErrorCode::DimensionError, "mixture and noise dimensions differ");
  }
  Simulation s;
  s.name = "gaussian-mixture";
  s.model = LikelihoodModel::gaussian(noise_cov);
  s.latents.resize(n, m);
  s.data.observations.resize(n, m);
  const MatrixXd root = bures::psd_sqrt(prior.kernel_cov);
  CounterRng latent_rng(derive_seed(seed, 0));
  CounterRng noise_rng(derive_seed(seed, 1));
  boost::random::normal_distribution<double> normal;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index j = draw_component(prior.base.weights, latent_rng);
    VectorXd eps(m);
    for (Eigen::Index c = 0; c < m; ++c) eps[c] = normal(latent_rng);
    const VectorXd theta = prior.base.atoms.row(j).transpose() + root * eps;
    s.latents.row(i) = theta.transpose();
    s.data.observations.row(i) = sample_observation(s.model, i, theta, noise_rng).transpose();
  }
  s.true_prior = prior;
  s.true_moments = smooth_moments(prior);
  return s;
}

Simulation simulate_poisson_mixture(const DiscreteDistribution& prior, double exposure,
                                    Eigen::Index n, std::uint64_t seed) {
  prior.validate();
  const Eigen::Index m = prior.dim();
  Simulation s;
  s.name = "poisson-mixture";
  s.model = LikelihoodModel::poisson(MatrixXd::Constant(n, m, exposure));
  s.latents.resize(n, m);
  s.data.observations.resize(n, m);
  CounterRng latent_rng(derive_seed(seed, 0));
  CounterRng noise_rng(derive_seed(seed, 1));
  for (Eigen::Index i = 0; i < n; ++i) {
    const VectorXd theta = prior.atoms.row(draw_component(prior.weights, latent_rng)).transpose();
    s.latents.row(i) = theta.transpose();
    s.data.observations.row(i) = sample_observation(s.model, i, theta, noise_rng).transpose();
  }
  s.true_prior = SmoothPrior{prior, MatrixXd::Zero(m, m)};
  s.true_moments = prior_moments(prior);
  return s;
}

Simulation simulate_figure1(Eigen::Index n, std::uint64_t seed) {
  DiscreteDistribution base;
  base.atoms.resize(2, 2);
  base.atoms << 1.0, 1.0, -1.0, -1.0;
  base.weights = VectorXd::Constant(2, 0.5);
  const MatrixXd tau = 0.1 * MatrixXd::Identity(2, 2);
  Simulation s = simulate_gaussian_mixture({base, tau}, MatrixXd::Identity(2, 2), n, seed);
  s.name = "figure1";
  s.kernel_lower_bound = tau;
  return s;
}

Simulation simulate_figure7(Eigen::Index n, std::uint64_t seed) {
  Simulation s;
  s.name = "figure7";
  s.latents.resize(n, 1);
  s.data.observations.resize(n, 1);
  std::vector<MatrixXd> covs(static_cast<std::size_t>(n));
  CounterRng latent_rng(derive_seed(seed, 0));
  CounterRng noise_rng(derive_seed(seed, 1));
  CounterRng xi_rng(derive_seed(seed, 2));
  boost::random::normal_distribution<double> normal;
  boost::random::uniform_real_distribution<double> u(0.0, 1.0);
  for (Eigen::Index i = 0; i < n; ++i) {
    covs[std::size_t(i)] = MatrixXd::Constant(1, 1, u(xi_rng) < 0.5 ? 0.5 : 8.0);
    s.latents(i, 0) = normal(latent_rng);
    s.data.observations(i, 0) =
        s.latents(i, 0) + std::sqrt(covs[std::size_t(i)](0, 0)) * normal(noise_rng);
  }
  s.model = LikelihoodModel::gaussian_heteroscedastic(std::move(covs));
  s.true_moments = {VectorXd::Zero(1), MatrixXd::Identity(1, 1)};
  return s;
}

Simulation simulate_conjugate_gaussian(Eigen::Index n, double prior_mean, double prior_var,
                                       double noise_var, std::uint64_t seed) {
  Simulation s;
  s.name = "conjugate-gaussian";
  s.model = LikelihoodModel::gaussian(MatrixXd::Constant(1, 1, noise_var));
  s.latents.resize(n, 1);
  s.data.observations.resize(n, 1);
  CounterRng latent_rng(derive_seed(seed, 0));
  CounterRng noise_rng(derive_seed(seed, 1));
  boost::random::normal_distribution<double> normal;
  const double sd = std::sqrt(prior_var), noise_sd = std::sqrt(noise_var);
  for (Eigen::Index i = 0; i < n; ++i) {
    s.latents(i, 0) = prior_mean + sd * normal(latent_rng);
    s.data.observations(i, 0) = s.latents(i, 0) + noise_sd * normal(noise_rng);
  }
  s.true_moments = {VectorXd::Constant(1, prior_mean), MatrixXd::Constant(1, 1, prior_var)};
  return s;
}

Simulation simulate_conjugate_poisson(Eigen::Index n, double shape, double scale,
                                      std::uint64_t seed) {
  Simulation s;
  s.name = "conjugate-poisson";
  s.model = LikelihoodModel::poisson_unit(n, 1);
  s.latents.resize(n, 1);
  s.data.observations.resize(n, 1);
  CounterRng latent_rng(derive_seed(seed, 0));
  CounterRng noise_rng(derive_seed(seed, 1));
  boost::random::gamma_distribution<double> gamma(shape, scale);
  for (Eigen::Index i = 0; i < n; ++i) {
    s.latents(i, 0) = gamma(latent_rng);
    s.data.observations.row(i) =
        sample_observation(s.model, i, s.latents.row(i).transpose(), noise_rng).transpose();
  }
  s.true_moments = {VectorXd::Constant(1, shape * scale), MatrixXd::Constant(1, 1, shape * scale * scale)};
  return s;
}

}  // namespace cebd
