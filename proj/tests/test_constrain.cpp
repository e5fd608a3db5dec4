#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cebd/constrain.hpp"
#include "cebd/error.hpp"
#include "cebd/scenarios.hpp"
#include "cebd/stats.hpp"

using namespace cebd;

namespace {

VectorXd v(std::initializer_list<double> xs) {
  VectorXd out(Eigen::Index(xs.size()));
  Eigen::Index k = 0;
  for (double x : xs) out[k++] = x;
  return out;
}

// Least-squares slope of y on x.
double ls_slope(const MatrixXd& x, const MatrixXd& y) {
  const double mx = x.mean(), my = y.mean();
  return ((x.array() - mx) * (y.array() - my)).sum() / (x.array() - mx).square().sum();
}

NpmleOptions lattice(int k) { return {{GridStrategy::Lattice, k, 100000}, {}, {}, true}; }

}  // namespace

TEST_CASE("method names round-trip") {
  for (Method m : {Method::Bayes, Method::VCB, Method::DCB, Method::GCB, Method::MVCB, Method::CVCB,
                   Method::MDCB, Method::MGCB, Method::Conjugate}) {
    CHECK(parse_method(method_name(m)) == m);
  }
  CHECK_FALSE(parse_method("nope").has_value());
}

TEST_CASE("variance_constrained") {
  const Simulation s = simulate_figure1(600, 3);
  const NpmleResult fit = npmle(s.data, s.model, lattice(15));
  const MatrixXd bayes = bayes_denoise(posterior_table(fit.prior, s.data, s.model));

  SUBCASE("matches data moments and is affine in the Bayes values") {
    const DenoiseReport r = variance_constrained(s.data, s.model, bayes);
    REQUIRE(r.affine.has_value());
    const VectorXd mu = sample_mean(s.data.observations);
    const MatrixXd a = bures::psd_truncate(MatrixXd(sample_cov(s.data.observations) - MatrixXd::Identity(2, 2)));
    CHECK((sample_mean(r.values) - mu).cwiseAbs().maxCoeff() <= 1e-8);
    CHECK(rel_frobenius(sample_cov(r.values), a) <= 1e-6);
    CHECK((r.affine->apply(bayes) - r.values).cwiseAbs().maxCoeff() == 0.0);
    const Metrics m = diagnostics(r, std::nullopt, std::nullopt);
    CHECK(m.mean_residual <= 1e-8);
    CHECK(m.cov_residual <= 1e-6);
  }
  SUBCASE("fixed point") {
    const Moments own{sample_mean(bayes), sample_cov(bayes)};
    const DenoiseReport r = variance_constrained_to(bayes, own);
    CHECK((r.values - bayes).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK((r.affine->slope - MatrixXd::Identity(2, 2)).norm() <= 1e-10);
  }
  SUBCASE("prior moments override") {
    const DenoiseReport r = variance_constrained(s.data, s.model, bayes, fit.prior, {MomentSource::Prior, 0.0});
    const Moments pm = prior_moments(fit.prior);
    CHECK((sample_mean(r.values) - pm.mean).norm() <= 1e-8);
    CHECK(rel_frobenius(sample_cov(r.values), pm.cov) <= 1e-6);
    CHECK_THROWS_AS(variance_constrained(s.data, s.model, bayes, std::nullopt, {MomentSource::Prior, 0.0}),
                    Error);
  }
  SUBCASE("singular Bayes covariance") {
    const MatrixXd flat = MatrixXd::Constant(bayes.rows(), 2, 1.0);
    try {
      variance_constrained(s.data, s.model, flat);
      FAIL("expected BayesCovarianceSingular");
    } catch (const Error& e) {
      CHECK(e.qualified() == "constrain.BayesCovarianceSingular");
    }
    MatrixXd jitter = flat;
    jitter.col(0) += sample_mean(s.data.observations)[0] * VectorXd::LinSpaced(flat.rows(), 0, 1);
    const DenoiseReport r = variance_constrained(s.data, s.model, jitter, std::nullopt, {MomentSource::Auto, 1e-3});
    CHECK(r.diagnostics.truncated);
  }
}

TEST_CASE("scalar example: VCB slope near 1/sqrt(2)") {
  const Simulation s = simulate_conjugate_gaussian(10000, 0.0, 1.0, 1.0, 77);
  const MatrixXd bayes = s.data.observations / 2.0;
  const DenoiseReport r = variance_constrained(s.data, s.model, bayes);
  CHECK(std::abs(ls_slope(s.data.observations, r.values) - 1.0 / std::sqrt(2.0)) <= 0.05);
  CHECK(r.affine->slope(0, 0) == doctest::Approx(std::sqrt(2.0)).epsilon(0.1));
}

TEST_CASE("pure noise data shrinks everything to the mean") {
  // Var(Z) = 1 < noise variance 2.
  const Simulation s = simulate_conjugate_gaussian(500, 0.7, 1e-12, 1.0, 5);
  const auto model = LikelihoodModel::gaussian(MatrixXd::Constant(1, 1, 2.0));
  const MatrixXd bayes = 0.3 * s.data.observations;
  const DenoiseReport r = variance_constrained(s.data, model, bayes);
  const double mu = s.data.observations.mean();
  CHECK((r.values.array() - mu).abs().maxCoeff() <= 1e-12);
  CHECK(r.diagnostics.truncated);
}

TEST_CASE("marginal_variance_constrained") {
  const Simulation s = simulate_conjugate_gaussian(400, 1.0, 2.0, 1.0, 9);
  const NpmleResult fit = npmle(s.data, s.model, lattice(60));
  const MatrixXd bayes = bayes_denoise(posterior_table(fit.prior, s.data, s.model));
  SUBCASE("coincides with VCB when the prior carries the same moments") {
    const DenoiseReport vcb = variance_constrained(s.data, s.model, bayes);
    // Two-point prior with mean and variance equal to the VCB target.
    const double mu = vcb.target->mean[0], sd = std::sqrt(vcb.target->cov(0, 0));
    DiscreteDistribution twin;
    twin.atoms = MatrixXd(v({mu - sd, mu + sd}));
    twin.weights = v({0.5, 0.5});
    const DenoiseReport mv = marginal_variance_constrained(s.data, s.model, bayes, twin);
    CHECK((mv.values - vcb.values).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK(mv.method == Method::MVCB);
  }
  SUBCASE("point mass prior sends everything to the atom") {
    const DenoiseReport mv =
        marginal_variance_constrained(s.data, s.model, bayes, DiscreteDistribution::point_mass(v({2.5})));
    CHECK((mv.values.array() - 2.5).abs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("conditional_variance_constrained") {
  SUBCASE("one heterogeneity value agrees with MVCB within Monte-Carlo error") {
    const Simulation s = simulate_conjugate_gaussian(1500, 0.0, 1.0, 1.0, 15);
    const NpmleResult fit = npmle(s.data, s.model, lattice(40));
    const MatrixXd bayes = bayes_denoise(posterior_table(fit.prior, s.data, s.model));
    const int mc = 400;
    const DenoiseReport cv = conditional_variance_constrained(s.data, s.model, fit.prior, {mc, 1, 0.0});
    const DenoiseReport mv = marginal_variance_constrained(s.data, s.model, bayes, fit.prior);
    REQUIRE(cv.group_maps.size() == 1);
    const Moments pm = prior_moments(fit.prior);
    const double m_cv = pm.cov(0, 0) / std::pow(cv.group_maps[0].slope(0, 0), 2);
    const double m_mv = sample_cov(bayes)(0, 0);
    // SE of both estimates of E[(d - mu)^2].
    const Eigen::ArrayXd q = (bayes.array() - pm.mean[0]).square();
    const double var_q = (q - q.mean()).square().mean();
    const double se = std::sqrt(var_q * (fit.prior.weights.squaredNorm() / mc + 1.0 / s.data.n()));
    CHECK(std::abs(m_cv - m_mv) <= 3 * se + std::pow(bayes.mean() - pm.mean[0], 2));
    CHECK(cv.diagnostics.seeds.size() == 1);
  }
  SUBCASE("nearly noiseless group leaves the Bayes values unchanged") {
    std::vector<MatrixXd> covs(60, MatrixXd::Constant(1, 1, 1e-8));
    for (std::size_t i = 30; i < 60; ++i) covs[i] = MatrixXd::Constant(1, 1, 1.0);
    const auto model = LikelihoodModel::gaussian_heteroscedastic(covs);
    DiscreteDistribution prior;
    prior.atoms = MatrixXd(v({-1.0, 0.5, 2.0}));
    prior.weights = v({0.3, 0.4, 0.3});
    Dataset d{MatrixXd(60, 1)};
    for (Eigen::Index i = 0; i < 60; ++i) d.observations(i, 0) = prior.atoms(i % 3, 0);
    const DenoiseReport cv = conditional_variance_constrained(d, model, prior, {100, 4, 0.0});
    REQUIRE(cv.group_maps.size() == 2);
    CHECK(cv.group_maps[0].slope(0, 0) == doctest::Approx(1.0).epsilon(1e-6));
    const MatrixXd bayes = bayes_denoise(posterior_table(prior, d, model));
    CHECK((cv.values.topRows(30) - bayes.topRows(30)).cwiseAbs().maxCoeff() <= 1e-6);
    CHECK(cv.group_of_row[45] == 1);
  }
  SUBCASE("deterministic for a fixed seed") {
    const Simulation s = simulate_figure7(200, 3);
    const NpmleResult fit = npmle(s.data, s.model, lattice(30));
    const DenoiseReport a = conditional_variance_constrained(s.data, s.model, fit.prior, {50, 8, 0.0});
    const DenoiseReport b = conditional_variance_constrained(s.data, s.model, fit.prior, {50, 8, 0.0});
    CHECK((a.values - b.values).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("distribution_constrained") {
  SUBCASE("self coupling is the identity") {
    const MatrixXd b = MatrixXd(v({0.2, -1.0, 3.0, 0.7}));
    const DenoiseReport r = distribution_constrained(b, DiscreteDistribution::uniform(b));
    CHECK(r.objective == doctest::Approx(0.0));
    CHECK((r.values - b).cwiseAbs().maxCoeff() <= 1e-12);
  }
  SUBCASE("point mass") {
    const MatrixXd b = MatrixXd(v({0.2, -1.0, 3.0}));
    const DenoiseReport r = distribution_constrained(b, DiscreteDistribution::point_mass(v({4.0})));
    CHECK((r.values.array() == 4.0).all());
  }
  SUBCASE("two points monotone matching") {
    const MatrixXd b = MatrixXd(v({0.0, 1.0}));
    DiscreteDistribution p;
    p.atoms = MatrixXd(v({1.0, 0.0}));
    p.weights = v({0.5, 0.5});
    const DenoiseReport r = distribution_constrained(b, p);
    CHECK(r.values(0, 0) == doctest::Approx(0.0));
    CHECK(r.values(1, 0) == doctest::Approx(1.0));
    CHECK(r.objective == doctest::Approx(0.0));
  }
  SUBCASE("column marginal and Jensen contraction") {
    const Simulation s = simulate_figure1(400, 6);
    const NpmleResult fit = npmle(s.data, s.model, lattice(15));
    const MatrixXd bayes = bayes_denoise(posterior_table(fit.prior, s.data, s.model));
    const DenoiseReport r = distribution_constrained(bayes, fit.prior);
    CHECK(r.diagnostics.col_marginal_residual <= 1e-9);
    CHECK(w2_sq(DiscreteDistribution::uniform(r.values), fit.prior) <= r.objective + 1e-12);
    CHECK(r.diagnostics.max_slackness_violation <= 1e-8);
  }
}

TEST_CASE("general_constrained") {
  SUBCASE("vacuous constraint is nearest-grid projection") {
    const MatrixXd b = MatrixXd(v({0.1, 0.9, 2.4}));
    MatrixXd grid(4, 1);
    grid << 0, 1, 2, 3;
    ConstraintSpec c;
    c.add(ConstraintFunction::constant(), 1.0);
    const DenoiseReport r = general_constrained_on_grid(b, grid, c);
    CHECK(r.values(0, 0) == 0.0);
    CHECK(r.values(1, 0) == 1.0);
    CHECK(r.values(2, 0) == 2.0);
  }
  SUBCASE("first two moments reproduce VCB") {
    const Simulation s = simulate_conjugate_gaussian(300, 0.0, 1.0, 1.0, 31);
    const NpmleResult fit = npmle(s.data, s.model, lattice(50));
    const MatrixXd bayes = bayes_denoise(posterior_table(fit.prior, s.data, s.model));
    const DenoiseReport g =
        general_constrained(s.data, s.model, bayes, fit.prior, ConstraintSpec::moments(1, 2));
    const DenoiseReport vcb =
        variance_constrained(s.data, s.model, bayes, fit.prior, {MomentSource::Prior, 0.0});
    const double spacing = g.grid(1, 0) - g.grid(0, 0);
    CHECK((g.values - vcb.values).cwiseAbs().maxCoeff() <= 2 * spacing);
    CHECK(g.constraint_residuals.cwiseAbs().maxCoeff() <= 1e-8);
    CHECK(g.projected.has_value());
    CHECK(g.projection_residuals.size() == 2);
  }
  SUBCASE("infeasible grid is reported") {
    const MatrixXd b = MatrixXd(v({0.0, 1.0}));
    MatrixXd grid(2, 1);
    grid << 0, 1;
    ConstraintSpec c;
    c.add(ConstraintFunction::monomial({1}), 3.0);
    try {
      general_constrained_on_grid(b, grid, c);
      FAIL("expected GridInfeasible");
    } catch (const Error& e) {
      CHECK(e.qualified() == "constrain.GridInfeasible");
    }
  }
}

TEST_CASE("gcb_grid") {
  const Simulation s = simulate_figure1(50, 2);
  DiscreteDistribution p = DiscreteDistribution::point_mass(v({9.0, 9.0}));
  const MatrixXd g = gcb_grid(s.data, s.model, p);
  CHECK(g.rows() == 2501);
  CHECK(g.row(2500).isApprox(p.atoms.row(0)));
  CHECK(g.col(0).maxCoeff() > 9.0);
}

TEST_CASE("diagnostics") {
  const MatrixXd lat = MatrixXd(v({1.0, -2.0, 0.5}));
  CHECK(*diagnostics(lat, std::nullopt, std::nullopt, lat).empirical_risk == 0.0);
  const Metrics z = diagnostics(MatrixXd::Zero(3, 1), std::nullopt, std::nullopt, lat);
  CHECK(*z.empirical_risk == doctest::Approx(lat.squaredNorm() / 3));
  const Metrics w = diagnostics(lat, std::nullopt, DiscreteDistribution::uniform(lat), std::nullopt);
  CHECK(*w.w2_to_prior == doctest::Approx(0.0));
  CHECK_THROWS_AS(diagnostics(lat, std::nullopt, std::nullopt, MatrixXd::Zero(2, 1)), Error);
}

TEST_CASE("risk ordering on an oracle simulation") {
  DiscreteDistribution g;
  g.atoms = MatrixXd(v({-2.0, 0.0, 3.0}));
  g.weights = v({0.3, 0.4, 0.3});
  const Simulation s = simulate_gaussian_mixture({g, MatrixXd::Zero(1, 1)}, MatrixXd::Identity(1, 1), 4000, 10);
  const MatrixXd bayes = bayes_denoise(posterior_table(g, s.data, s.model));
  const auto risk = [&](const MatrixXd& x) { return (x - s.latents).squaredNorm() / double(x.rows()); };
  const double rb = risk(bayes);
  const double rv = risk(variance_constrained(s.data, s.model, bayes, g, {MomentSource::Prior, 0.0}).values);
  const double rd = risk(distribution_constrained(bayes, g).values);
  CHECK(rb <= rv);
  CHECK(rv <= rd + 0.02);
  CHECK(rv <= 2 * rb);
}
