// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <boost/random/uniform_real_distribution.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "cebd/constrain.hpp"
#include "cebd/error.hpp"
#include "cebd/gmodel.hpp"
#include "cebd/models.hpp"
#include "cebd/rng.hpp"
#include "cebd/scenarios.hpp"
#include "cebd/stats.hpp"
#include "cebd/transport.hpp"
#include "oracles.hpp"

using namespace cebd;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Every NPMLE fit run by the suite, for the KKT part of criterion 10.
std::vector<double> g_kkt_gaps;

NpmleResult fit(const Dataset& d, const LikelihoodModel& model, GridStrategy s, int k, bool refine = true) {
  NpmleOptions o;
  o.grid.strategy = s;
  o.grid.points_per_axis = k;
  o.refine = refine;
  NpmleResult r = npmle(d, model, o);
  g_kkt_gaps.push_back(r.kkt_gap);
  return r;
}

MatrixXd bayes_of(const DiscreteDistribution& g, const Dataset& d, const LikelihoodModel& model) {
  return bayes_denoise(posterior_table(g, d, model));
}

double risk(const MatrixXd& values, const MatrixXd& latents) {
  return (values - latents).rowwise().squaredNorm().mean();
}

double mean_of(const std::vector<double>& x) {
  double s = 0.0;
  for (double v : x) s += v;
  return s / double(x.size());
}

double se_of(const std::vector<double>& x) {
  const double mu = mean_of(x);
  double s = 0.0;
  for (double v : x) s += (v - mu) * (v - mu);
  return std::sqrt(s / double(x.size() - 1) / double(x.size()));
}

double sample_var(const MatrixXd& v) { return sample_cov(v)(0, 0); }

// ---------------------------------------------------------------------------

Outcome moment_matching() {
  CounterRng rng(101);
  boost::random::uniform_real_distribution<double> u(-3.0, 3.0), w(0.2, 1.0), e(-0.6, 0.6);
  int checked = 0, skipped = 0, failed = 0;
  double worst_mean = 0.0, worst_cov = 0.0;
  for (int s = 0; s < 50; ++s) {
    const Eigen::Index m = 1 + s % 2;
    SmoothPrior g;
    g.base.atoms.resize(3, m);
    for (Eigen::Index j = 0; j < 3; ++j)
      for (Eigen::Index c = 0; c < m; ++c) g.base.atoms(j, c) = u(rng);
    g.base.weights = VectorXd(3);
    for (Eigen::Index j = 0; j < 3; ++j) g.base.weights[j] = w(rng);
    g.base.weights /= g.base.weights.sum();
    g.kernel_cov = 0.2 * MatrixXd::Identity(m, m);
    MatrixXd noise = MatrixXd::Identity(m, m);
    if (m == 2) noise(0, 1) = noise(1, 0) = e(rng);
    noise *= w(rng) + 0.3;
    const Simulation sim = simulate_gaussian_mixture(g, noise, 2000, derive_seed(7, std::uint64_t(s)));

    const NpmleResult f = fit(sim.data, sim.model, GridStrategy::Lattice, m == 1 ? 50 : 15, false);
    const MatrixXd bayes = bayes_of(f.prior, sim.data, sim.model);
    const VectorXd mu = sample_mean(sim.data.observations);
    const MatrixXd a = bures::psd_truncate(MatrixXd(sample_cov(sim.data.observations) - noise));
    if (!bures::is_positive_definite(sample_cov(bayes)) || !bures::is_positive_definite(a)) {
      ++skipped;
      continue;
    }
    const DenoiseReport r = variance_constrained(sim.data, sim.model, bayes);
    const double em = (sample_mean(r.values) - mu).cwiseAbs().maxCoeff();
    const double ec = rel_frobenius(sample_cov(r.values), a);
    worst_mean = std::max(worst_mean, em);
    worst_cov = std::max(worst_cov, ec);
    if (!(em <= 1e-8 && ec <= 1e-6)) ++failed;
    ++checked;
  }
  return {failed == 0 && checked > 0,
          fmt("%d sims checked, %d skipped (not PD), max mean err %.2e, max cov rel err %.2e", checked, skipped,
              worst_mean, worst_cov)};
}

Outcome risk_sandwich() {
  DiscreteDistribution g;
  g.atoms = MatrixXd(3, 1);
  g.atoms << -2.0, 0.0, 3.0;
  g.weights = VectorXd(3);
  g.weights << 0.3, 0.5, 0.2;
  const MatrixXd noise = MatrixXd::Identity(1, 1);
  std::vector<double> rb, rv, lower, upper;
  for (int rep = 0; rep < 20; ++rep) {
    const Simulation sim =
        simulate_gaussian_mixture({g, MatrixXd::Zero(1, 1)}, noise, 10000, derive_seed(202, std::uint64_t(rep)));
    const MatrixXd bayes = bayes_of(g, sim.data, sim.model);
    const DenoiseReport v = variance_constrained(sim.data, sim.model, bayes, g, {MomentSource::Prior, 0.0});
    rb.push_back(risk(bayes, sim.latents));
    rv.push_back(risk(v.values, sim.latents));
    lower.push_back(rv.back() - rb.back());
    upper.push_back(2.0 * rb.back() - rv.back());
  }
  const double b = mean_of(rb), v = mean_of(rv);
  const bool ok = mean_of(lower) >= -3.0 * se_of(lower) && mean_of(upper) >= -3.0 * se_of(upper);
  return {ok, fmt("R_B %.4f, R_VCB %.4f, 2 R_B %.4f (SE of gaps %.1e, %.1e)", b, v, 2 * b, se_of(lower),
                  se_of(upper))};
}

Outcome scalar_closed_form() {
  const Simulation sim = simulate_conjugate_gaussian(10000, 0.0, 1.0, 1.0, 303);
  const NpmleResult f = fit(sim.data, sim.model, GridStrategy::Lattice, 50);
  const MatrixXd bayes = bayes_of(f.prior, sim.data, sim.model);
  const DenoiseReport v = variance_constrained(sim.data, sim.model, bayes);
  const MatrixXd& z = sim.data.observations;
  const double mz = z.mean(), mv = v.values.mean();
  const double slope =
      ((z.array() - mz) * (v.values.array() - mv)).sum() / (z.array() - mz).square().sum();

  Dataset grid{MatrixXd(VectorXd::LinSpaced(601, -3.0, 3.0))};
  const auto model = LikelihoodModel::gaussian(MatrixXd::Identity(1, 1));
  const MatrixXd rule = bayes_of(f.prior, grid, model);
  const double rms = std::sqrt((rule - grid.observations / 2.0).squaredNorm() / 601.0);
  const double target = 1.0 / std::sqrt(2.0);
  return {std::abs(slope - target) <= 0.05 && rms <= 0.03,
          fmt("VCB slope %.4f (target %.4f), Bayes RMS vs z/2 on [-3,3] %.4f", slope, target, rms)};
}

Outcome conjugate_cross_check() {
  double worst = 0.0;
  auto compare = [&](const ConjugateSpec& spec, const Dataset& data, const LikelihoodModel& model) {
    const AffineDenoiser closed = conjugate_vcb(spec, data);
    const AffineDenoiser bayes = conjugate_bayes(spec, data);
    const MatrixXd b = bayes.apply(standardized(model, data));
    const DenoiseReport r = variance_constrained(data, model, b);
    const AffineDenoiser generic = r.affine->compose(bayes);
    worst = std::max({worst, (generic.slope - closed.slope).cwiseAbs().maxCoeff(),
                      (generic.intercept - closed.intercept).cwiseAbs().maxCoeff()});
  };
  for (int rep = 0; rep < 5; ++rep) {
    const Simulation g = simulate_conjugate_gaussian(2000, 0.5, 1.5, 0.8, derive_seed(404, std::uint64_t(rep)));
    compare({ConjugateFamily::Gaussian, 0.8}, g.data, g.model);
    const Simulation p = simulate_conjugate_poisson(2000, 3.0, 1.5, derive_seed(405, std::uint64_t(rep)));
    compare({ConjugateFamily::PoissonGamma, 1.0}, p.data, p.model);
  }
  return {worst <= 1e-10, fmt("max slope/intercept difference %.2e over 5 Gaussian and 5 Poisson sets", worst)};
}

Outcome ot_exactness() {
  CounterRng rng(505);
  boost::random::uniform_real_distribution<double> u(0.0, 1.0);
  double worst_gap = 0.0, worst_reduced = 0.0, worst_slack = 0.0;
  int bad = 0;
  for (int t = 0; t < 1000; ++t) {
    const Eigen::Index n = 1 + Eigen::Index(rng() % 4), r = 1 + Eigen::Index(rng() % 4);
    MatrixXd cost(n, r);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < r; ++j) cost(i, j) = t % 4 == 0 ? double(rng() % 3) : u(rng);
    VectorXd a(n), b(r);
    for (Eigen::Index i = 0; i < n; ++i) a[i] = t % 5 == 0 ? double(1 + rng() % 2) : u(rng) + 0.01;
    for (Eigen::Index j = 0; j < r; ++j) b[j] = t % 5 == 0 ? double(1 + rng() % 2) : u(rng) + 0.01;
    a /= a.sum();
    b /= b.sum();
    const Coupling c = solve_ot(cost, a, b);
    const double gap = std::abs(c.objective - oracle::ot_by_trees(cost, a, b));
    worst_gap = std::max(worst_gap, gap);
    worst_reduced = std::min(worst_reduced, c.min_reduced_cost);
    worst_slack = std::max(worst_slack, c.max_slackness_violation);
    if (gap > 1e-9 || c.min_reduced_cost < -1e-9 || c.max_slackness_violation > 1e-9) ++bad;
  }
  return {bad == 0, fmt("1000 instances, %d bad, max objective gap %.2e, min reduced cost %.2e, max slackness "
                        "violation %.2e",
                        bad, worst_gap, worst_reduced, worst_slack)};
}

Outcome dcb_marginal() {
  const Simulation sim = simulate_figure1(2000, 606);
  const NpmleResult f = fit(sim.data, sim.model, GridStrategy::Lattice, 30);
  const MatrixXd bayes = bayes_of(f.prior, sim.data, sim.model);
  const DenoiseReport r = distribution_constrained(bayes, f.prior);
  const double marginal = (r.coupling->col_sums() - f.prior.weights).cwiseAbs().maxCoeff();
  const double w2 = w2_sq(DiscreteDistribution::uniform(r.values), f.prior);
  return {marginal <= 1e-9 && w2 <= r.objective * (1.0 + 1e-12),
          fmt("column marginal error %.2e, W2^2(projection, G) %.6f <= LP objective %.6f", marginal, w2,
              r.objective)};
}

Outcome gcb_vs_vcb() {
  double worst_ratio = 0.0;
  for (int rep = 0; rep < 3; ++rep) {
    SmoothPrior g;
    g.base.atoms = MatrixXd(2, 1);
    g.base.atoms << -1.0, 1.5;
    g.base.weights = VectorXd::Constant(2, 0.5);
    g.kernel_cov = MatrixXd::Constant(1, 1, 0.3);
    const Simulation sim =
        simulate_gaussian_mixture(g, MatrixXd::Identity(1, 1), 500, derive_seed(707, std::uint64_t(rep)));
    const NpmleResult f = fit(sim.data, sim.model, GridStrategy::Exemplar, 0);
    const MatrixXd bayes = bayes_of(f.prior, sim.data, sim.model);
    const DenoiseReport v = variance_constrained(sim.data, sim.model, bayes, f.prior, {MomentSource::Prior, 0.0});
    GcbGridOptions go;
    go.points_per_axis = 200;
    const DenoiseReport gc =
        general_constrained(sim.data, sim.model, bayes, f.prior, ConstraintSpec::moments(1, 2), go);
    const MatrixXd lattice = gcb_grid(sim.data, sim.model, f.prior, go).topRows(200);
    const double spacing = lattice(1, 0) - lattice(0, 0);
    worst_ratio = std::max(worst_ratio, (gc.values - v.values).cwiseAbs().maxCoeff() / spacing);
  }
  return {worst_ratio <= 2.0, fmt("max |GCB - VCB| = %.3f grid spacings over 3 data sets", worst_ratio)};
}

Outcome support_constraint() {
  DiscreteDistribution g;
  g.atoms = MatrixXd(3, 1);
  g.atoms << 0.1, 3.0, 9.0;
  g.weights = VectorXd(3);
  g.weights << 0.6, 0.25, 0.15;
  for (std::uint64_t seed = 808; seed < 818; ++seed) {
    const Simulation sim = simulate_poisson_mixture(g, 1.0, 500, seed);
    const NpmleResult f = fit(sim.data, sim.model, GridStrategy::Exemplar, 0);
    const MatrixXd bayes = bayes_of(f.prior, sim.data, sim.model);
    const DenoiseReport v = variance_constrained(sim.data, sim.model, bayes);
    const double vcb_min = v.values.minCoeff();
    if (vcb_min >= 0.0) continue;
    ConstraintSpec spec = ConstraintSpec::moments(1, 2);
    spec.add(ConstraintFunction::box_distance(VectorXd::Zero(1),
                                              VectorXd::Constant(1, std::numeric_limits<double>::infinity())));
    GcbGridOptions go;
    go.points_per_axis = 200;
    const DenoiseReport gc = general_constrained(sim.data, sim.model, bayes, f.prior, spec, go);
    const double gmin = gc.values.minCoeff();
    const double res = gc.constraint_residuals.cwiseAbs().maxCoeff();
    return {gmin >= -1e-8 && res <= 1e-8,
            fmt("seed %llu: VCB min %.4f, GCB min %.2e, max coupling residual %.2e",
                static_cast<unsigned long long>(seed), vcb_min, gmin, res)};
  }
  return {false, "no simulation among 10 seeds gave a negative VCB value"};
}

Outcome conditional_variance() {
  std::vector<double> cv[2], mv[2], pooled;
  for (int rep = 0; rep < 10; ++rep) {
    const std::uint64_t seed = derive_seed(909, std::uint64_t(rep));
    const Simulation sim = simulate_figure7(1500, seed);
    const NpmleResult f = fit(sim.data, sim.model, GridStrategy::Exemplar, 0);
    const MatrixXd bayes = bayes_of(f.prior, sim.data, sim.model);
    const DenoiseReport c = conditional_variance_constrained(sim.data, sim.model, f.prior, {100, seed, 0.0});
    const DenoiseReport m = marginal_variance_constrained(sim.data, sim.model, bayes, f.prior);
    std::vector<Eigen::Index> groups[2];
    for (Eigen::Index i = 0; i < sim.data.n(); ++i) groups[sim.model.row_cov(i)(0, 0) > 1.0].push_back(i);
    for (int k = 0; k < 2; ++k) {
      MatrixXd a(Eigen::Index(groups[k].size()), 1), b(Eigen::Index(groups[k].size()), 1);
      for (std::size_t i = 0; i < groups[k].size(); ++i) {
        a(Eigen::Index(i), 0) = c.values(groups[k][i], 0);
        b(Eigen::Index(i), 0) = m.values(groups[k][i], 0);
      }
      cv[k].push_back(sample_var(a));
      mv[k].push_back(sample_var(b));
    }
    pooled.push_back(sample_var(m.values));
  }
  const double c0 = mean_of(cv[0]), c1 = mean_of(cv[1]), m0 = mean_of(mv[0]), m1 = mean_of(mv[1]);
  const double p = mean_of(pooled);
  const bool cvcb_ok = std::abs(c0 - 1.0) <= 0.15 && std::abs(c1 - 1.0) <= 0.15;
  const bool mvcb_fails_group = std::abs(m0 - 1.0) > 0.15 || std::abs(m1 - 1.0) > 0.15;
  const bool mvcb_pooled_ok = std::abs(p - 1.0) <= 0.10;
  return {cvcb_ok && mvcb_fails_group && mvcb_pooled_ok,
          fmt("CVCB group variances %.3f (sigma^2=0.5), %.3f (sigma^2=8); MVCB %.3f, %.3f, pooled %.3f", c0, c1, m0,
              m1, p)};
}

Outcome npmle_optimality() {
  Dataset d{MatrixXd(2, 1)};
  d.observations << -40.0, 40.0;
  const auto model = LikelihoodModel::gaussian(MatrixXd::Identity(1, 1));
  const NpmleResult f = fit(d, model, GridStrategy::Exemplar, 0);
  double werr = 1.0;
  if (f.prior.size() == 2) werr = (f.prior.weights.array() - 0.5).abs().maxCoeff();
  double worst = 0.0;
  for (double g : g_kkt_gaps) worst = std::max(worst, g);
  return {worst <= 1e-4 && werr <= 1e-6,
          fmt("%zu fits, max KKT gap %.2e; two far points: %ld atoms, weight error %.2e", g_kkt_gaps.size(), worst,
              long(f.prior.size()), werr)};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    double budget_s;  // 0: no runtime bound
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "VCB moment matching", 10.0, moment_matching},
      {2, "risk sandwich R_B <= R_VCB <= 2 R_B", 30.0, risk_sandwich},
      {3, "scalar closed form", 0.0, scalar_closed_form},
      {4, "conjugate cross-validation", 0.0, conjugate_cross_check},
      {5, "OT exactness", 5.0, ot_exactness},
      {6, "DCB marginal law", 0.0, dcb_marginal},
      {7, "GCB vs VCB consistency", 0.0, gcb_vs_vcb},
      {8, "support constraint", 0.0, support_constraint},
      {9, "heterogeneous conditional variance", 0.0, conditional_variance},
      {10, "NPMLE optimality", 0.0, npmle_optimality},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const Error& e) {
      o = {false, "error " + e.qualified() + ": " + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_s > 0.0 && secs > c.budget_s) {
      o.pass = false;
      o.detail += fmt("; exceeded %.0f s budget", c.budget_s);
    }
    failures += !o.pass;
    std::printf("%s [%2d] %s: %s (%.2f s)\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", int(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
