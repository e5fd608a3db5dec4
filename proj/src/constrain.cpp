#include "cebd/constrain.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "cebd/bures.hpp"
#include "cebd/error.hpp"
#include "cebd/rng.hpp"
#include "cebd/stats.hpp"

namespace cebd {

namespace {

constexpr std::array<std::string_view, 9> kMethodNames = {"bayes", "vcb",  "dcb",  "gcb",      "mvcb",
                                                          "cvcb",  "mdcb", "mgcb", "conjugate"};

// Source covariance for the VCB family: must be PD unless a ridge is allowed.
MatrixXd source_cov(const MatrixXd& m_hat, double ridge, ReportDiagnostics& diag) {
  if (bures::is_positive_definite(m_hat)) return m_hat;
  if (ridge > 0.0) {
    diag.truncated = true;
    diag.warnings.push_back("Bayes covariance singular; ridge added");
    return m_hat + ridge * MatrixXd::Identity(m_hat.rows(), m_hat.cols());
  }
  throw Error(ErrorCode::BayesCovarianceSingular,
              "sample covariance of the Bayes values is not positive definite; "
              "set a positive pd_ridge to regularise it");
}

AffineDenoiser vcb_map(const MatrixXd& from_cov, const VectorXd& from_mean, const Moments& target) {
  const MatrixXd t = bures::transport_map(from_cov, target.cov);
  return {t, target.mean - t * from_mean};
}

Moments data_moments(const Dataset& data, const LikelihoodModel& model, ReportDiagnostics& diag) {
  const MatrixXd x = standardized(model, data);
  const MatrixXd s = sample_cov(x);
  const MatrixXd diff = s - estimate_noise_cov(model, data);
  const MatrixXd sym = (diff + diff.transpose()) * 0.5;
  if (!bures::is_positive_definite(sym)) diag.truncated = true;
  return {sample_mean(x), bures::psd_truncate(sym)};
}

void require_rows(const MatrixXd& bayes, const Dataset& data) {
  if (bayes.rows() != data.n() || bayes.cols() != data.m()) {
    throw Error(ErrorCode::DimensionError, "Bayes values do not match the dataset shape");
  }
}

}  // namespace

std::string_view method_name(Method m) { return kMethodNames[std::size_t(m)]; }

std::optional<Method> parse_method(std::string_view name) {
  for (std::size_t k = 0; k < kMethodNames.size(); ++k) {
    if (kMethodNames[k] == name) return Method(k);
  }
  return std::nullopt;
}

DenoiseReport bayes_report(const MatrixXd& bayes, std::optional<DiscreteDistribution> prior) {
  DenoiseReport r;
  r.values = bayes;
  r.method = Method::Bayes;
  r.prior_used = std::move(prior);
  return r;
}

DenoiseReport variance_constrained_to(const MatrixXd& bayes, const Moments& target,
                                      const VcbOptions& opts) {
  if (bayes.rows() < 2) {
    throw Error(ErrorCode::DegenerateSample, "variance-constrained denoising needs n >= 2");
  }
  if (target.mean.size() != bayes.cols() || target.cov.rows() != bayes.cols()) {
    throw Error(ErrorCode::DimensionError, "target moments do not match the dimension");
  }
  DenoiseReport r;
  r.method = Method::VCB;
  const MatrixXd m_hat = source_cov(sample_cov(bayes), opts.pd_ridge, r.diagnostics);
  if (!bures::is_positive_definite(target.cov)) r.diagnostics.truncated = true;
  r.affine = vcb_map(m_hat, sample_mean(bayes), target);
  r.values = r.affine->apply(bayes);
  r.target = target;
  return r;
}

DenoiseReport variance_constrained(const Dataset& data, const LikelihoodModel& model,
                                   const MatrixXd& bayes,
                                   const std::optional<DiscreteDistribution>& prior,
                                   const VcbOptions& opts) {
  require_rows(bayes, data);
  ReportDiagnostics diag;
  Moments target;
  if (opts.moments == MomentSource::Prior) {
    if (!prior) throw Error(ErrorCode::DomainError, "prior moments requested without a prior");
    target = prior_moments(*prior);
  } else {
    target = data_moments(data, model, diag);
  }
  DenoiseReport r = variance_constrained_to(bayes, target, opts);
  r.diagnostics.truncated = r.diagnostics.truncated || diag.truncated;
  r.prior_used = prior;
  return r;
}

DenoiseReport marginal_variance_constrained(const Dataset& data, const LikelihoodModel& model,
                                            const MatrixXd& bayes,
                                            const DiscreteDistribution& prior,
                                            const VcbOptions& opts) {
  require_rows(bayes, data);
  ReportDiagnostics diag;
  const Moments target =
      opts.moments == MomentSource::Data ? data_moments(data, model, diag) : prior_moments(prior);
  DenoiseReport r = variance_constrained_to(bayes, target, opts);
  r.method = Method::MVCB;
  r.diagnostics.truncated = r.diagnostics.truncated || diag.truncated;
  r.prior_used = prior;
  return r;
}

DenoiseReport conditional_variance_constrained(const Dataset& data, const LikelihoodModel& model,
                                               const DiscreteDistribution& prior,
                                               const CvcbOptions& opts) {
  prior.validate();
  const PosteriorTable table = posterior_table(prior, data, model);
  const MatrixXd bayes = bayes_denoise(table);
  const Moments target = prior_moments(prior);

  DenoiseReport r;
  r.method = Method::CVCB;
  r.values.resize(bayes.rows(), bayes.cols());
  r.group_of_row.assign(std::size_t(data.n()), 0);
  r.target = target;
  r.prior_used = prior;
  if (!bures::is_positive_definite(target.cov)) r.diagnostics.truncated = true;

  const auto groups = model.heterogeneity_groups(data.n());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& rows = groups[g];
    const std::uint64_t seed = derive_seed(opts.seed, g);
    r.diagnostics.seeds.push_back(seed);
    if (rows.size() < 2) {
      r.diagnostics.warnings.push_back("GroupTooSmall: group " + std::to_string(g) + " has " +
                                       std::to_string(rows.size()) + " row(s)");
    }
    const MatrixXd m_xi = conditional_cov_of_bayes(model, rows.front(), prior, target.mean,
                                                   opts.mc_samples, seed);
    const MatrixXd src = source_cov(m_xi, opts.pd_ridge, r.diagnostics);
    const AffineDenoiser map = vcb_map(src, target.mean, target);
    for (Eigen::Index i : rows) {
      r.values.row(i) = (map.slope * bayes.row(i).transpose() + map.intercept).transpose();
      r.group_of_row[std::size_t(i)] = Eigen::Index(g);
    }
    r.group_maps.push_back(map);
  }
  return r;
}

DenoiseReport distribution_constrained(const MatrixXd& bayes, const DiscreteDistribution& prior,
                                       const LpOptions& lp) {
  prior.validate();
  if (bayes.rows() < 1) throw Error(ErrorCode::EmptyDataset, "no Bayes values to transport");
  if (bayes.cols() != prior.dim()) {
    throw Error(ErrorCode::DimensionError, "prior dimension does not match the Bayes values");
  }
  const Eigen::Index n = bayes.rows();
  const VectorXd rows = VectorXd::Constant(n, 1.0 / double(n));
  Coupling pi = solve_ot(squared_distance_cost(bayes, prior.atoms), rows, prior.weights, lp);

  DenoiseReport r;
  r.method = Method::DCB;
  r.values = barycentric_projection(pi, prior.atoms);
  r.objective = pi.objective;
  r.constraint_residuals = pi.col_sums() - prior.weights;
  r.diagnostics.col_marginal_residual = r.constraint_residuals.cwiseAbs().maxCoeff();
  r.diagnostics.iterations = pi.iterations;
  r.diagnostics.bland_pivots = pi.bland_pivots;
  r.diagnostics.min_reduced_cost = pi.min_reduced_cost;
  r.diagnostics.max_slackness_violation = pi.max_slackness_violation;
  r.prior_used = prior;
  r.projected = prior;
  r.coupling = std::move(pi);
  return r;
}

MatrixXd gcb_grid(const Dataset& data, const LikelihoodModel& model,
                  const DiscreteDistribution& prior, const GcbGridOptions& opts) {
  const MatrixXd x = standardized(model, data);
  const Eigen::Index m = x.cols();
  if (prior.dim() != m) throw Error(ErrorCode::DimensionError, "prior dimension mismatch");
  const int k = opts.points_per_axis > 0 ? opts.points_per_axis : (m == 1 ? 200 : 50);
  const double total = std::pow(double(k), double(m)) + double(prior.size());
  if (total > double(opts.max_atoms)) {
    throw Error(ErrorCode::GridTooLarge, "GCB grid would hold " + std::to_string(long(total)) + " atoms");
  }
  VectorXd lo = x.colwise().minCoeff().transpose();
  VectorXd hi = x.colwise().maxCoeff().transpose();
  if (prior.size() > 0) {
    lo = lo.cwiseMin(prior.atoms.colwise().minCoeff().transpose());
    hi = hi.cwiseMax(prior.atoms.colwise().maxCoeff().transpose());
  }
  const VectorXd pad = (hi - lo) * opts.expand;
  lo -= pad;
  hi += pad;

  const Eigen::Index lattice = Eigen::Index(std::llround(std::pow(double(k), double(m))));
  MatrixXd grid(lattice + prior.size(), m);
  std::vector<int> idx(std::size_t(m), 0);
  for (Eigen::Index p = 0; p < lattice; ++p) {
    for (Eigen::Index c = 0; c < m; ++c) {
      const double step = k > 1 ? (hi[c] - lo[c]) / double(k - 1) : 0.0;
      grid(p, c) = k > 1 ? lo[c] + step * idx[std::size_t(c)] : 0.5 * (lo[c] + hi[c]);
    }
    for (std::size_t c = 0; c < idx.size(); ++c) {
      if (++idx[c] < k) break;
      idx[c] = 0;
    }
  }
  grid.bottomRows(prior.size()) = prior.atoms;
  return grid;
}

DenoiseReport general_constrained_on_grid(const MatrixXd& bayes, const MatrixXd& grid,
                                          const ConstraintSpec& constraints, const LpOptions& lp) {
  if (bayes.rows() < 1) throw Error(ErrorCode::EmptyDataset, "no Bayes values to transport");
  if (grid.cols() != bayes.cols()) throw Error(ErrorCode::DimensionError, "grid dimension mismatch");
  const Eigen::Index n = bayes.rows();
  const VectorXd rows = VectorXd::Constant(n, 1.0 / double(n));
  Coupling pi;
  try {
    pi = solve_constrained_coupling(squared_distance_cost(bayes, grid), rows, constraints, grid, lp);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::Infeasible) throw;
    throw Error(ErrorCode::GridInfeasible,
                std::string(e.what()) + " (grid of " + std::to_string(grid.rows()) +
                    " atoms; include the prior atoms or widen the box)");
  }

  DenoiseReport r;
  r.method = Method::GCB;
  r.values = barycentric_projection(pi, grid);
  r.objective = pi.objective;
  r.constraint_residuals = pi.constraint_residuals;
  r.projection_residuals =
      constraints.evaluate(r.values).colwise().mean().transpose() - constraints.targets;
  r.diagnostics.iterations = pi.iterations;
  r.diagnostics.bland_pivots = pi.bland_pivots;
  r.diagnostics.min_reduced_cost = pi.min_reduced_cost;
  r.diagnostics.max_slackness_violation = pi.max_slackness_violation;

  const VectorXd col = pi.col_sums();
  DiscreteDistribution h;
  h.atoms = grid;
  h.weights = col / col.sum();
  r.projected = h.pruned(0.0);
  r.grid = grid;
  r.coupling = std::move(pi);
  return r;
}

DenoiseReport general_constrained(const Dataset& data, const LikelihoodModel& model,
                                  const MatrixXd& bayes, const DiscreteDistribution& prior,
                                  ConstraintSpec constraints, const GcbGridOptions& grid_opts,
                                  const LpOptions& lp) {
  require_rows(bayes, data);
  prior.validate();
  if (grid_opts.targets_from_prior || constraints.targets.size() != constraints.size()) {
    constraints.set_targets_from(prior);
  }
  const MatrixXd grid = gcb_grid(data, model, prior, grid_opts);
  DenoiseReport r = general_constrained_on_grid(bayes, grid, constraints, lp);
  r.prior_used = prior;
  return r;
}

Metrics diagnostics(const MatrixXd& values, const std::optional<Moments>& target,
                    const std::optional<DiscreteDistribution>& prior,
                    const std::optional<MatrixXd>& latents, const VectorXd& constraint_residuals) {
  Metrics out;
  out.constraint_residuals = constraint_residuals;
  if (latents) {
    if (latents->rows() != values.rows() || latents->cols() != values.cols()) {
      throw Error(ErrorCode::RowCountMismatch, "latents do not match the denoised values");
    }
    out.empirical_risk = (values - *latents).rowwise().squaredNorm().mean();
  }
  std::optional<Moments> ref = target;
  if (!ref && prior) ref = prior_moments(*prior);
  if (ref && values.rows() > 0) {
    out.mean_residual = (sample_mean(values) - ref->mean).cwiseAbs().maxCoeff();
    if (values.rows() > 1) out.cov_residual = rel_frobenius(sample_cov(values), ref->cov);
  }
  if (prior && values.rows() > 0 &&
      (values.cols() == 1 || values.rows() * prior->size() <= LpOptions{}.max_entries)) {
    out.w2_to_prior = w2_sq(DiscreteDistribution::uniform(values), *prior);
  }
  return out;
}

Metrics diagnostics(const DenoiseReport& report, const std::optional<DiscreteDistribution>& prior,
                    const std::optional<MatrixXd>& latents) {
  const auto& p = prior ? prior : report.prior_used;
  return diagnostics(report.values, report.target, p, latents, report.constraint_residuals);
}

}  // namespace cebd
