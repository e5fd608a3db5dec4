#include "cebd/gmodel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <string>

#include "cebd/stats.hpp"

namespace cebd {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

MatrixXd gather_cols(const MatrixXd& p, const std::vector<Eigen::Index>& cols) {
  MatrixXd out(p.rows(), Eigen::Index(cols.size()));
  for (std::size_t k = 0; k < cols.size(); ++k) out.col(Eigen::Index(k)) = p.col(cols[k]);
  return out;
}

double mean_log(const VectorXd& f) {
  if (f.size() == 0 || f.minCoeff() <= 0.0) return -kInf;
  return f.array().log().mean();
}

// Constrained Newton ascent of mean(log(P_S w)) over the simplex restricted
// to the atoms in `support`. Atoms whose weight reaches zero leave the support.
int newton_on_support(const MatrixXd& p, std::vector<Eigen::Index>& support, VectorXd& ws) {
  const double n = double(p.rows());
  int iters = 0;
  for (; iters < 200 && !support.empty(); ++iters) {
    const Eigen::Index s = Eigen::Index(support.size());
    const MatrixXd ps = gather_cols(p, support);
    const VectorXd f = ps * ws;
    const VectorXd inv = f.cwiseInverse();
    const VectorXd g = ps.transpose() * inv / n;
    if (s == 1) break;
    const MatrixXd y = inv.asDiagonal() * ps;
    MatrixXd q = y.transpose() * y / n;
    q.diagonal().array() += 1e-12 * q.trace() / double(s) + 1e-300;
    const Eigen::LDLT<MatrixXd> ldlt(q);
    const VectorXd a = ldlt.solve(g);
    const VectorXd b = ldlt.solve(VectorXd::Ones(s));
    const double nu = a.sum() / b.sum();
    VectorXd d = a - nu * b;
    d.array() -= d.mean();  // keep the step on the simplex exactly
    const double decrement = g.dot(d);
    if (!(decrement > 1e-20)) break;
    if ((g.array() - 1.0).abs().maxCoeff() < 1e-13) break;

    double tmax = kInf;
    Eigen::Index blocking = -1;
    for (Eigen::Index k = 0; k < s; ++k) {
      if (d[k] < 0.0) {
        const double t = -ws[k] / d[k];
        if (t < tmax) {
          tmax = t;
          blocking = k;
        }
      }
    }
    double t = std::min(1.0, tmax);
    const double phi0 = mean_log(f);
    bool accepted = false;
    while (t > 1e-14) {
      const VectorXd trial = (ws + t * d).cwiseMax(0.0);
      if (mean_log(ps * trial) >= phi0 + 1e-4 * t * decrement) {
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) break;
    const bool hit_boundary = (t == tmax);
    ws = (ws + t * d).cwiseMax(0.0);
    if (hit_boundary && blocking >= 0) ws[blocking] = 0.0;

    std::vector<Eigen::Index> kept;
    std::vector<double> kept_w;
    for (Eigen::Index k = 0; k < s; ++k) {
      if (ws[k] > 0.0) {
        kept.push_back(support[std::size_t(k)]);
        kept_w.push_back(ws[k]);
      }
    }
    support = std::move(kept);
    ws = Eigen::Map<VectorXd>(kept_w.data(), Eigen::Index(kept_w.size()));
    ws /= ws.sum();
  }
  return iters;
}

// Moves mass alpha onto atom c along (1 - alpha) w + alpha e_c, with alpha
// maximising the concave objective. Returns alpha.
double vertex_step(const VectorXd& f, const Eigen::Ref<const VectorXd>& pc) {
  auto slope = [&](double alpha) {
    const VectorXd mix = (1.0 - alpha) * f + alpha * pc;
    return ((pc - f).array() / mix.array()).mean();
  };
  if (slope(0.0) <= 0.0) return 0.0;
  double lo = 0.0, hi = 1.0;
  if (slope(1.0 - 1e-12) > 0.0) return 1.0 - 1e-12;
  for (int it = 0; it < 60; ++it) {
    const double mid = 0.5 * (lo + hi);
    (slope(mid) > 0.0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

double kkt_gap_of(const VectorXd& g, const VectorXd& w) {
  double gap = std::max(0.0, g.maxCoeff() - 1.0);
  for (Eigen::Index j = 0; j < w.size(); ++j) {
    if (w[j] > 1e-8) gap = std::max(gap, 1.0 - g[j]);
  }
  return gap;
}

VectorXd logsumexp_rows(const MatrixXd& l) {
  const VectorXd mx = l.rowwise().maxCoeff();
  VectorXd out(l.rows());
  for (Eigen::Index i = 0; i < l.rows(); ++i) {
    if (!std::isfinite(mx[i])) {
      out[i] = mx[i];
      continue;
    }
    out[i] = mx[i] + std::log((l.row(i).array() - mx[i]).exp().sum());
  }
  return out;
}

MatrixXd log_weighted(const MatrixXd& loglik, const VectorXd& w) {
  MatrixXd l = loglik;
  for (Eigen::Index j = 0; j < w.size(); ++j) {
    l.col(j).array() += (w[j] > 0.0 ? std::log(w[j]) : -kInf);
  }
  return l;
}

double data_diameter(const MatrixXd& x) {
  if (x.rows() == 0) return 0.0;
  return (x.colwise().maxCoeff() - x.colwise().minCoeff()).norm();
}

}  // namespace

MatrixXd build_grid(const Dataset& data, const LikelihoodModel& model, const GridOptions& opts) {
  if (data.n() < 1) throw Error(ErrorCode::EmptyDataset, "build_grid: no observations");
  const MatrixXd x = standardized(model, data);
  const Eigen::Index m = x.cols();
  if (opts.strategy == GridStrategy::Exemplar) {
    std::map<std::vector<double>, bool> seen;
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      std::vector<double> key(static_cast<std::size_t>(m));
      for (Eigen::Index c = 0; c < m; ++c) key[std::size_t(c)] = x(i, c);
      if (seen.emplace(std::move(key), true).second) rows.push_back(i);
    }
    if (Eigen::Index(rows.size()) > opts.max_atoms) {
      throw Error(ErrorCode::GridTooLarge, "exemplar grid exceeds the atom cap");
    }
    MatrixXd out(Eigen::Index(rows.size()), m);
    for (std::size_t k = 0; k < rows.size(); ++k) out.row(Eigen::Index(k)) = x.row(rows[k]);
    return out;
  }
  const int k = std::max(1, opts.points_per_axis);
  const double total = std::pow(double(k), double(m));
  if (total > double(opts.max_atoms)) {
    throw Error(ErrorCode::GridTooLarge,
                "lattice of " + std::to_string(k) + "^" + std::to_string(m) + " atoms exceeds cap");
  }
  VectorXd lo = x.colwise().minCoeff().transpose();
  VectorXd hi = x.colwise().maxCoeff().transpose();
  if (model.is_poisson()) lo = lo.cwiseMax(0.0);
  const Eigen::Index count = Eigen::Index(total);
  MatrixXd out(count, m);
  for (Eigen::Index idx = 0; idx < count; ++idx) {
    Eigen::Index rem = idx;
    for (Eigen::Index c = 0; c < m; ++c) {
      const Eigen::Index pos = rem % k;
      rem /= k;
      out(idx, c) = (k == 1) ? 0.5 * (lo[c] + hi[c])
                             : lo[c] + (hi[c] - lo[c]) * double(pos) / double(k - 1);
    }
  }
  return out;
}

VectorXd npmle_gradient(const MatrixXd& loglik, const VectorXd& weights) {
  const VectorXd rowmax = loglik.rowwise().maxCoeff();
  const MatrixXd p = (loglik.colwise() - rowmax).array().exp().matrix();
  const VectorXd f = p * weights;
  return p.transpose() * f.cwiseInverse() / double(loglik.rows());
}

WeightFit fit_weights_loglik(const MatrixXd& loglik, const MatrixXd& atoms, const FitOptions& opts) {
  const Eigen::Index n = loglik.rows();
  const Eigen::Index r = loglik.cols();
  if (n == 0) throw Error(ErrorCode::EmptyDataset, "fit_weights: no observations");
  if (r == 0) throw Error(ErrorCode::DomainError, "fit_weights: no atoms");
  const VectorXd rowmax = loglik.rowwise().maxCoeff();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!std::isfinite(rowmax[i])) {
      throw Error(ErrorCode::AllAtomsZeroLikelihood,
                  "observation row " + std::to_string(i) + " has zero likelihood under every atom");
    }
  }
  const MatrixXd p = (loglik.colwise() - rowmax).array().exp().matrix();
  const double offset = rowmax.mean();

  VectorXd w = VectorXd::Constant(r, 1.0 / double(r));
  VectorXd f = p * w;
  int iterations = 0;
  for (int it = 0; it < opts.em_warmup && r > 1; ++it, ++iterations) {
    const VectorXd g = p.transpose() * f.cwiseInverse() / double(n);
    w = w.cwiseProduct(g);
    w /= w.sum();
    f = p * w;
  }

  // Initial support: the heaviest atoms after warm-up.
  std::vector<Eigen::Index> order(static_cast<std::size_t>(r));
  std::iota(order.begin(), order.end(), Eigen::Index(0));
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return w[a] > w[b]; });
  const double wmax = w[order.front()];
  std::vector<Eigen::Index> support;
  for (Eigen::Index j : order) {
    if (w[j] < 1e-3 * wmax || support.size() >= 100) break;
    support.push_back(j);
  }
  VectorXd ws(Eigen::Index(support.size()));
  for (std::size_t k = 0; k < support.size(); ++k) ws[Eigen::Index(k)] = w[support[k]];
  ws /= ws.sum();

  const double target = 0.1 * opts.kkt_tol;
  double gap = kInf;
  double ll = -kInf;
  VectorXd full = VectorXd::Zero(r);
  for (int outer = 0; outer < opts.max_iter; ++outer) {
    iterations += 1 + newton_on_support(p, support, ws);
    full.setZero();
    for (std::size_t k = 0; k < support.size(); ++k) full[support[k]] = ws[Eigen::Index(k)];
    f = p * full;
    const VectorXd g = p.transpose() * f.cwiseInverse() / double(n);
    gap = kkt_gap_of(g, full);
    const double ll_new = mean_log(f) + offset;
    const double gain = ll_new - ll;
    ll = ll_new;
    if (gap <= target) break;
    if (gain < opts.tol && gap <= opts.kkt_tol) break;

    std::vector<Eigen::Index> cand;
    for (Eigen::Index j = 0; j < r; ++j) {
      if (full[j] == 0.0 && g[j] > 1.0 + target) cand.push_back(j);
    }
    std::stable_sort(cand.begin(), cand.end(),
                     [&](Eigen::Index a, Eigen::Index b) { return g[a] > g[b]; });
    if (cand.size() > 5) cand.resize(5);
    if (cand.empty()) {
      // Support-side violation only: another Newton pass unless it stalled.
      if (gain < opts.tol) break;
      continue;
    }
    for (Eigen::Index c : cand) {
      const double alpha = vertex_step(f, p.col(c));
      if (alpha <= 0.0) continue;
      ws *= (1.0 - alpha);
      support.push_back(c);
      ws.conservativeResize(ws.size() + 1);
      ws[ws.size() - 1] = alpha;
      f = (1.0 - alpha) * f + alpha * p.col(c);
    }
    ws /= ws.sum();
  }
  if (gap > opts.kkt_tol) {
    throw Error(ErrorCode::NonConvergence,
                "NPMLE weights did not reach the KKT certificate: gap " + std::to_string(gap));
  }

  WeightFit out;
  DiscreteDistribution d;
  d.atoms = atoms;
  d.weights = full / full.sum();
  out.prior = d.pruned(0.0);
  out.log_likelihood = ll;
  out.kkt_gap = gap;
  out.iterations = iterations;
  return out;
}

WeightFit fit_weights(const MatrixXd& atoms, const Dataset& data, const LikelihoodModel& model,
                      const FitOptions& opts) {
  model.validate(data.n(), data.m());
  return fit_weights_loglik(log_likelihood_matrix(model, data, atoms), atoms, opts);
}

EmResult em_refine(const DiscreteDistribution& mix, const Dataset& data,
                   const LikelihoodModel& model, const EmOptions& opts) {
  mix.validate();
  model.validate(data.n(), data.m());
  const Eigen::Index n = data.n();
  const Eigen::Index m = data.m();
  DiscreteDistribution cur = mix.pruned(0.0);
  EmResult res;

  // Precision per heterogeneity group for the Gaussian M-step.
  std::vector<std::vector<Eigen::Index>> groups;
  std::vector<MatrixXd> precisions;
  if (model.is_gaussian()) {
    groups = model.heterogeneity_groups(n);
    for (const auto& g : groups) precisions.push_back(model.row_cov(g.front()).inverse());
  }

  double prev = -kInf;
  int it = 0;
  for (; it < opts.max_iter; ++it) {
    const MatrixXd lw = log_weighted(log_likelihood_matrix(model, data, cur.atoms), cur.weights);
    const VectorXd lse = logsumexp_rows(lw);
    const double ll = lse.mean();
    res.log_likelihood_trace.push_back(ll);
    if (it > 0 && ll - prev < opts.tol) break;
    prev = ll;

    const MatrixXd resp = (lw.colwise() - lse).array().exp().matrix();
    const VectorXd mass = resp.colwise().sum().transpose();
    const Eigen::Index r = cur.size();
    MatrixXd atoms = cur.atoms;
    if (model.is_poisson()) {
      const auto& exposure = std::get<PoissonExposure>(model.kind()).exposure;
      const MatrixXd num = resp.transpose() * data.observations;
      const MatrixXd den = resp.transpose() * exposure;
      atoms = num.cwiseQuotient(den.cwiseMax(1e-300));
    } else {
      std::vector<MatrixXd> lhs(std::size_t(r), MatrixXd::Zero(m, m));
      MatrixXd rhs = MatrixXd::Zero(r, m);
      for (std::size_t g = 0; g < groups.size(); ++g) {
        const bool all = groups.size() == 1;
        const MatrixXd gresp = all ? resp : MatrixXd(resp(groups[g], Eigen::all));
        const VectorXd gmass = gresp.colwise().sum().transpose();
        const MatrixXd gsum = all ? MatrixXd(gresp.transpose() * data.observations)
                                  : MatrixXd(gresp.transpose() * data.observations(groups[g], Eigen::all));
        for (Eigen::Index j = 0; j < r; ++j) lhs[std::size_t(j)] += gmass[j] * precisions[g];
        rhs += gsum * precisions[g];  // precision is symmetric
      }
      for (Eigen::Index j = 0; j < r; ++j) {
        if (mass[j] > 0.0) {
          atoms.row(j) = lhs[std::size_t(j)].ldlt().solve(rhs.row(j).transpose()).transpose();
        }
      }
    }
    cur.atoms = atoms;
    cur.weights = mass / mass.sum();
    cur = cur.pruned(0.0);
  }
  res.iterations = it;
  const double radius = opts.merge_radius_rel * data_diameter(standardized(model, data));
  res.prior = radius > 0.0 ? cur.merged(radius) : cur;
  return res;
}

NpmleResult npmle(const Dataset& data, const LikelihoodModel& model, const NpmleOptions& opts) {
  const MatrixXd grid = build_grid(data, model, opts.grid);
  WeightFit wf = fit_weights(grid, data, model, opts.fit);
  int iterations = wf.iterations;
  if (opts.refine && opts.em.max_iter > 0) {
    const EmResult em = em_refine(wf.prior, data, model, opts.em);
    iterations += em.iterations;
    wf = fit_weights(em.prior.atoms, data, model, opts.fit);
    iterations += wf.iterations;
  }
  return {wf.prior, wf.log_likelihood, wf.kkt_gap, iterations};
}

SmoothFit smooth_npmle(const Dataset& data, const LikelihoodModel& model,
                       const MatrixXd& kernel_cov, const NpmleOptions& opts) {
  if (!model.is_gaussian()) {
    throw Error(ErrorCode::DomainError, "smooth NPMLE requires a Gaussian likelihood");
  }
  if (!bures::is_psd(kernel_cov)) {
    throw Error(ErrorCode::DomainError, "kernel covariance must be PSD");
  }
  const NpmleResult base = npmle(data, model.inflated(kernel_cov), opts);
  return {SmoothPrior{base.prior, kernel_cov}, base.log_likelihood, base.kkt_gap, base.iterations};
}

PosteriorTable posterior_table(const DiscreteDistribution& prior, const Dataset& data,
                               const LikelihoodModel& model) {
  prior.validate();
  const MatrixXd lw = log_weighted(log_likelihood_matrix(model, data, prior.atoms), prior.weights);
  const VectorXd lse = logsumexp_rows(lw);
  for (Eigen::Index i = 0; i < lse.size(); ++i) {
    if (!std::isfinite(lse[i])) {
      throw Error(ErrorCode::AllAtomsZeroLikelihood,
                  "observation row " + std::to_string(i) + " has zero posterior mass");
    }
  }
  PosteriorTable t;
  t.resp = (lw.colwise() - lse).array().exp().matrix();
  t.resp = t.resp.array().colwise() / t.resp.rowwise().sum().array();
  t.atoms = prior.atoms;
  t.kernel_shift = MatrixXd::Zero(data.n(), prior.dim());
  return t;
}

PosteriorTable posterior_table(const SmoothPrior& prior, const Dataset& data,
                               const LikelihoodModel& model) {
  if (!model.is_gaussian()) {
    throw Error(ErrorCode::DomainError, "smooth priors require a Gaussian likelihood");
  }
  PosteriorTable t = posterior_table(prior.base, data, model.inflated(prior.kernel_cov));
  const MatrixXd centre = t.resp * t.atoms;
  for (const auto& rows : model.heterogeneity_groups(data.n())) {
    const MatrixXd total = prior.kernel_cov + model.row_cov(rows.front());
    const MatrixXd gain = total.ldlt().solve(prior.kernel_cov).transpose();  // K (K + S)^{-1}
    for (Eigen::Index i : rows) {
      t.kernel_shift.row(i) =
          (gain * (data.observations.row(i) - centre.row(i)).transpose()).transpose();
    }
  }
  return t;
}

MatrixXd bayes_denoise(const PosteriorTable& table) {
  return table.resp * table.atoms + table.kernel_shift;
}

Moments prior_moments(const DiscreteDistribution& prior) {
  prior.validate();
  Moments mo;
  mo.cov = weighted_cov(prior.atoms, prior.weights, &mo.mean);
  return mo;
}

Moments prior_moments(const SmoothPrior& prior) {
  Moments mo = prior_moments(prior.base);
  mo.cov += prior.kernel_cov;
  return mo;
}

double mean_log_likelihood(const DiscreteDistribution& prior, const Dataset& data,
                           const LikelihoodModel& model) {
  return logsumexp_rows(log_weighted(log_likelihood_matrix(model, data, prior.atoms), prior.weights))
      .mean();
}

}  // namespace cebd
