#include "cebd/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <thread>

#include "cebd/error.hpp"
#include "cebd/gmodel.hpp"
#include "cebd/rng.hpp"
#include "cebd/scenarios.hpp"
#include "cebd/stats.hpp"

namespace cebd::cli {

namespace {

[[noreturn]] void config_error(const std::string& msg) { throw Error(ErrorCode::ConfigError, msg); }

std::string lower_key(std::string k) {
  std::replace(k.begin(), k.end(), '-', '_');
  return k;
}

template <typename T>
T get_as(const json& j, const std::string& key) {
  try {
    return j.get<T>();
  } catch (const json::exception&) {
    config_error("config key '" + key + "' has the wrong type");
  }
}

std::string get_string(const json& j, const std::string& key) {
  if (j.is_string()) return j.get<std::string>();
  if (j.is_number()) return j.dump();
  config_error("config key '" + key + "' must be a string");
}

MatrixXd get_matrix(const json& j, const std::string& key) {
  try {
    return io::matrix_from_json(j);
  } catch (const Error&) {
    config_error("config key '" + key + "' must be a number or a matrix");
  }
}

Method get_method(const json& j, const std::string& key) {
  const auto m = parse_method(get_string(j, key));
  if (!m) config_error("unknown method '" + get_string(j, key) + "'");
  return *m;
}

void require_one_of(const std::string& value, std::initializer_list<const char*> allowed,
                    const std::string& key) {
  for (const char* a : allowed)
    if (value == a) return;
  config_error("config key '" + key + "' has unsupported value '" + value + "'");
}

/// A scalar s stands for s * I in dimension m.
MatrixXd expand(const MatrixXd& s, Eigen::Index m, const std::string& what) {
  if (s.rows() == m && s.cols() == m) return s;
  if (s.size() == 1) return s(0, 0) * MatrixXd::Identity(m, m);
  config_error(what + " must be a scalar or a " + std::to_string(m) + "x" + std::to_string(m) + " matrix");
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// Inputs.

struct Inputs {
  io::Table table;
  Dataset data;
  LikelihoodModel model = LikelihoodModel::gaussian(MatrixXd::Identity(1, 1));
  std::optional<MatrixXd> latents;
  bool heterogeneity_columns = false;
};

std::vector<Eigen::Index> subsample_rows(Eigen::Index n, long keep, std::uint64_t seed) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Eigen::Index(0));
  if (keep <= 0 || keep >= n) return idx;
  CounterRng rng(derive_seed(seed, 3));
  for (long k = 0; k < keep; ++k) {
    const auto j = std::size_t(k) + std::size_t(rng() % std::uint64_t(n - k));
    std::swap(idx[std::size_t(k)], idx[j]);
  }
  idx.resize(std::size_t(keep));
  std::sort(idx.begin(), idx.end());
  return idx;
}

LikelihoodModel build_model(const RunConfig& cfg, const io::LoadedData& d) {
  const Eigen::Index n = d.data.n(), m = d.data.m();
  if (cfg.family == "gaussian") {
    if (d.exposure) throw Error(ErrorCode::ColumnMismatch, "lambda columns given for a gaussian model");
    if (!d.row_covs.empty()) return LikelihoodModel::gaussian_heteroscedastic(d.row_covs);
    return LikelihoodModel::gaussian(cfg.noise_cov ? expand(*cfg.noise_cov, m, "noise_cov")
                                                   : MatrixXd(cfg.noise_var * MatrixXd::Identity(m, m)));
  }
  if (!d.row_covs.empty()) throw Error(ErrorCode::ColumnMismatch, "sigma columns given for a poisson model");
  return LikelihoodModel::poisson(d.exposure ? *d.exposure : MatrixXd::Ones(n, m));
}

Inputs load_inputs(const RunConfig& cfg) {
  if (cfg.input.empty()) config_error("missing input CSV (--input)");
  io::Table t = io::read_csv(cfg.input);
  if (t.values.rows() == 0) throw Error(ErrorCode::EmptyDataset, "input has no data rows");
  const auto keep = subsample_rows(t.values.rows(), cfg.subsample, cfg.seed);
  if (Eigen::Index(keep.size()) < t.values.rows()) {
    MatrixXd v(Eigen::Index(keep.size()), t.values.cols());
    for (std::size_t i = 0; i < keep.size(); ++i) v.row(Eigen::Index(i)) = t.values.row(keep[i]);
    t.values = std::move(v);
  }
  const io::LoadedData d = io::dataset_from_table(t);
  Inputs in{t, d.data, build_model(cfg, d), d.latents, !d.row_covs.empty() || d.exposure.has_value()};
  in.model.validate(in.data.n(), in.data.m());
  return in;
}

// ---------------------------------------------------------------------------
// Priors.

struct FittedPrior {
  std::string source;
  DiscreteDistribution base;
  std::optional<MatrixXd> kernel_cov;
  std::optional<ConjugateSpec> conjugate;
  double kkt_gap = std::numeric_limits<double>::quiet_NaN();
  json fit = json::object();

  bool smooth() const { return kernel_cov && kernel_cov->norm() > 0.0; }
  std::optional<DiscreteDistribution> discrete() const {
    if (conjugate || source == "none") return std::nullopt;
    return base;
  }
  SmoothPrior as_smooth() const { return {base, *kernel_cov}; }
};

NpmleOptions npmle_options(const RunConfig& cfg, Eigen::Index n) {
  NpmleOptions o;
  const bool lattice = cfg.grid == "lattice" || (cfg.grid == "auto" && n > 1000);
  o.grid.strategy = lattice ? GridStrategy::Lattice : GridStrategy::Exemplar;
  o.grid.points_per_axis = cfg.grid_points;
  o.grid.max_atoms = cfg.max_atoms;
  o.fit.tol = cfg.fit_tol;
  o.fit.kkt_tol = cfg.kkt_tol;
  o.fit.max_iter = cfg.max_iter;
  o.refine = cfg.refine;
  return o;
}

struct PriorHints {
  std::optional<MatrixXd> kernel_lower_bound;
  std::optional<SmoothPrior> truth;
};

FittedPrior obtain_prior(const RunConfig& cfg, const Dataset& data, const LikelihoodModel& model,
                         const PriorHints& hints = {}) {
  const Eigen::Index m = data.m();
  std::string kind = cfg.prior;
  if (kind == "auto") {
    if (!cfg.prior_file.empty()) kind = "fixed";
    else if (cfg.kernel_cov || hints.kernel_lower_bound) kind = "smooth-npmle";
    else kind = "npmle";
  }
  FittedPrior p;
  p.source = kind;
  if (kind == "fixed") {
    if (cfg.prior_file.empty()) config_error("prior 'fixed' needs --prior-file");
    io::PriorFile f = io::read_prior(cfg.prior_file);
    if (f.base.dim() != m) throw Error(ErrorCode::DimensionError, "prior dimension differs from the data");
    p.base = std::move(f.base);
    p.kernel_cov = std::move(f.kernel_cov);
  } else if (kind == "npmle") {
    const NpmleResult r = npmle(data, model, npmle_options(cfg, data.n()));
    p.base = r.prior;
    p.kkt_gap = r.kkt_gap;
    p.fit = {{"log_likelihood", r.log_likelihood}, {"kkt_gap", r.kkt_gap}, {"iterations", r.iterations},
             {"atoms", r.prior.size()}};
  } else if (kind == "smooth-npmle") {
    if (!model.is_gaussian()) config_error("smooth-npmle needs a gaussian model");
    MatrixXd k;
    if (cfg.kernel_cov) k = expand(*cfg.kernel_cov, m, "kernel_cov");
    else if (hints.kernel_lower_bound) k = *hints.kernel_lower_bound;
    else config_error("smooth-npmle needs kernel_cov");
    const SmoothFit r = smooth_npmle(data, model, k, npmle_options(cfg, data.n()));
    p.base = r.prior.base;
    p.kernel_cov = r.prior.kernel_cov;
    p.kkt_gap = r.kkt_gap;
    p.fit = {{"log_likelihood", r.log_likelihood}, {"kkt_gap", r.kkt_gap}, {"iterations", r.iterations},
             {"atoms", r.prior.base.size()}};
  } else if (kind == "conjugate") {
    if (m != 1) config_error("conjugate priors need m = 1");
    ConjugateSpec spec;
    if (model.is_poisson()) {
      if ((model.row_exposure(0).array() != 1.0).any() || model.is_heterogeneous())
        config_error("conjugate poisson needs unit exposure");
      spec.family = ConjugateFamily::PoissonGamma;
    } else {
      if (model.is_heterogeneous()) config_error("conjugate gaussian needs a homoscedastic model");
      spec.family = ConjugateFamily::Gaussian;
      spec.noise_var = model.row_cov(0)(0, 0);
    }
    p.conjugate = spec;
  } else if (kind == "oracle") {
    if (!hints.truth) config_error("prior 'oracle' needs a scenario with a known finite mixture prior");
    p.base = hints.truth->base;
    p.kernel_cov = hints.truth->kernel_cov;
  } else {
    config_error("unknown prior '" + kind + "'");
  }
  return p;
}

MatrixXd bayes_values(const FittedPrior& p, const Dataset& data, const LikelihoodModel& model) {
  if (p.conjugate) return conjugate_bayes(*p.conjugate, data).apply(standardized(model, data));
  if (p.smooth()) return bayes_denoise(posterior_table(p.as_smooth(), data, model));
  return bayes_denoise(posterior_table(p.base, data, model));
}

// ---------------------------------------------------------------------------
// Denoisers.

MomentSource moment_source(const std::string& s) {
  if (s == "data") return MomentSource::Data;
  if (s == "prior") return MomentSource::Prior;
  return MomentSource::Auto;
}

DenoiseReport run_method(Method method, const RunConfig& cfg, const Dataset& data,
                         const LikelihoodModel& model, const FittedPrior& p, const MatrixXd& bayes,
                         bool heterogeneity_columns) {
  if (p.conjugate) {
    if (method == Method::Bayes) return bayes_report(bayes);
    if (method != Method::VCB && method != Method::Conjugate)
      config_error("conjugate priors support only bayes, vcb and conjugate");
    const AffineDenoiser a = conjugate_vcb(*p.conjugate, data);
    DenoiseReport r;
    r.method = Method::Conjugate;
    r.values = a.apply(standardized(model, data));
    r.affine = a;
    r.target = Moments{sample_mean(r.values), sample_cov(r.values)};
    return r;
  }
  if (method == Method::Conjugate) config_error("method 'conjugate' needs prior 'conjugate'");

  const VcbOptions vopts{moment_source(cfg.vcb_moments), cfg.pd_ridge};
  const bool prior_moments_wanted =
      vopts.moments == MomentSource::Prior || (method == Method::MVCB && vopts.moments == MomentSource::Auto);
  LpOptions lp;
  lp.max_entries = cfg.max_entries;

  DenoiseReport r;
  std::vector<std::string> warnings;
  switch (method) {
    case Method::Bayes:
      r = bayes_report(bayes, p.discrete());
      break;
    case Method::VCB:
    case Method::MVCB:
      if (cfg.vcb_moments == "self") {
        r = variance_constrained_to(bayes, Moments{sample_mean(bayes), sample_cov(bayes)}, vopts);
      } else if (p.smooth() && prior_moments_wanted) {
        r = variance_constrained_to(bayes, prior_moments(p.as_smooth()), vopts);
      } else if (method == Method::VCB) {
        r = variance_constrained(data, model, bayes, p.discrete(), vopts);
      } else {
        r = marginal_variance_constrained(data, model, bayes, p.base, vopts);
      }
      r.method = method;
      break;
    case Method::CVCB:
      if (!heterogeneity_columns) config_error("cvcb needs sigma or lambda columns in the input");
      if (p.smooth()) warnings.push_back("SmoothPriorBaseUsed");
      r = conditional_variance_constrained(data, model, p.base, {cfg.mc_samples, cfg.seed, cfg.pd_ridge});
      break;
    case Method::DCB:
    case Method::MDCB:
      if (p.smooth()) warnings.push_back("SmoothPriorBaseUsed");
      r = distribution_constrained(bayes, p.base, lp);
      r.method = method;
      break;
    case Method::GCB:
    case Method::MGCB: {
      if (p.smooth()) warnings.push_back("SmoothPriorBaseUsed");
      ConstraintSpec spec = ConstraintSpec::moments(data.m(), cfg.gcb_degree);
      if (cfg.gcb_nonnegative) {
        spec.add(ConstraintFunction::box_distance(
            VectorXd::Zero(data.m()), VectorXd::Constant(data.m(), std::numeric_limits<double>::infinity())));
      }
      GcbGridOptions g;
      g.points_per_axis = cfg.gcb_points;
      g.expand = cfg.gcb_expand;
      g.max_atoms = cfg.max_atoms;
      r = general_constrained(data, model, bayes, p.base, std::move(spec), g, lp);
      r.method = method;
      break;
    }
    case Method::Conjugate:
      break;
  }
  r.diagnostics.kkt_gap = p.kkt_gap;
  for (auto& w : warnings) r.diagnostics.warnings.push_back(std::move(w));
  return r;
}

json affine_json(const AffineDenoiser& a) {
  return {{"slope", io::matrix_json(a.slope)}, {"intercept", io::vector_json(a.intercept)}};
}

json report_json(const DenoiseReport& r, const Metrics& met) {
  json j;
  j["method"] = std::string(method_name(r.method));
  j["n"] = r.values.rows();
  j["m"] = r.values.cols();
  j["objective"] = r.objective;
  j["constraint_residuals"] = io::vector_json(r.constraint_residuals);
  j["projection_residuals"] = io::vector_json(r.projection_residuals);
  j["col_marginal_residual"] = r.diagnostics.col_marginal_residual;
  j["kkt_gap"] = r.diagnostics.kkt_gap;
  j["empirical_risk"] = met.empirical_risk ? json(*met.empirical_risk) : json(nullptr);
  j["mean_residual"] = met.mean_residual;
  j["cov_residual"] = met.cov_residual;
  j["w2_to_prior"] = met.w2_to_prior ? json(*met.w2_to_prior) : json(nullptr);
  j["affine"] = r.affine ? affine_json(*r.affine) : json(nullptr);
  json groups = json::array();
  for (const auto& g : r.group_maps) groups.push_back(affine_json(g));
  j["group_maps"] = std::move(groups);
  if (r.target) j["target"] = {{"mean", io::vector_json(r.target->mean)}, {"cov", io::matrix_json(r.target->cov)}};
  j["diagnostics"] = io::diagnostics_json(r.diagnostics);
  return j;
}

// ---------------------------------------------------------------------------
// Simulation.

struct Scenario {
  Simulation sim;
  bool heterogeneous = false;
};

Scenario make_scenario(const RunConfig& cfg, std::uint64_t seed) {
  const std::string& s = cfg.scenario;
  auto n_or = [&](long def) { return Eigen::Index(cfg.n > 0 ? cfg.n : def); };
  if (s == "figure1") return {simulate_figure1(n_or(2000), seed), false};
  if (s == "figure7") return {simulate_figure7(n_or(1500), seed), true};
  if (s == "conjugate-gaussian")
    return {simulate_conjugate_gaussian(n_or(1000), cfg.prior_mean, cfg.prior_var, cfg.noise_var, seed), false};
  if (s == "conjugate-poisson")
    return {simulate_conjugate_poisson(n_or(1000), cfg.shape, cfg.scale, seed), false};
  if (s == "custom") {
    const json& c = cfg.custom;
    if (!c.is_object() || !c.contains("prior")) config_error("scenario 'custom' needs custom.prior");
    io::PriorFile pf;
    try {
      pf = io::prior_from_json(c.at("prior"));
    } catch (const Error& e) {
      config_error(std::string("custom.prior: ") + e.what());
    }
    const std::string family = c.contains("family") ? get_string(c.at("family"), "custom.family") : cfg.family;
    const Eigen::Index m = pf.base.dim();
    if (family == "poisson") {
      if (pf.kernel_cov) config_error("custom poisson priors must be discrete");
      const double exposure = c.contains("exposure") ? get_as<double>(c.at("exposure"), "custom.exposure") : 1.0;
      return {simulate_poisson_mixture(pf.base, exposure, n_or(1000), seed), false};
    }
    if (family != "gaussian") config_error("custom.family must be gaussian or poisson");
    const MatrixXd noise =
        c.contains("noise_cov") ? expand(get_matrix(c.at("noise_cov"), "custom.noise_cov"), m, "custom.noise_cov")
                                : MatrixXd::Identity(m, m);
    const MatrixXd kernel = pf.kernel_cov ? *pf.kernel_cov : MatrixXd::Zero(m, m);
    return {simulate_gaussian_mixture({pf.base, kernel}, noise, n_or(1000), seed), false};
  }
  throw Error(ErrorCode::UnknownScenario, "unknown scenario '" + s + "'");
}

/// Heterogeneity groups ordered by noise level, so group columns line up
/// across replications.
std::vector<std::vector<Eigen::Index>> ordered_groups(const LikelihoodModel& model, Eigen::Index n) {
  auto groups = model.heterogeneity_groups(n);
  auto level = [&](const std::vector<Eigen::Index>& g) {
    return model.is_poisson() ? -model.row_exposure(g.front()).sum() : model.row_cov(g.front()).trace();
  };
  std::stable_sort(groups.begin(), groups.end(),
                   [&](const auto& a, const auto& b) { return level(a) < level(b); });
  return groups;
}

struct ReplicationResult {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::vector<std::string>> scatter;
  std::size_t groups = 0;
  std::optional<io::Table> dataset;
};

std::string fmt(double x) { return io::format_double(x); }
std::string fmt(const std::optional<double>& x) { return x ? fmt(*x) : std::string("nan"); }

ReplicationResult run_replication(const RunConfig& cfg, int rep, const std::vector<Method>& methods) {
  const std::uint64_t seed = derive_seed(cfg.seed, std::uint64_t(rep));
  const Scenario sc = make_scenario(cfg, seed);
  const Simulation& sim = sc.sim;
  PriorHints hints{sim.kernel_lower_bound, std::nullopt};
  if (sim.true_prior) hints.truth = sim.true_prior;
  RunConfig local = cfg;
  local.seed = seed;
  const FittedPrior prior = obtain_prior(local, sim.data, sim.model, hints);
  const MatrixXd bayes = bayes_values(prior, sim.data, sim.model);
  const MatrixXd z = standardized(sim.model, sim.data);
  const auto groups = sc.heterogeneous ? ordered_groups(sim.model, sim.data.n())
                                       : std::vector<std::vector<Eigen::Index>>{};

  ReplicationResult out;
  out.groups = groups.size();
  if (rep == 0) out.dataset = io::dataset_table(sim.data, sim.model, sim.latents);
  for (Method method : methods) {
    const DenoiseReport r = run_method(method, local, sim.data, sim.model, prior, bayes, sc.heterogeneous);
    const Metrics met = diagnostics(r, prior.discrete(), sim.latents);
    std::vector<std::string> row{std::to_string(rep), std::string(method_name(method)),
                                 std::to_string(sim.data.n()), fmt(met.empirical_risk),
                                 fmt(met.mean_residual), fmt(met.cov_residual), fmt(met.w2_to_prior),
                                 fmt(prior.kkt_gap)};
    for (const auto& g : groups) {
      MatrixXd vals(Eigen::Index(g.size()), r.values.cols());
      for (std::size_t i = 0; i < g.size(); ++i) vals.row(Eigen::Index(i)) = r.values.row(g[i]);
      row.push_back(fmt(sample_cov(vals).trace() / double(vals.cols())));
    }
    out.rows.push_back(std::move(row));

    if (rep < cfg.scatter_replications) {
      for (Eigen::Index i = 0; i < sim.data.n(); ++i) {
        std::vector<std::string> s{std::to_string(rep), std::string(method_name(method)), std::to_string(i)};
        for (Eigen::Index c = 0; c < z.cols(); ++c) s.push_back(fmt(sim.latents(i, c)));
        for (Eigen::Index c = 0; c < z.cols(); ++c) s.push_back(fmt(z(i, c)));
        for (Eigen::Index c = 0; c < z.cols(); ++c) s.push_back(fmt(r.values(i, c)));
        out.scatter.push_back(std::move(s));
      }
    }
  }
  return out;
}

void write_rows(const std::string& path, const std::vector<std::string>& header,
                const std::vector<std::vector<std::string>>& rows) {
  std::ofstream out(path);
  if (!out) config_error("cannot write " + path);
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t k = 0; k < cells.size(); ++k) out << (k ? "," : "") << cells[k];
    out << '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
}

}  // namespace

// ---------------------------------------------------------------------------
// Config.

RunConfig RunConfig::from_json(const json& j) {
  if (!j.is_object()) config_error("config must be a JSON object");
  RunConfig c;
  using Setter = std::function<void(const json&, const std::string&)>;
  auto str = [](std::string& f) -> Setter { return [&f](const json& v, const std::string& k) { f = get_string(v, k); }; };
  auto num = [](auto& f) -> Setter {
    return [&f](const json& v, const std::string& k) {
      if (!v.is_number() && !v.is_boolean()) config_error("config key '" + k + "' must be a number");
      f = get_as<std::remove_reference_t<decltype(f)>>(v, k);
    };
  };
  auto flag = [](bool& f) -> Setter {
    return [&f](const json& v, const std::string& k) {
      if (!v.is_boolean()) config_error("config key '" + k + "' must be true or false");
      f = v.get<bool>();
    };
  };
  auto mat = [](std::optional<MatrixXd>& f) -> Setter {
    return [&f](const json& v, const std::string& k) { f = get_matrix(v, k); };
  };
  const std::map<std::string, Setter> setters{
      {"input", str(c.input)},
      {"prior_file", str(c.prior_file)},
      {"output", str(c.output)},
      {"metrics", str(c.metrics)},
      {"latents", str(c.latents)},
      {"scatter", str(c.scatter)},
      {"coupling", str(c.coupling)},
      {"dataset", str(c.dataset)},
      {"family", str(c.family)},
      {"noise_cov", mat(c.noise_cov)},
      {"prior", str(c.prior)},
      {"kernel_cov", mat(c.kernel_cov)},
      {"grid", str(c.grid)},
      {"grid_points", num(c.grid_points)},
      {"max_atoms", num(c.max_atoms)},
      {"refine", flag(c.refine)},
      {"fit_tol", num(c.fit_tol)},
      {"kkt_tol", num(c.kkt_tol)},
      {"max_iter", num(c.max_iter)},
      {"method", [&c](const json& v, const std::string& k) { c.method = get_method(v, k); }},
      {"vcb_moments", str(c.vcb_moments)},
      {"pd_ridge", num(c.pd_ridge)},
      {"mc_samples", num(c.mc_samples)},
      {"gcb_degree", num(c.gcb_degree)},
      {"gcb_nonnegative", flag(c.gcb_nonnegative)},
      {"gcb_points", num(c.gcb_points)},
      {"gcb_expand", num(c.gcb_expand)},
      {"max_entries", num(c.max_entries)},
      {"bayes_from_input", flag(c.bayes_from_input)},
      {"scenario", str(c.scenario)},
      {"n", num(c.n)},
      {"replications", num(c.replications)},
      {"methods",
       [&c](const json& v, const std::string& k) {
         c.methods.clear();
         if (v.is_string()) {
           std::string s = v.get<std::string>();
           std::size_t start = 0;
           while (start <= s.size()) {
             const std::size_t comma = std::min(s.find(',', start), s.size());
             c.methods.push_back(get_method(json(s.substr(start, comma - start)), k));
             start = comma + 1;
           }
         } else if (v.is_array()) {
           for (const auto& e : v) c.methods.push_back(get_method(e, k));
         } else {
           config_error("config key 'methods' must be a list of method names");
         }
       }},
      {"threads", num(c.threads)},
      {"scatter_replications", num(c.scatter_replications)},
      {"prior_mean", num(c.prior_mean)},
      {"prior_var", num(c.prior_var)},
      {"noise_var", num(c.noise_var)},
      {"shape", num(c.shape)},
      {"scale", num(c.scale)},
      {"custom", [&c](const json& v, const std::string&) { c.custom = v; }},
      {"seed",
       [&c](const json& v, const std::string& k) {
         if (!v.is_number_integer()) config_error("config key '" + k + "' must be an integer");
         c.seed = v.is_number_unsigned() ? v.get<std::uint64_t>() : std::uint64_t(v.get<std::int64_t>());
       }},
      {"subsample", num(c.subsample)},
      {"runtime", flag(c.runtime)},
  };
  for (const auto& [key, value] : j.items()) {
    const auto it = setters.find(lower_key(key));
    if (it == setters.end()) config_error("unknown config key '" + key + "'");
    it->second(value, key);
  }
  require_one_of(c.family, {"gaussian", "poisson"}, "family");
  require_one_of(c.grid, {"auto", "exemplar", "lattice"}, "grid");
  require_one_of(c.vcb_moments, {"auto", "data", "prior", "self"}, "vcb_moments");
  require_one_of(c.prior, {"auto", "npmle", "smooth-npmle", "fixed", "conjugate", "oracle"}, "prior");
  if (c.grid_points < 1 || c.mc_samples < 1 || c.gcb_degree < 1 || c.replications < 0 || c.max_atoms < 1)
    config_error("grid_points, mc_samples, gcb_degree and max_atoms must be positive");
  return c;
}

json merge_config(const std::optional<std::string>& path,
                  const std::vector<std::pair<std::string, std::string>>& overrides) {
  json j = json::object();
  if (path) {
    std::ifstream in(*path);
    if (!in) config_error("cannot open config " + *path);
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      config_error(*path + ": " + e.what());
    }
    if (!j.is_object()) config_error("config must be a JSON object");
    json normalised = json::object();
    for (auto& [k, v] : j.items()) normalised[lower_key(k)] = v;
    j = std::move(normalised);
  }
  for (const auto& [k, v] : overrides) {
    json value = json::parse(v, nullptr, false);
    if (value.is_discarded()) value = v;
    j[lower_key(k)] = std::move(value);
  }
  return j;
}

// ---------------------------------------------------------------------------
// Commands.

json cmd_fit(const RunConfig& cfg) {
  const Inputs in = load_inputs(cfg);
  if (cfg.prior == "fixed" || cfg.prior == "conjugate" || cfg.prior == "oracle")
    config_error("fit needs prior npmle or smooth-npmle");
  RunConfig local = cfg;
  local.prior_file.clear();
  const FittedPrior p = obtain_prior(local, in.data, in.model);
  json j = p.smooth() ? io::prior_json(p.as_smooth()) : io::prior_json(p.base);
  j["fit"] = p.fit;
  if (!cfg.output.empty()) io::write_json(cfg.output, j);
  return j;
}

DenoiseOutput cmd_denoise(const RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  const Inputs in = load_inputs(cfg);
  const bool needs_prior = !(cfg.bayes_from_input && cfg.method == Method::VCB && cfg.vcb_moments != "prior");
  FittedPrior p;
  if (needs_prior) {
    p = obtain_prior(cfg, in.data, in.model);
  } else {
    p.source = "none";
  }

  MatrixXd bayes;
  if (cfg.bayes_from_input) {
    const auto d = in.table.numbered("d");
    if (Eigen::Index(d.size()) != in.data.m())
      throw Error(ErrorCode::ColumnMismatch, "bayes_from_input needs d1..dm columns");
    bayes = in.table.columns(d);
  } else {
    bayes = bayes_values(p, in.data, in.model);
  }

  const DenoiseReport r = run_method(cfg.method, cfg, in.data, in.model, p, bayes, in.heterogeneity_columns);
  const Metrics met = diagnostics(r, p.discrete(), in.latents);

  DenoiseOutput out;
  out.table = io::dataset_table(in.data, in.model, in.latents);
  io::append_columns(out.table, "d", r.values);
  out.metrics = report_json(r, met);
  out.metrics["prior"] = {{"source", p.source}, {"fit", p.fit}};
  if (cfg.runtime) out.metrics["runtime_seconds"] = seconds_since(t0);

  if (!cfg.output.empty()) io::write_csv(cfg.output, out.table);
  if (!cfg.metrics.empty()) io::write_json(cfg.metrics, out.metrics);
  if (!cfg.coupling.empty() && r.coupling) io::write_json(cfg.coupling, io::coupling_json(*r.coupling));
  return out;
}

SimulateOutput cmd_simulate(const RunConfig& cfg) {
  if (cfg.scenario.empty()) config_error("simulate needs --scenario");
  const int reps = std::max(cfg.replications, 1);
  std::vector<Method> methods = cfg.methods;
  if (methods.empty()) {
    methods = cfg.scenario == "figure7" ? std::vector<Method>{Method::Bayes, Method::MVCB, Method::CVCB}
                                        : std::vector<Method>{Method::Bayes, Method::VCB, Method::DCB};
  }
  // Reject unknown scenarios before spawning workers.
  if (cfg.scenario != "figure1" && cfg.scenario != "figure7" && cfg.scenario != "conjugate-gaussian" &&
      cfg.scenario != "conjugate-poisson" && cfg.scenario != "custom")
    throw Error(ErrorCode::UnknownScenario, "unknown scenario '" + cfg.scenario + "'");

  std::vector<ReplicationResult> results(static_cast<std::size_t>(reps));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(reps));
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int k = next++; k < reps; k = next++) {
      try {
        results[std::size_t(k)] = run_replication(cfg, k, methods);
      } catch (...) {
        errors[std::size_t(k)] = std::current_exception();
      }
    }
  };
  const int hw = int(std::max(1u, std::thread::hardware_concurrency()));
  const int nthreads = std::min(reps, cfg.threads > 0 ? cfg.threads : hw);
  std::vector<std::thread> pool;
  for (int t = 1; t < nthreads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  SimulateOutput out;
  out.header = {"replication", "method", "n", "risk", "mean_residual", "cov_residual", "w2_to_prior", "kkt_gap"};
  std::size_t groups = 0;
  for (const auto& r : results) groups = std::max(groups, r.groups);
  for (std::size_t g = 0; g < groups; ++g) out.header.push_back("var_group" + std::to_string(g + 1));
  std::vector<std::vector<std::string>> scatter;
  for (auto& r : results) {
    for (auto& row : r.rows) {
      row.resize(out.header.size(), "nan");
      out.rows.push_back(std::move(row));
    }
    for (auto& s : r.scatter) scatter.push_back(std::move(s));
  }

  if (!cfg.output.empty()) write_rows(cfg.output, out.header, out.rows);
  if (!cfg.dataset.empty()) io::write_csv(cfg.dataset, *results.front().dataset);
  if (!cfg.scatter.empty()) {
    const Eigen::Index m = scatter.empty() ? 0 : Eigen::Index((scatter.front().size() - 3) / 3);
    std::vector<std::string> h{"replication", "method", "row"};
    for (const char* p : {"theta", "z", "d"})
      for (Eigen::Index c = 1; c <= m; ++c) h.push_back(p + std::to_string(c));
    write_rows(cfg.scatter, h, scatter);
  }
  return out;
}

json cmd_evaluate(const RunConfig& cfg) {
  if (cfg.input.empty()) config_error("evaluate needs --input with d1..dm columns");
  const io::Table denoised = io::read_csv(cfg.input);
  const auto d = denoised.numbered("d");
  if (d.empty()) throw Error(ErrorCode::ColumnMismatch, "no denoised columns d1..dm");
  const MatrixXd values = denoised.columns(d);

  std::optional<MatrixXd> latents;
  const io::Table lt = cfg.latents.empty() ? denoised : io::read_csv(cfg.latents);
  const auto th = lt.numbered("theta");
  if (!th.empty()) {
    if (th.size() != d.size()) throw Error(ErrorCode::ColumnMismatch, "theta and d columns differ in number");
    if (lt.values.rows() != values.rows())
      throw Error(ErrorCode::RowCountMismatch, "denoised values have " + std::to_string(values.rows()) +
                                                   " rows, latents " + std::to_string(lt.values.rows()));
    latents = lt.columns(th);
  } else if (!cfg.latents.empty()) {
    throw Error(ErrorCode::ColumnMismatch, "no latent columns theta1..thetam");
  }

  std::optional<DiscreteDistribution> prior;
  std::optional<Moments> target;
  if (!cfg.prior_file.empty()) {
    const io::PriorFile pf = io::read_prior(cfg.prior_file);
    if (pf.base.dim() != values.cols()) throw Error(ErrorCode::DimensionError, "prior dimension differs");
    prior = pf.base;
    target = pf.kernel_cov ? prior_moments(SmoothPrior{pf.base, *pf.kernel_cov}) : prior_moments(pf.base);
  } else if (latents) {
    target = Moments{sample_mean(*latents), sample_cov(*latents)};
  }
  const Metrics met = diagnostics(values, target, prior, latents);
  json j = io::metrics_json(met);
  j["n"] = values.rows();
  j["m"] = values.cols();
  j["target"] = target ? json{{"mean", io::vector_json(target->mean)}, {"cov", io::matrix_json(target->cov)}}
                       : json(nullptr);
  if (!cfg.metrics.empty()) io::write_json(cfg.metrics, j);
  if (!cfg.output.empty()) io::write_json(cfg.output, j);
  return j;
}

int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::ConfigError:
    case ErrorCode::UnknownScenario:
      return 2;
    case ErrorCode::ParseError:
    case ErrorCode::ColumnMismatch:
    case ErrorCode::RowCountMismatch:
    case ErrorCode::DomainError:
    case ErrorCode::EmptyDataset:
    case ErrorCode::DimensionError:
      return 3;
    default:
      return 4;
  }
}

int run(int argc, const char* const* argv) {
  CLI::App app{"Constrained empirical Bayes denoising"};
  app.require_subcommand(1);
  std::optional<std::string> config_path;
  std::vector<CLI::App*> subs;
  for (const char* name : {"fit", "denoise", "simulate", "evaluate"}) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("-c,--config", config_path, "JSON config file");
    sub->allow_extras();
    subs.push_back(sub);
  }
  subs[0]->description("fit a prior; writes prior JSON");
  subs[1]->description("denoise observations; writes CSV and metrics JSON");
  subs[2]->description("run a simulation scenario; writes a results table");
  subs[3]->description("score denoised values against latents");

  auto report = [](const std::string& code, const std::string& msg) {
    std::cerr << json{{"error", code}, {"message", msg}}.dump() << '\n';
  };
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    report("cli.ConfigError", e.what());
    return 2;
  }

  try {
    CLI::App* sub = nullptr;
    for (CLI::App* s : subs)
      if (s->parsed()) sub = s;
    std::vector<std::pair<std::string, std::string>> overrides;
    const std::vector<std::string> extra = sub->remaining();
    for (std::size_t k = 0; k < extra.size(); ++k) {
      const std::string& tok = extra[k];
      if (tok.rfind("--", 0) != 0) config_error("unexpected argument '" + tok + "'");
      const std::size_t eq = tok.find('=');
      if (eq != std::string::npos) {
        overrides.emplace_back(tok.substr(2, eq - 2), tok.substr(eq + 1));
      } else {
        if (k + 1 >= extra.size()) config_error("missing value for " + tok);
        overrides.emplace_back(tok.substr(2), extra[++k]);
      }
    }
    const RunConfig cfg = RunConfig::from_json(merge_config(config_path, overrides));
    const std::string name = sub->get_name();
    if (name == "fit") {
      const json j = cmd_fit(cfg);
      if (cfg.output.empty()) std::cout << j.dump(2) << '\n';
    } else if (name == "denoise") {
      const DenoiseOutput o = cmd_denoise(cfg);
      if (cfg.output.empty()) io::write_csv(std::cout, o.table);
      if (cfg.metrics.empty()) std::cerr << o.metrics.dump(2) << '\n';
    } else if (name == "simulate") {
      const SimulateOutput o = cmd_simulate(cfg);
      if (cfg.output.empty()) {
        auto line = [](const std::vector<std::string>& cells) {
          for (std::size_t k = 0; k < cells.size(); ++k) std::cout << (k ? "," : "") << cells[k];
          std::cout << '\n';
        };
        line(o.header);
        for (const auto& r : o.rows) line(r);
      }
    } else {
      const json j = cmd_evaluate(cfg);
      if (cfg.output.empty() && cfg.metrics.empty()) std::cout << j.dump(2) << '\n';
    }
    return 0;
  } catch (const Error& e) {
    report(e.qualified(), e.what());
    return exit_code(e.code());
  } catch (const json::exception& e) {
    report("cli.ConfigError", e.what());
    return 2;
  } catch (const std::exception& e) {
    report("internal", e.what());
    return 4;
  }
}

}  // namespace cebd::cli
