#include "cebd/io.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "cebd/error.hpp"

namespace cebd::io {

namespace {

[[noreturn]] void parse_error(const std::string& msg) { throw Error(ErrorCode::ParseError, msg); }
[[noreturn]] void column_error(const std::string& msg) { throw Error(ErrorCode::ColumnMismatch, msg); }

std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && (s[a] == ' ' || s[a] == '\t' || s[a] == '\r')) ++a;
  while (b > a && (s[b - 1] == ' ' || s[b - 1] == '\t' || s[b - 1] == '\r')) --b;
  return std::string(s.substr(a, b - a));
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.push_back(trim(std::string_view(line).substr(start, comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

double parse_number(const std::string& field, long line) {
  double x = 0.0;
  const char* first = field.data();
  const char* last = first + field.size();
  if (!field.empty() && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, x);
  if (field.empty() || ec != std::errc() || ptr != last)
    parse_error("line " + std::to_string(line) + ": not a number: '" + field + "'");
  return x;
}

}  // namespace

std::optional<Eigen::Index> Table::column(const std::string& name) const {
  for (std::size_t k = 0; k < header.size(); ++k)
    if (header[k] == name) return Eigen::Index(k);
  return std::nullopt;
}

std::vector<Eigen::Index> Table::numbered(const std::string& prefix) const {
  std::vector<Eigen::Index> idx;
  while (auto c = column(prefix + std::to_string(idx.size() + 1))) idx.push_back(*c);
  return idx;
}

MatrixXd Table::columns(const std::vector<Eigen::Index>& idx) const {
  MatrixXd out(values.rows(), Eigen::Index(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) out.col(Eigen::Index(k)) = values.col(idx[k]);
  return out;
}

Table parse_csv(std::istream& in) {
  Table t;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!trim(line).empty()) break;
  }
  if (trim(line).empty()) parse_error("line " + std::to_string(lineno) + ": missing header");
  t.header = split(line);
  for (const auto& h : t.header)
    if (h.empty()) parse_error("line " + std::to_string(lineno) + ": empty column name");

  std::vector<double> cells;
  Eigen::Index rows = 0;
  const std::size_t width = t.header.size();
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto fields = split(line);
    if (fields.size() != width)
      parse_error("line " + std::to_string(lineno) + ": expected " + std::to_string(width) +
                  " fields, found " + std::to_string(fields.size()));
    for (const auto& f : fields) cells.push_back(parse_number(f, lineno));
    ++rows;
  }
  t.values = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      cells.data(), rows, Eigen::Index(width));
  return t;
}

Table read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) parse_error("cannot open " + path);
  return parse_csv(in);
}

std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

void write_csv(std::ostream& out, const Table& t) {
  for (std::size_t k = 0; k < t.header.size(); ++k) out << (k ? "," : "") << t.header[k];
  out << '\n';
  for (Eigen::Index i = 0; i < t.values.rows(); ++i) {
    for (Eigen::Index k = 0; k < t.values.cols(); ++k) out << (k ? "," : "") << format_double(t.values(i, k));
    out << '\n';
  }
}

void write_csv(const std::string& path, const Table& t) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::ConfigError, "cannot write " + path);
  write_csv(out, t);
}

LoadedData dataset_from_table(const Table& t) {
  const auto z = t.numbered("z");
  if (z.empty()) column_error("no observation columns z1..zm");
  const Eigen::Index m = Eigen::Index(z.size());
  LoadedData out{Dataset{t.columns(z)}, {}, {}, {}};

  std::vector<Eigen::Index> sigma;
  for (Eigen::Index a = 1; a <= m; ++a)
    for (Eigen::Index b = 1; b <= m; ++b)
      if (auto c = t.column("sigma" + std::to_string(a) + std::to_string(b))) sigma.push_back(*c);
  const auto lambda = t.numbered("lambda");
  const auto theta = t.numbered("theta");

  if (!sigma.empty()) {
    if (Eigen::Index(sigma.size()) != m * m)
      column_error("expected " + std::to_string(m * m) + " sigma columns, found " + std::to_string(sigma.size()));
    const MatrixXd s = t.columns(sigma);
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
      MatrixXd c(m, m);
      for (Eigen::Index a = 0; a < m; ++a) c.row(a) = s.row(i).segment(a * m, m);
      out.row_covs.push_back(std::move(c));
    }
  }
  if (!lambda.empty()) {
    if (Eigen::Index(lambda.size()) != m)
      column_error("expected " + std::to_string(m) + " lambda columns, found " + std::to_string(lambda.size()));
    if (!sigma.empty()) column_error("both sigma and lambda columns present");
    out.exposure = t.columns(lambda);
  }
  if (!theta.empty()) {
    if (Eigen::Index(theta.size()) != m)
      column_error("expected " + std::to_string(m) + " theta columns, found " + std::to_string(theta.size()));
    out.latents = t.columns(theta);
  }
  return out;
}

void append_columns(Table& t, const std::string& prefix, const MatrixXd& cols) {
  const Eigen::Index old = t.values.cols();
  if (old == 0) t.values.resize(cols.rows(), 0);
  t.values.conservativeResize(cols.rows(), old + cols.cols());
  t.values.rightCols(cols.cols()) = cols;
  for (Eigen::Index k = 0; k < cols.cols(); ++k) t.header.push_back(prefix + std::to_string(k + 1));
}

Table dataset_table(const Dataset& data, const LikelihoodModel& model,
                    const std::optional<MatrixXd>& latents) {
  Table t;
  append_columns(t, "z", data.observations);
  const Eigen::Index n = data.n(), m = data.m();
  if (const auto* het = std::get_if<GaussianHeteroscedastic>(&model.kind())) {
    MatrixXd s(n, m * m);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index a = 0; a < m; ++a)
        for (Eigen::Index b = 0; b < m; ++b) s(i, a * m + b) = het->row_covs[std::size_t(i)](a, b);
    const Eigen::Index old = t.values.cols();
    t.values.conservativeResize(n, old + m * m);
    t.values.rightCols(m * m) = s;
    for (Eigen::Index a = 1; a <= m; ++a)
      for (Eigen::Index b = 1; b <= m; ++b) t.header.push_back("sigma" + std::to_string(a) + std::to_string(b));
  } else if (const auto* p = std::get_if<PoissonExposure>(&model.kind())) {
    append_columns(t, "lambda", p->exposure);
  }
  if (latents) append_columns(t, "theta", *latents);
  return t;
}

json matrix_json(const MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index k = 0; k < m.cols(); ++k) row.push_back(m(i, k));
    rows.push_back(std::move(row));
  }
  return rows;
}

json vector_json(const VectorXd& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

MatrixXd matrix_from_json(const json& j) {
  if (j.is_number()) return MatrixXd::Constant(1, 1, j.get<double>());
  if (!j.is_array() || j.empty()) parse_error("expected a non-empty array of rows");
  if (j[0].is_number()) {
    MatrixXd out(Eigen::Index(j.size()), 1);
    for (std::size_t i = 0; i < j.size(); ++i) {
      if (!j[i].is_number()) parse_error("mixed scalars and rows in matrix");
      out(Eigen::Index(i), 0) = j[i].get<double>();
    }
    return out;
  }
  const std::size_t cols = j[0].size();
  MatrixXd out(Eigen::Index(j.size()), Eigen::Index(cols));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_array() || j[i].size() != cols) parse_error("ragged matrix rows");
    for (std::size_t k = 0; k < cols; ++k) {
      if (!j[i][k].is_number()) parse_error("matrix entries must be numbers");
      out(Eigen::Index(i), Eigen::Index(k)) = j[i][k].get<double>();
    }
  }
  return out;
}

VectorXd vector_from_json(const json& j) {
  if (!j.is_array()) parse_error("expected an array");
  VectorXd out(Eigen::Index(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) parse_error("vector entries must be numbers");
    out[Eigen::Index(i)] = j[i].get<double>();
  }
  return out;
}

json prior_json(const DiscreteDistribution& prior) {
  return json{{"atoms", matrix_json(prior.atoms)}, {"weights", vector_json(prior.weights)}};
}

json prior_json(const SmoothPrior& prior) {
  json j = prior_json(prior.base);
  j["kernel_cov"] = matrix_json(prior.kernel_cov);
  return j;
}

PriorFile prior_from_json(const json& j) {
  if (!j.is_object() || !j.contains("atoms") || !j.contains("weights"))
    parse_error("prior JSON needs atoms and weights");
  PriorFile p;
  p.base.atoms = matrix_from_json(j.at("atoms"));
  p.base.weights = vector_from_json(j.at("weights"));
  if (p.base.weights.size() != p.base.atoms.rows()) parse_error("prior atoms and weights differ in length");
  p.base.validate();
  if (j.contains("kernel_cov") && !j.at("kernel_cov").is_null()) {
    p.kernel_cov = matrix_from_json(j.at("kernel_cov"));
    if (p.kernel_cov->rows() != p.base.dim() || p.kernel_cov->cols() != p.base.dim())
      parse_error("kernel_cov shape does not match the atoms");
  }
  return p;
}

PriorFile read_prior(const std::string& path) { return prior_from_json(read_json(path)); }

json coupling_json(const Coupling& pi) {
  json entries = json::array();
  for (const auto& e : pi.entries) entries.push_back(json::array({e.row, e.col, e.mass}));
  return json{{"rows", pi.rows}, {"cols", pi.cols}, {"entries", std::move(entries)}};
}

json metrics_json(const Metrics& m) {
  json j;
  j["empirical_risk"] = m.empirical_risk ? json(*m.empirical_risk) : json(nullptr);
  j["mean_residual"] = m.mean_residual;
  j["cov_residual"] = m.cov_residual;
  j["w2_to_prior"] = m.w2_to_prior ? json(*m.w2_to_prior) : json(nullptr);
  j["constraint_residuals"] = vector_json(m.constraint_residuals);
  return j;
}

json diagnostics_json(const ReportDiagnostics& d) {
  return json{{"iterations", d.iterations},
              {"bland_pivots", d.bland_pivots},
              {"kkt_gap", d.kkt_gap},
              {"col_marginal_residual", d.col_marginal_residual},
              {"min_reduced_cost", d.min_reduced_cost},
              {"max_slackness_violation", d.max_slackness_violation},
              {"truncated", d.truncated},
              {"seeds", d.seeds},
              {"warnings", d.warnings}};
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) parse_error("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    parse_error(path + ": " + e.what());
  }
}

void write_json(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::ConfigError, "cannot write " + path);
  out << j.dump(2) << '\n';
}

}  // namespace cebd::io
