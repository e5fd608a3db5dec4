#pragma once

// CSV tables and JSON serialization of priors, couplings and reports.

#include <Eigen/Dense>

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cebd/constrain.hpp"
#include "cebd/distribution.hpp"
#include "cebd/models.hpp"
#include "cebd/transport.hpp"

namespace cebd::io {

using nlohmann::json;

/// Numeric CSV with a header row.
struct Table {
  std::vector<std::string> header;
  MatrixXd values;  // rows x header.size()

  std::optional<Eigen::Index> column(const std::string& name) const;
  /// Columns prefix1..prefixK present consecutively from 1; K may be 0.
  std::vector<Eigen::Index> numbered(const std::string& prefix) const;
  MatrixXd columns(const std::vector<Eigen::Index>& idx) const;
};

/// Throws ParseError naming the line on malformed input.
Table parse_csv(std::istream& in);
Table read_csv(const std::string& path);

/// Values are written with 17 significant digits.
void write_csv(std::ostream& out, const Table& t);
void write_csv(const std::string& path, const Table& t);
std::string format_double(double x);

/// Observations with the heterogeneity read from sigma / lambda columns.
struct LoadedData {
  Dataset data;
  std::vector<MatrixXd> row_covs;    // sigma11..sigmamm, one per row
  std::optional<MatrixXd> exposure;  // lambda1..lambdam
  std::optional<MatrixXd> latents;   // theta1..thetam
};

/// Requires z1..zm. sigma columns must number m*m and lambda columns m;
/// theta columns, when present, must number m. Otherwise ColumnMismatch.
LoadedData dataset_from_table(const Table& t);

/// Table with z, heterogeneity and latent columns.
Table dataset_table(const Dataset& data, const LikelihoodModel& model,
                    const std::optional<MatrixXd>& latents = {});
void append_columns(Table& t, const std::string& prefix, const MatrixXd& cols);

json matrix_json(const MatrixXd& m);
json vector_json(const VectorXd& v);
MatrixXd matrix_from_json(const json& j);
VectorXd vector_from_json(const json& j);

json prior_json(const DiscreteDistribution& prior);
json prior_json(const SmoothPrior& prior);

struct PriorFile {
  DiscreteDistribution base;
  std::optional<MatrixXd> kernel_cov;
};

/// Reads {atoms, weights, kernel_cov?}. Throws ParseError on bad shape.
PriorFile prior_from_json(const json& j);
PriorFile read_prior(const std::string& path);

json coupling_json(const Coupling& pi);

json metrics_json(const Metrics& m);
json diagnostics_json(const ReportDiagnostics& d);

json read_json(const std::string& path);
/// Pretty-printed with a trailing newline.
void write_json(const std::string& path, const json& j);

}  // namespace cebd::io
