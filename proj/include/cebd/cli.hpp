#pragma once

// Subcommands of the cebd tool. Each takes a resolved RunConfig, writes the
// configured files and returns what it wrote so tests can inspect it.

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cebd/constrain.hpp"
#include "cebd/io.hpp"

namespace cebd::cli {

using io::json;

struct RunConfig {
  // Files.
  std::string input;       // observations (fit, denoise) or denoised values (evaluate)
  std::string prior_file;  // fixed prior for denoise / evaluate
  std::string output;      // prior JSON, denoised CSV or results table
  std::string metrics;     // denoise metrics JSON; evaluate writes here too
  std::string latents;     // evaluate: CSV with theta columns
  std::string scatter;     // simulate: long-format scatter CSV
  std::string coupling;    // denoise: sparse coupling JSON
  std::string dataset;     // simulate: replication 0 in the input CSV schema

  // Likelihood.
  std::string family = "gaussian";  // gaussian | poisson
  std::optional<MatrixXd> noise_cov;

  // Prior.
  std::string prior = "auto";  // auto | npmle | smooth-npmle | fixed | conjugate | oracle
  std::optional<MatrixXd> kernel_cov;
  std::string grid = "auto";   // auto | exemplar | lattice
  int grid_points = 50;
  long max_atoms = 100000;
  bool refine = true;
  double fit_tol = 1e-9;
  double kkt_tol = 1e-4;
  int max_iter = 5000;

  // Denoiser.
  Method method = Method::VCB;
  std::string vcb_moments = "auto";  // auto | data | prior | self
  double pd_ridge = 0.0;
  int mc_samples = 100;
  int gcb_degree = 2;
  bool gcb_nonnegative = false;
  int gcb_points = 0;
  double gcb_expand = 0.1;
  long max_entries = 2000000;
  bool bayes_from_input = false;  // use the d1..dm columns of the input as Bayes values

  // Simulation.
  std::string scenario;
  long n = 0;  // 0: scenario default
  int replications = 1;
  std::vector<Method> methods;  // empty: scenario default
  int threads = 0;              // 0: hardware concurrency
  int scatter_replications = 1;
  double prior_mean = 0.0;
  double prior_var = 1.0;
  double noise_var = 1.0;
  double shape = 2.0;
  double scale = 1.0;
  json custom;

  std::uint64_t seed = 0;
  long subsample = 0;  // keep this many rows, chosen from the seed
  bool runtime = true; // report wall time in metrics

  /// Throws ConfigError on unknown keys or ill-typed values.
  static RunConfig from_json(const json& j);
};

/// Reads the config file (if any) and applies `--key value` overrides; keys
/// may use dashes or underscores and values are read as JSON when they parse.
json merge_config(const std::optional<std::string>& path,
                  const std::vector<std::pair<std::string, std::string>>& overrides);

json cmd_fit(const RunConfig& cfg);

struct DenoiseOutput {
  io::Table table;
  json metrics;
};
DenoiseOutput cmd_denoise(const RunConfig& cfg);

struct SimulateOutput {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};
SimulateOutput cmd_simulate(const RunConfig& cfg);

json cmd_evaluate(const RunConfig& cfg);

/// 0 success, 2 config error, 3 data error, 4 numerical failure.
int exit_code(ErrorCode code);

/// Entry point of the executable.
int run(int argc, const char* const* argv);

}  // namespace cebd::cli
