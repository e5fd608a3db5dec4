#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "cebd/cli.hpp"
#include "cebd/error.hpp"
#include "cebd/io.hpp"
#include "cebd/stats.hpp"

using namespace cebd;
using cli::json;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / ("cebd_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

cli::RunConfig config(const json& j) { return cli::RunConfig::from_json(j); }

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::ConfigError;
}

int run_args(std::vector<std::string> args) {
  args.insert(args.begin(), "cebd");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli::run(int(argv.size()), argv.data());
}

MatrixXd column(const io::Table& t, const std::string& prefix) { return t.columns(t.numbered(prefix)); }

}  // namespace

TEST_CASE("csv round trip keeps every bit") {
  io::Table t;
  t.header = {"z1", "z2"};
  t.values.resize(3, 2);
  t.values << 0.1, -1.0 / 3.0, 1e-300, 123456789.123456789, -0.0, 2.0 / 7.0;
  std::stringstream ss;
  io::write_csv(ss, t);
  const io::Table back = io::parse_csv(ss);
  CHECK(back.header == t.header);
  CHECK((back.values.array() == t.values.array()).all());
}

TEST_CASE("csv errors") {
  std::stringstream bad("z1,z2\n1,2\n3\n");
  try {
    io::parse_csv(bad);
    FAIL("expected ParseError");
  } catch (const Error& e) {
    CHECK(e.qualified() == "cli.ParseError");
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
  std::stringstream nan_cell("z1\nabc\n");
  CHECK_THROWS_AS(io::parse_csv(nan_cell), Error);

  std::stringstream no_z("x1\n1\n");
  CHECK(code_of([&] { io::dataset_from_table(io::parse_csv(no_z)); }) == ErrorCode::ColumnMismatch);
  std::stringstream sigma("z1,z2,sigma11,sigma22\n1,2,1,1\n");
  CHECK(code_of([&] { io::dataset_from_table(io::parse_csv(sigma)); }) == ErrorCode::ColumnMismatch);
}

TEST_CASE("heterogeneity columns are read row-major") {
  std::stringstream in("z1,z2,sigma11,sigma12,sigma21,sigma22,theta1,theta2\n0,0,2,0.5,0.5,3,1,-1\n");
  const io::LoadedData d = io::dataset_from_table(io::parse_csv(in));
  REQUIRE(d.row_covs.size() == 1);
  CHECK(d.row_covs[0](0, 0) == 2.0);
  CHECK(d.row_covs[0](0, 1) == 0.5);
  CHECK(d.row_covs[0](1, 1) == 3.0);
  REQUIRE(d.latents.has_value());
  CHECK((*d.latents)(0, 1) == -1.0);
}

TEST_CASE("config merging and validation") {
  TempDir dir;
  spit(dir / "c.json", R"({"method": "dcb", "seed": 5, "pd-ridge": 0.5})");
  const json j = cli::merge_config(dir / "c.json", {{"seed", "9"}, {"grid-points", "12"}, {"input", "123"}});
  const cli::RunConfig c = config(j);
  CHECK(c.method == Method::DCB);
  CHECK(c.seed == 9);
  CHECK(c.grid_points == 12);
  CHECK(c.pd_ridge == 0.5);
  CHECK(c.input == "123");

  CHECK(code_of([] { config({{"nonsense", 1}}); }) == ErrorCode::ConfigError);
  CHECK(code_of([] { config({{"method", "xyz"}}); }) == ErrorCode::ConfigError);
  CHECK(code_of([] { config({{"grid_points", "many"}}); }) == ErrorCode::ConfigError);
  CHECK(code_of([] { config({{"family", "binomial"}}); }) == ErrorCode::ConfigError);
  CHECK(config({{"methods", "bayes,vcb"}}).methods == std::vector<Method>{Method::Bayes, Method::VCB});
}

TEST_CASE("fit on a three-row toy input") {
  TempDir dir;
  spit(dir / "toy.csv", "z1\n-1.5\n0.2\n2.5\n");
  const json cfg{{"input", dir / "toy.csv"}, {"output", dir / "p.json"}, {"grid", "exemplar"}};
  const json j = cli::cmd_fit(config(cfg));
  const io::PriorFile p = io::prior_from_json(j);
  CHECK(p.base.size() <= 3);
  CHECK(p.base.weights.sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(j["fit"]["kkt_gap"].get<double>() <= 1e-4);

  const std::string first = slurp(dir / "p.json");
  json again = cfg;
  again["output"] = dir / "q.json";
  cli::cmd_fit(config(again));
  CHECK(first == slurp(dir / "q.json"));
}

TEST_CASE("shipped figure-1 config fits a prior with the right moments") {
  TempDir dir;
  const std::string cfg_path = std::string(CEBD_SOURCE_DIR) + "/configs/figure1.json";
  REQUIRE(run_args({"simulate", "--config", cfg_path, "--dataset", dir / "f1.csv", "--output",
                    dir / "res.csv"}) == 0);
  REQUIRE(run_args({"fit", "--config", cfg_path, "--input", dir / "f1.csv", "--output", dir / "p.json"}) == 0);
  const io::PriorFile p = io::read_prior(dir / "p.json");
  REQUIRE(p.kernel_cov.has_value());
  const Moments mo = prior_moments(SmoothPrior{p.base, *p.kernel_cov});
  MatrixXd truth(2, 2);
  truth << 1.1, 1.0, 1.0, 1.1;
  CHECK(rel_frobenius(mo.cov, truth) <= 0.15);
  CHECK(mo.mean.norm() <= 0.15);
}

TEST_CASE("denoise") {
  TempDir dir;
  REQUIRE(run_args({"simulate", "--scenario", "figure1", "--n", "300", "--seed", "11", "--dataset",
                    dir / "d.csv", "--output", dir / "r.csv"}) == 0);

  SUBCASE("bayes with a point-mass prior is constant") {
    spit(dir / "pm.json", R"({"atoms": [[0.25, -0.5]], "weights": [1]})");
    const auto out = cli::cmd_denoise(
        config({{"input", dir / "d.csv"}, {"prior_file", dir / "pm.json"}, {"method", "bayes"}}));
    const MatrixXd d = column(out.table, "d");
    CHECK((d.col(0).array() == 0.25).all());
    CHECK((d.col(1).array() == -0.5).all());
  }

  SUBCASE("vcb is a fixed point when re-run on its own output") {
    const auto first = cli::cmd_denoise(
        config({{"input", dir / "d.csv"}, {"method", "vcb"}, {"output", dir / "v.csv"}}));
    const auto second = cli::cmd_denoise(config(
        {{"input", dir / "v.csv"}, {"method", "vcb"}, {"bayes_from_input", true}, {"vcb_moments", "self"}}));
    const MatrixXd a = column(first.table, "d"), b = column(second.table, "d");
    CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK(first.metrics["cov_residual"].get<double>() <= 1e-6);
  }

  SUBCASE("dcb surfaces the column-marginal residual") {
    const auto out = cli::cmd_denoise(config({{"input", dir / "d.csv"},
                                              {"method", "dcb"},
                                              {"metrics", dir / "m.json"},
                                              {"coupling", dir / "pi.json"}}));
    const json m = io::read_json(dir / "m.json");
    CHECK(m["col_marginal_residual"].get<double>() <= 1e-9);
    CHECK(m["method"] == "dcb");
    const json pi = io::read_json(dir / "pi.json");
    CHECK(pi["rows"] == 300);
    double mass = 0.0;
    for (const auto& e : pi["entries"]) mass += e[2].get<double>();
    CHECK(mass == doctest::Approx(1.0).epsilon(1e-12));
  }

  SUBCASE("output re-ingests without loss and is deterministic") {
    const json cfg{{"input", dir / "d.csv"}, {"method", "vcb"}, {"output", dir / "a.csv"},
                   {"metrics", dir / "a.json"}, {"runtime", false}};
    const auto out = cli::cmd_denoise(config(cfg));
    const io::Table back = io::read_csv(dir / "a.csv");
    CHECK((back.values.array() == out.table.values.array()).all());
    json again = cfg;
    again["output"] = dir / "b.csv";
    again["metrics"] = dir / "b.json";
    cli::cmd_denoise(config(again));
    CHECK(slurp(dir / "a.csv") == slurp(dir / "b.csv"));
    CHECK(slurp(dir / "a.json") == slurp(dir / "b.json"));
  }

  SUBCASE("cvcb without heterogeneity columns is a config error") {
    CHECK(run_args({"denoise", "--input", dir / "d.csv", "--method", "cvcb"}) == 2);
  }
}

TEST_CASE("poisson gcb keeps values nonnegative") {
  TempDir dir;
  spit(dir / "g.json", R"({"atoms": [[0.2], [1.0], [6.0]], "weights": [0.5, 0.3, 0.2]})");
  const json custom{{"family", "poisson"}, {"prior", io::read_json(dir / "g.json")}};
  REQUIRE(run_args({"simulate", "--scenario", "custom", "--custom", custom.dump(), "--n", "300", "--dataset",
                    dir / "p.csv", "--output", dir / "r.csv"}) == 0);
  const auto out = cli::cmd_denoise(config({{"input", dir / "p.csv"},
                                            {"family", "poisson"},
                                            {"method", "gcb"},
                                            {"gcb_nonnegative", true},
                                            {"gcb_points", 100}}));
  CHECK(column(out.table, "d").minCoeff() >= -1e-8);
  for (const auto& r : out.metrics["constraint_residuals"]) CHECK(std::abs(r.get<double>()) <= 1e-8);
}

TEST_CASE("simulate") {
  TempDir dir;
  SUBCASE("deterministic across thread counts") {
    const json base{{"scenario", "figure1"}, {"n", 400}, {"replications", 3}, {"seed", 4}};
    json a = base, b = base;
    a["threads"] = 1;
    a["output"] = dir / "a.csv";
    a["scatter"] = dir / "sa.csv";
    b["threads"] = 3;
    b["output"] = dir / "b.csv";
    b["scatter"] = dir / "sb.csv";
    const auto ra = cli::cmd_simulate(config(a));
    cli::cmd_simulate(config(b));
    CHECK(slurp(dir / "a.csv") == slurp(dir / "b.csv"));
    CHECK(slurp(dir / "sa.csv") == slurp(dir / "sb.csv"));
    CHECK(ra.rows.size() == 9);
    CHECK(slurp(dir / "sa.csv").rfind("replication,method,row,theta1,theta2,z1,z2,d1,d2\n", 0) == 0);
  }

  SUBCASE("figure7 reports per-group variances") {
    const auto out = cli::cmd_simulate(config({{"scenario", "figure7"}, {"n", 1500}}));
    CHECK(std::find(out.header.begin(), out.header.end(), "var_group2") != out.header.end());
    CHECK(out.rows.size() == 3);
  }

  SUBCASE("conjugate gaussian bayes risk is the posterior variance") {
    const auto out = cli::cmd_simulate(
        config({{"scenario", "conjugate-gaussian"}, {"n", 100000}, {"methods", "bayes"}, {"seed", 1}}));
    REQUIRE(out.rows.size() == 1);
    CHECK(std::stod(out.rows[0][3]) == doctest::Approx(0.5).epsilon(0.02));
  }

  SUBCASE("unknown scenario") {
    CHECK(code_of([] { cli::cmd_simulate(config({{"scenario", "figure9"}})); }) == ErrorCode::UnknownScenario);
    CHECK(run_args({"simulate", "--scenario", "figure9"}) == 2);
  }
}

TEST_CASE("evaluate") {
  TempDir dir;
  spit(dir / "lat.csv", "theta1\n1.5\n-0.5\n2\n-1\n");
  spit(dir / "same.csv", "d1\n1.5\n-0.5\n2\n-1\n");
  spit(dir / "zero.csv", "d1\n0\n0\n0\n0\n");
  spit(dir / "short.csv", "d1\n0\n0\n");

  const json same = cli::cmd_evaluate(config({{"input", dir / "same.csv"}, {"latents", dir / "lat.csv"}}));
  CHECK(same["empirical_risk"].get<double>() == 0.0);
  const json zero = cli::cmd_evaluate(config({{"input", dir / "zero.csv"}, {"latents", dir / "lat.csv"}}));
  CHECK(zero["empirical_risk"].get<double>() == (1.5 * 1.5 + 0.25 + 4.0 + 1.0) / 4.0);
  CHECK(code_of([&] { cli::cmd_evaluate(config({{"input", dir / "short.csv"}, {"latents", dir / "lat.csv"}})); }) ==
        ErrorCode::RowCountMismatch);
  CHECK(run_args({"evaluate", "--input", dir / "short.csv", "--latents", dir / "lat.csv"}) == 3);

  SUBCASE("vcb output against the prior it was constrained to") {
    REQUIRE(run_args({"simulate", "--scenario", "conjugate-gaussian", "--n", "400", "--dataset", dir / "g.csv",
                      "--output", dir / "r.csv"}) == 0);
    REQUIRE(run_args({"fit", "--input", dir / "g.csv", "--output", dir / "p.json"}) == 0);
    REQUIRE(run_args({"denoise", "--input", dir / "g.csv", "--prior-file", dir / "p.json", "--vcb-moments", "prior",
                      "--output", dir / "v.csv", "--metrics", dir / "m.json"}) == 0);
    const json m = cli::cmd_evaluate(config({{"input", dir / "v.csv"}, {"prior_file", dir / "p.json"}}));
    CHECK(m["cov_residual"].get<double>() <= 1e-6);
    CHECK(m["empirical_risk"].is_number());
  }
}

TEST_CASE("exit codes") {
  TempDir dir;
  spit(dir / "bad.csv", "z1\n1\nx\n");
  CHECK(run_args({"denoise", "--input", dir / "bad.csv"}) == 3);
  CHECK(run_args({"denoise", "--input", dir / "missing.csv"}) == 3);
  CHECK(run_args({"denoise", "--config", dir / "missing.json"}) == 2);
  CHECK(run_args({"frobnicate"}) == 2);
  spit(dir / "one.csv", "z1\n1\n2\n3\n");
  spit(dir / "pm.json", R"({"atoms": [[0.5]], "weights": [1]})");
  // Constant Bayes values have a singular covariance.
  CHECK(run_args({"denoise", "--input", dir / "one.csv", "--prior-file", dir / "pm.json", "--method", "vcb"}) == 4);
  CHECK(cli::exit_code(ErrorCode::GridInfeasible) == 4);
  CHECK(cli::exit_code(ErrorCode::ColumnMismatch) == 3);
  CHECK(cli::exit_code(ErrorCode::UnknownScenario) == 2);
}
