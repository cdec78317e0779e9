#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "pdmp/calcium.hpp"
#include "pdmp/io.hpp"
#include "pdmp/ldp.hpp"
#include "pdmp/simulate.hpp"

using namespace pdmp;
namespace fs = std::filesystem;

namespace {

const char* cli = PDMP_CLI_PATH;

int run_cli(const std::string& args) {
  std::string cmd = std::string(cli) + " " + args + " > /dev/null 2>&1";
  int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("pdmp_cli_" + name);
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("simulate: rerun is byte-identical") {
  auto d1 = fresh_dir("sim1"), d2 = fresh_dir("sim2");
  std::string common =
      "--set experiment.T=10 --set experiment.seed=42 --set model.params.N=1000 simulate";
  REQUIRE(run_cli("--out " + d1.string() + " " + common) == 0);
  REQUIRE(run_cli("--out " + d2.string() + " " + common) == 0);
  CHECK(slurp(d1 / "trajectory.csv") == slurp(d2 / "trajectory.csv"));
  CHECK(slurp(d1 / "trajectory.json") == slurp(d2 / "trajectory.json"));
  CHECK(slurp(d1 / "manifest.json") == slurp(d2 / "manifest.json"));

  // manifest lists both outputs with hashes
  auto manifest = nlohmann::json::parse(slurp(d1 / "manifest.json"));
  REQUIRE(manifest["outputs"].size() == 2);
  for (const auto& e : manifest["outputs"]) {
    CHECK(e.contains("fnv1a64"));
    CHECK(e["bytes"].get<long>() > 0);
  }
}

TEST_CASE("simulate: different seed changes the trajectory") {
  auto d1 = fresh_dir("seed1"), d2 = fresh_dir("seed2");
  REQUIRE(run_cli("--out " + d1.string() + " --seed 1 --set experiment.T=3 simulate") == 0);
  REQUIRE(run_cli("--out " + d2.string() + " --seed 2 --set experiment.T=3 simulate") == 0);
  CHECK(slurp(d1 / "trajectory.csv") != slurp(d2 / "trajectory.csv"));
}

TEST_CASE("validate: calcium passes on the default box") {
  auto d = fresh_dir("val");
  REQUIRE(run_cli("--out " + d.string() + " validate") == 0);
  auto j = nlohmann::json::parse(slurp(d / "validation.json"));
  CHECK(j["passed"].get<bool>());
  CHECK(j["max_rate"].get<double>() > 0.0);
}

TEST_CASE("action: CLI evaluation matches the library") {
  CalciumParams p;
  auto model = calcium_model(p);
  auto det = deterministic_limit(model, 5.0, 513);
  auto d = fresh_dir("act");
  fs::create_directories(d);
  {
    std::ofstream os(d / "path.csv");
    write_path_csv(os, det);
  }
  REQUIRE(run_cli("--out " + d.string() + " --set experiment.T=5 action --path " +
                  (d / "path.csv").string()) == 0);
  auto j = nlohmann::json::parse(slurp(d / "action.json"));
  auto expect = action(det, model.network);
  REQUIRE_FALSE(expect.total.is_inf);
  CHECK(j["total"].get<double>() == Catch::Approx(expect.total.value).margin(1e-12));
}

TEST_CASE("optimal-path: solves a contracted target") {
  auto d = fresh_dir("opt");
  REQUIRE(run_cli("--out " + d.string() +
                  " --set experiment.T=2 --set \"target.x=[0.85]\" optimal-path") == 0);
  auto j = nlohmann::json::parse(slurp(d / "optimal_path.json"));
  CHECK(j["action"].get<double>() > 0.0);
  CHECK(j["residual_norm"].get<double>() <= 1e-8);
  auto csv = slurp(d / "optimal_trajectory.csv");
  CHECK(csv.find("t,x1,u1,u2,eta1,eta2,zdot1,zdot2") == 0);
  CHECK(fs::exists(d / "plot_series.csv"));
}

TEST_CASE("calcium-wave: target at the fixed point reports J* ~ 0") {
  CalciumParams p;
  auto model = calcium_model(p);
  auto fp = fixed_point(model, Vec::Constant(1, 0.7), model.u0);
  auto d = fresh_dir("wave0");
  std::ostringstream cmd;
  cmd << "--out " << d.string() << " --set experiment.T=2 --set model.params.x_target="
      << fmt17(fp.x[0]) << " calcium-wave";
  REQUIRE(run_cli(cmd.str()) == 0);
  auto j = nlohmann::json::parse(slurp(d / "wave_report.json"));
  CHECK(j["J_star"].get<double>() <= 1e-8);
  CHECK(j["fixed_point"]["x_star"].get<double>() == Catch::Approx(fp.x[0]).margin(1e-9));
}

TEST_CASE("sweep: hits are nonincreasing in N for a rare target") {
  auto d = fresh_dir("sweep");
  REQUIRE(run_cli("--out " + d.string() +
                  " --set experiment.T=2 --set \"target.x=[0.85]\""
                  " --set \"sweep.N_list=[20,40,80]\" --set sweep.trials=20000 sweep") == 0);
  auto j = nlohmann::json::parse(slurp(d / "sweep.json"));
  auto rows = j["monte_carlo"];
  REQUIRE(rows.size() == 3);
  long prev = -1;
  for (const auto& row : rows) {
    long hits = row["hits"].get<long>();
    if (prev >= 0) CHECK(hits <= prev);
    prev = hits;
  }
  CHECK(rows[0]["hits"].get<long>() > 0);
  CHECK(j["J_star"].get<double>() > 0.0);
  CHECK(fs::exists(d / "sweep_series.csv"));
}

TEST_CASE("simulate ensemble mode: worker count does not change the bytes") {
  auto d1 = fresh_dir("ens1"), d2 = fresh_dir("ens2");
  std::string common =
      "--set experiment.T=1.5 --set ensemble.count=64 --set model.params.N=100 simulate";
  REQUIRE(run_cli("--out " + d1.string() + " --threads 1 " + common) == 0);
  REQUIRE(run_cli("--out " + d2.string() + " --threads 3 " + common) == 0);
  CHECK(slurp(d1 / "ensemble_report.json") == slurp(d2 / "ensemble_report.json"));
  CHECK(slurp(d1 / "ensemble_series.csv") == slurp(d2 / "ensemble_series.csv"));
  auto j = nlohmann::json::parse(slurp(d1 / "ensemble_report.json"));
  CHECK(j["count"].get<long>() == 64);
  CHECK_FALSE(j.contains("p_hat"));  // no predicate configured
}

TEST_CASE("config validation failures exit with code 2") {
  auto d = fresh_dir("bad");
  CHECK(run_cli("--out " + d.string() + " --set nonsense.key=1 simulate") == 2);
  CHECK(run_cli("--out " + d.string() + " --set model.params.bogus=1 simulate") == 2);
  CHECK(run_cli("--out " + d.string() + " --set model.name=unknown simulate") == 2);
  // optimal-path without a target
  CHECK(run_cli("--out " + d.string() + " optimal-path") == 2);
  // malformed config file
  fs::create_directories(d);
  { std::ofstream os(d / "broken.json"); os << "{ not json"; }
  CHECK(run_cli("--out " + d.string() + " --config " + (d / "broken.json").string() +
                " simulate") == 2);
  // missing config file counts as an I/O failure
  CHECK(run_cli("--out " + d.string() + " --config /nonexistent/cfg.json simulate") == 4);
}

TEST_CASE("config file plus dotted overrides reach the model") {
  auto d = fresh_dir("cfg");
  fs::create_directories(d);
  {
    std::ofstream os(d / "cfg.json");
    os << R"({"model":{"params":{"N":50}},"experiment":{"T":1.5,"seed":7}})";
  }
  REQUIRE(run_cli("--out " + d.string() + " --config " + (d / "cfg.json").string() +
                  " --set model.params.N=60 simulate") == 0);
  auto manifest = nlohmann::json::parse(slurp(d / "manifest.json"));
  CHECK(manifest["run"]["config"]["model"]["params"]["N"].get<long>() == 60);
  CHECK(manifest["run"]["config"]["experiment"]["T"].get<double>() == 1.5);
  auto traj = nlohmann::json::parse(slurp(d / "trajectory.json"));
  CHECK(traj["N"].get<long>() == 60);
  CHECK(traj["T"].get<double>() == 1.5);
}
