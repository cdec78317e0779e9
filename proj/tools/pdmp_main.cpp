// Batch front-end: config-driven experiments over the PDMP library.
// Subcommands: simulate, action, optimal-path, calcium-wave, sweep, validate.
// Exit codes: 0 success, 2 config error, 3 solver failure, 4 I/O error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "pdmp/calcium.hpp"
#include "pdmp/io.hpp"
#include "pdmp/ldp.hpp"
#include "pdmp/models.hpp"
#include "pdmp/optimal_path.hpp"
#include "pdmp/simulate.hpp"

using namespace pdmp;

namespace {

Json default_config() {
  return Json{
      {"model", {{"name", "calcium"}, {"params", Json::object()}}},
      {"experiment", {{"T", 10.0}, {"seed", 42}, {"dense_step", -1.0}}},
      {"ensemble",
       {{"count", 1},
        {"predicate",
         {{"type", "x-threshold"}, {"component", 0}, {"threshold", -1.0}}}}},
      {"target", Json::object()},
      {"solver",
       {{"rtol", 1e-10},
        {"atol", 1e-12},
        {"newton_tol", 1e-9},
        {"max_newton", 60},
        {"nodes", 1025},
        {"segments", 0}}},
      {"sweep", {{"N_list", Json::array({20, 40, 80})}, {"trials", 100000}}},
      {"wave", {{"monte_carlo", false}, {"x0_snap", 0.0}}},
      {"validate", {{"samples", 5000}}},
      {"output", {{"plot_data", true}}},
  };
}

const std::map<std::string, std::set<std::string>>& schema() {
  static const std::map<std::string, std::set<std::string>> s = {
      {"", {"model", "experiment", "ensemble", "target", "solver", "sweep",
            "wave", "validate", "output"}},
      {"model", {"name", "params"}},
      {"model.params:calcium",
       {"k_f", "V_s", "K_s", "k_leak", "gamma", "alpha_open", "alpha_close",
        "c_total", "N", "x_target", "x0", "u1_0"}},
      {"model.params:poisson", {"rate", "N", "x0"}},
      {"model.params:birth-death", {"birth", "death", "N", "x0"}},
      {"experiment", {"T", "seed", "dense_step"}},
      {"ensemble", {"count", "predicate"}},
      {"ensemble.predicate", {"type", "component", "threshold"}},
      {"target", {"x", "z"}},
      {"solver", {"rtol", "atol", "newton_tol", "max_newton", "nodes", "segments"}},
      {"sweep", {"N_list", "trials"}},
      {"wave", {"monte_carlo", "x0_snap"}},
      {"validate", {"samples"}},
      {"output", {"plot_data"}},
  };
  return s;
}

void collect_unknown_keys(const Json& j, const std::string& path,
                          const std::string& model_name,
                          std::vector<std::string>* bad) {
  if (!j.is_object()) return;
  std::string key = path;
  if (path == "model.params") key = "model.params:" + model_name;
  auto it = schema().find(key);
  if (it == schema().end()) return;  // leaf objects validated by their parent
  for (const auto& [k, v] : j.items()) {
    if (!it->second.count(k)) {
      bad->push_back(path.empty() ? k : path + "." + k);
      continue;
    }
    collect_unknown_keys(v, path.empty() ? k : path + "." + k, model_name, bad);
  }
}

void deep_merge(Json& base, const Json& incoming) {
  if (!incoming.is_object() || !base.is_object()) {
    base = incoming;
    return;
  }
  for (const auto& [k, v] : incoming.items()) {
    if (base.contains(k) && base[k].is_object() && v.is_object())
      deep_merge(base[k], v);
    else
      base[k] = v;
  }
}

void apply_override(Json& config, const std::string& spec) {
  auto eq = spec.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override must look like key.path=value: " + spec);
  std::string path = spec.substr(0, eq);
  std::string value = spec.substr(eq + 1);
  Json parsed;
  try {
    parsed = Json::parse(value);
  } catch (...) {
    parsed = value;  // bare strings allowed
  }
  Json* node = &config;
  size_t pos = 0;
  for (;;) {
    auto dot = path.find('.', pos);
    std::string key = path.substr(pos, dot == std::string::npos ? dot : dot - pos);
    if (key.empty()) throw ConfigError("empty key in override: " + spec);
    if (dot == std::string::npos) {
      (*node)[key] = parsed;
      return;
    }
    node = &(*node)[key];
    pos = dot + 1;
  }
}

double num(const Json& j, const std::string& key, double fallback) {
  if (!j.contains(key)) return fallback;
  if (!j.at(key).is_number())
    throw ConfigError("expected a number for \"" + key + "\"");
  return j.at(key).get<double>();
}

struct ResolvedModel {
  PDMPModel model;
  bool is_calcium = false;
  CalciumParams calcium;
};

ResolvedModel build_model(const Json& config, double T) {
  const auto& jm = config.at("model");
  std::string name = jm.at("name").get<std::string>();
  const Json& pj = jm.at("params");
  ResolvedModel out;
  try {
    if (name == "calcium") {
      CalciumParams p;
      p.k_f = num(pj, "k_f", p.k_f);
      p.V_s = num(pj, "V_s", p.V_s);
      p.K_s = num(pj, "K_s", p.K_s);
      p.k_leak = num(pj, "k_leak", p.k_leak);
      p.gamma = num(pj, "gamma", p.gamma);
      p.alpha_open = num(pj, "alpha_open", p.alpha_open);
      p.alpha_close = num(pj, "alpha_close", p.alpha_close);
      p.c_total = num(pj, "c_total", p.c_total);
      p.N = static_cast<long>(num(pj, "N", static_cast<double>(p.N)));
      p.x_target = num(pj, "x_target", p.x_target);
      p.x0 = num(pj, "x0", p.x0);
      p.u1_0 = num(pj, "u1_0", p.u1_0);
      p.T = T;
      out.model = calcium_model(p);
      out.is_calcium = true;
      out.calcium = p;
    } else if (name == "poisson") {
      out.model = poisson_model(num(pj, "rate", 1.0),
                                static_cast<long>(num(pj, "N", 100)),
                                num(pj, "x0", 0.0));
    } else if (name == "birth-death") {
      out.model = birth_death_model(num(pj, "birth", 1.0), num(pj, "death", 1.0),
                                    static_cast<long>(num(pj, "N", 100)),
                                    num(pj, "x0", 0.0));
    } else {
      throw ConfigError("unknown model \"" + name + "\"");
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(std::string("invalid model parameters: ") + e.what());
  }
  return out;
}

ShootingProblem make_problem(const Json& config, const ResolvedModel& rm,
                             const PDMPModel& model, double T, int threads) {
  const Json& sj = config.at("solver");
  ShootingProblem prob;
  prob.model = &model;
  prob.T = T;
  prob.rtol = num(sj, "rtol", prob.rtol);
  prob.atol = num(sj, "atol", prob.atol);
  prob.newton_tol = num(sj, "newton_tol", prob.newton_tol);
  prob.max_newton = static_cast<int>(num(sj, "max_newton", prob.max_newton));
  prob.nodes = static_cast<long>(num(sj, "nodes", static_cast<double>(prob.nodes)));
  prob.segments = static_cast<int>(num(sj, "segments", prob.segments));
  prob.threads = threads;
  const Json& tj = config.at("target");
  if (tj.contains("z")) {
    prob.form = BvpForm::Flux;
    auto zt = tj.at("z").get<std::vector<double>>();
    if (static_cast<int>(zt.size()) != model.network.M)
      throw ConfigError("target.z dimension mismatch");
    prob.target = Eigen::Map<const Vec>(zt.data(), zt.size());
  } else if (tj.contains("x")) {
    prob.form = BvpForm::Contracted;
    auto xt = tj.at("x").get<std::vector<double>>();
    if (static_cast<int>(xt.size()) != model.network.d)
      throw ConfigError("target.x dimension mismatch");
    prob.target = Eigen::Map<const Vec>(xt.data(), xt.size());
  } else {
    throw ConfigError("target.x or target.z required");
  }
  if (rm.is_calcium && prob.form == BvpForm::Contracted)
    prob.derivs = make_calcium_derivs(rm.calcium);
  return prob;
}

PathPredicate make_predicate(const Json& config, const PDMPModel& model,
                             double default_threshold) {
  const Json& pj = config.at("ensemble").at("predicate");
  std::string type = pj.at("type").get<std::string>();
  int comp = static_cast<int>(num(pj, "component", 0));
  double thr = num(pj, "threshold", -1.0);
  if (thr < 0) thr = default_threshold;
  if (thr < 0) throw ConfigError("ensemble.predicate.threshold required");
  const double eps = 1e-12;
  if (type == "x-threshold") {
    if (comp < 0 || comp >= model.network.d)
      throw ConfigError("predicate component out of range");
    return [comp, thr, eps](const JumpPath& p) {
      return p.terminal.x[comp] >= thr - eps;
    };
  }
  if (type == "z-threshold") {
    if (comp < 0 || comp >= model.network.M)
      throw ConfigError("predicate component out of range");
    return [comp, thr, eps](const JumpPath& p) {
      return p.terminal.z[comp] >= thr - eps;
    };
  }
  throw ConfigError("unknown predicate type \"" + type + "\"");
}

Json run_info(const std::string& command, const Json& config,
              std::uint64_t seed) {
  return Json{{"command", command}, {"config", config}, {"seed", seed}};
}

int cmd_validate(const Json& config, OutputWriter& out) {
  double T = num(config.at("experiment"), "T", 10.0);
  auto rm = build_model(config, T);
  const auto& model = rm.model;
  SamplingBox box;
  box.x_lo = Vec::Zero(model.network.d);
  box.x_hi = Vec::Ones(model.network.d);
  box.u_lo = Vec::Zero(model.m);
  box.u_hi = Vec::Constant(model.m, 10.0);
  long samples =
      static_cast<long>(num(config.at("validate"), "samples", 5000));
  auto rep = validate_network(model.network, box, samples);
  out.write("validation.json", validation_to_json(rep).dump(2) + "\n");
  out.write_manifest(run_info("validate", config, 0));
  return rep.passed ? 0 : 3;
}

int cmd_simulate(const Json& config, OutputWriter& out, int threads) {
  const Json& ej = config.at("experiment");
  double T = num(ej, "T", 10.0);
  auto seed = static_cast<std::uint64_t>(num(ej, "seed", 42));
  auto rm = build_model(config, T);
  SimulateOptions opts;
  opts.dense_step = num(ej, "dense_step", -1.0);

  long count = static_cast<long>(num(config.at("ensemble"), "count", 1));
  if (count > 1) {
    EnsembleOptions eo;
    eo.count = count;
    eo.master_seed = seed;
    eo.threads = threads;
    eo.dense = true;
    eo.sim = opts;
    PathPredicate pred;  // predicate optional for plain ensemble statistics
    if (num(config.at("ensemble").at("predicate"), "threshold", -1.0) >= 0)
      pred = make_predicate(config, rm.model, -1.0);
    auto rep = simulate_ensemble(rm.model, T, eo, pred);
    out.write("ensemble_report.json",
              ensemble_to_json(rep, rm.model.scale, bool(pred)).dump(2) + "\n");
    if (config.at("output").value("plot_data", true))
      out.write("ensemble_series.csv", ensemble_plot_series(rep));
    out.write_manifest(run_info("simulate", config, seed));
    return 0;
  }

  auto path = simulate_pdmp(rm.model, T, seed, opts);
  out.write("trajectory.csv", jump_path_csv(path));
  out.write("trajectory.json", jump_path_to_json(path).dump(2) + "\n");
  out.write_manifest(run_info("simulate", config, seed));
  return 0;
}

int cmd_action(const Json& config, OutputWriter& out,
               const std::string& path_file) {
  double T = num(config.at("experiment"), "T", 10.0);
  auto rm = build_model(config, T);
  const auto& net = rm.model.network;
  std::ifstream is(path_file);
  if (!is) throw IoError("cannot read path CSV " + path_file);
  SmoothPath path = read_smooth_path_csv(is, net.d, rm.model.m, net.M);
  auto res = action(path, net);
  Json j = action_to_json(res);
  j["path_file"] = path_file;
  j["nodes"] = path.nodes();
  out.write("action.json", j.dump(2) + "\n");
  out.write_manifest(run_info("action", config, 0));
  return 0;
}

int cmd_optimal_path(const Json& config, OutputWriter& out, int threads) {
  double T = num(config.at("experiment"), "T", 10.0);
  auto rm = build_model(config, T);
  auto prob = make_problem(config, rm, rm.model, T, threads);
  auto traj = solve_bvp(prob);
  out.write("optimal_trajectory.csv", optimal_trajectory_csv(traj));
  out.write("optimal_path.json", trajectory_summary_json(traj).dump(2) + "\n");
  if (config.at("output").value("plot_data", true))
    out.write("plot_series.csv", trajectory_plot_series(traj));
  out.write_manifest(run_info("optimal-path", config, 0));
  return 0;
}

int cmd_calcium_wave(const Json& config, OutputWriter& out, int threads) {
  double T = num(config.at("experiment"), "T", 10.0);
  auto rm = build_model(config, T);
  if (!rm.is_calcium) throw ConfigError("calcium-wave requires model.name = calcium");
  CalciumWaveOptions opts;
  const Json& wj = config.at("wave");
  if (wj.value("monte_carlo", false)) {
    for (const auto& n : config.at("sweep").at("N_list"))
      opts.N_list.push_back(n.get<long>());
    opts.trials = static_cast<long>(num(config.at("sweep"), "trials", 100000));
    opts.seed = static_cast<std::uint64_t>(num(config.at("experiment"), "seed", 42));
  }
  opts.x0_snap = num(wj, "x0_snap", 0.0);
  opts.threads = threads;
  opts.bvp_nodes = static_cast<long>(num(config.at("solver"), "nodes", 1025));
  auto rep = wave_transition_experiment(rm.calcium, opts);
  Json j = wave_report_to_json(rep);
  j["trajectory_files"] = Json::array({"optimal_trajectory.csv"});
  out.write("optimal_trajectory.csv", optimal_trajectory_csv(rep.trajectory));
  out.write("wave_report.json", j.dump(2) + "\n");
  if (config.at("output").value("plot_data", true)) {
    out.write("plot_series.csv", trajectory_plot_series(rep.trajectory));
    if (!rep.monte_carlo.empty())
      out.write("sweep_series.csv",
                sweep_plot_series(rep.monte_carlo, rep.J_star));
  }
  out.write_manifest(
      run_info("calcium-wave", config,
               static_cast<std::uint64_t>(num(config.at("experiment"), "seed", 42))));
  return 0;
}

int cmd_sweep(const Json& config, OutputWriter& out, int threads) {
  const Json& ej = config.at("experiment");
  double T = num(ej, "T", 10.0);
  auto seed = static_cast<std::uint64_t>(num(ej, "seed", 42));
  auto rm = build_model(config, T);
  auto prob = make_problem(config, rm, rm.model, T, threads);
  if (prob.form != BvpForm::Contracted)
    throw ConfigError("sweep requires target.x");
  auto traj = solve_bvp(prob);
  double J_star = traj.action;

  double threshold = prob.target[0];
  auto predicate = make_predicate(config, rm.model, threshold);
  long trials = static_cast<long>(num(config.at("sweep"), "trials", 100000));
  std::vector<MonteCarloRow> rows;
  Json mc = Json::array();
  for (const auto& nj : config.at("sweep").at("N_list")) {
    long N = nj.get<long>();
    PDMPModel mN = rm.model;
    mN.scale = N;
    EnsembleOptions eo;
    eo.count = trials;
    eo.master_seed = seed + static_cast<std::uint64_t>(N);
    eo.threads = threads;
    eo.dense = false;
    auto rep = simulate_ensemble(mN, T, eo, predicate);
    MonteCarloRow row{N, trials, rep.hits, rep.minus_log_p_over_N};
    rows.push_back(row);
    mc.push_back({{"N", N},
                  {"trials", trials},
                  {"hits", rep.hits},
                  {"minus_logP_over_N", ext_to_json(rep.minus_log_p_over_N)}});
  }
  Json j;
  j["J_star"] = J_star;
  j["monte_carlo"] = std::move(mc);
  j["target"] = vec_to_json(prob.target);
  j["T"] = T;
  out.write("sweep.json", j.dump(2) + "\n");
  if (config.at("output").value("plot_data", true))
    out.write("sweep_series.csv", sweep_plot_series(rows, J_star));
  out.write_manifest(run_info("sweep", config, seed));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"piecewise-deterministic Markov process rare-event toolkit"};
  app.require_subcommand(1);

  std::string config_file, out_dir, path_file;
  std::vector<std::string> overrides;
  int threads = 0;
  long seed_flag = -1;

  app.add_option("--config", config_file, "JSON config file");
  app.add_option("--set", overrides, "dotted-path config override key=value");
  app.add_option("--out", out_dir, "output directory (default $PDMP_OUTPUT_DIR or ./pdmp_out)");
  app.add_option("--threads", threads, "worker threads (0 = hardware)");
  app.add_option("--seed", seed_flag, "override experiment.seed");

  auto* sub_validate = app.add_subcommand("validate", "spot-check model assumptions");
  auto* sub_simulate = app.add_subcommand("simulate", "sample one exact trajectory");
  auto* sub_action = app.add_subcommand("action", "evaluate the rate functional on a path CSV");
  sub_action->add_option("--path", path_file, "path CSV file")->required();
  auto* sub_optimal = app.add_subcommand("optimal-path", "solve the Euler-Lagrange BVP");
  auto* sub_wave = app.add_subcommand("calcium-wave", "spark-to-wave pipeline");
  auto* sub_sweep = app.add_subcommand("sweep", "Monte Carlo exponent sweep over N");

  CLI11_PARSE(app, argc, argv);

  std::string command = app.get_subcommands().front()->get_name();

  auto fail = [&](int code, const std::string& stage, const std::string& msg) {
    Json err{{"error", {{"code", code}, {"stage", stage}, {"messages", {msg}}}}};
    std::cout << err.dump(2) << std::endl;
    return code;
  };

  Json config = default_config();
  try {
    if (!config_file.empty()) {
      std::ifstream is(config_file);
      if (!is) throw IoError("cannot read config file " + config_file);
      Json file_cfg;
      try {
        file_cfg = Json::parse(is);
      } catch (const std::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
      }
      deep_merge(config, file_cfg);
    }
    for (const auto& ov : overrides) apply_override(config, ov);
    if (seed_flag >= 0) config["experiment"]["seed"] = seed_flag;

    std::vector<std::string> bad;
    std::string model_name =
        config.at("model").value("name", std::string("calcium"));
    collect_unknown_keys(config, "", model_name, &bad);
    if (!bad.empty()) {
      std::string msg = "unknown config keys:";
      for (const auto& k : bad) msg += " " + k;
      throw ConfigError(msg);
    }
  } catch (const IoError& e) {
    return fail(4, "config", e.what());
  } catch (const Error& e) {
    return fail(2, "config", e.what());
  }

  if (threads <= 0) {
    unsigned hc = std::thread::hardware_concurrency();
    threads = hc > 0 ? static_cast<int>(hc) : 1;
  }

  if (out_dir.empty()) {
    const char* env = std::getenv("PDMP_OUTPUT_DIR");
    out_dir = env && *env ? env : "pdmp_out";
  }

  try {
    OutputWriter out(out_dir);
    if (sub_validate->parsed()) return cmd_validate(config, out);
    if (sub_simulate->parsed()) return cmd_simulate(config, out, threads);
    if (sub_action->parsed()) return cmd_action(config, out, path_file);
    if (sub_optimal->parsed()) return cmd_optimal_path(config, out, threads);
    if (sub_wave->parsed()) return cmd_calcium_wave(config, out, threads);
    if (sub_sweep->parsed()) return cmd_sweep(config, out, threads);
    return fail(2, "dispatch", "no subcommand");
  } catch (const ConfigError& e) {
    return fail(2, command, e.what());
  } catch (const IoError& e) {
    return fail(4, command, e.what());
  } catch (const Error& e) {
    return fail(3, command, e.what());
  } catch (const std::exception& e) {
    return fail(3, command, e.what());
  }
}
