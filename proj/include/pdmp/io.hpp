#ifndef PDMP_IO_HPP
#define PDMP_IO_HPP

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pdmp/calcium.hpp"
#include "pdmp/common.hpp"
#include "pdmp/model.hpp"
#include "pdmp/optimal_path.hpp"
#include "pdmp/path.hpp"
#include "pdmp/simulate.hpp"

namespace pdmp {

using Json = nlohmann::json;

inline std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

struct ManifestEntry {
  std::string file;  // relative to the output directory
  std::size_t bytes = 0;
  std::string fnv1a64_hex;
};

class OutputWriter {
 public:
  explicit OutputWriter(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create output directory " + dir_.string());
  }

  const std::filesystem::path& dir() const { return dir_; }

  std::string write(const std::string& name, const std::string& content) {
    std::ofstream os(dir_ / name, std::ios::binary);
    if (!os) throw IoError("cannot open " + (dir_ / name).string());
    os << content;
    os.close();
    if (!os) throw IoError("failed writing " + (dir_ / name).string());
    char hex[24];
    std::snprintf(hex, sizeof(hex), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(content)));
    entries_.push_back({name, content.size(), hex});
    return name;
  }

  void write_manifest(const Json& run_info) {
    Json manifest;
    manifest["run"] = run_info;
    manifest["outputs"] = Json::array();
    for (const auto& e : entries_) {
      manifest["outputs"].push_back(
          {{"file", e.file}, {"bytes", e.bytes}, {"fnv1a64", e.fnv1a64_hex}});
    }
    std::ofstream os(dir_ / "manifest.json", std::ios::binary);
    os << manifest.dump(2) << "\n";
  }

 private:
  std::filesystem::path dir_;
  std::vector<ManifestEntry> entries_;
};

inline Json ext_to_json(const ExtReal& v) {
  if (v.is_inf) return "inf";
  return v.value;
}

inline Json vec_to_json(const Vec& v) {
  Json arr = Json::array();
  for (long i = 0; i < v.size(); ++i) arr.push_back(v[i]);
  return arr;
}

inline Json validation_to_json(const ValidationReport& rep) {
  Json j;
  j["passed"] = rep.passed;
  j["max_rate"] = rep.max_rate;
  j["issues"] = Json::array();
  for (const auto& issue : rep.issues)
    j["issues"].push_back({{"reaction", issue.reaction},
                           {"what", issue.what},
                           {"value", issue.value}});
  return j;
}

inline Json jump_path_to_json(const JumpPath& p) {
  Json j;
  j["T"] = p.T;
  j["N"] = p.N;
  j["event_count"] = p.events.size();
  Json ev = Json::array();
  for (const auto& e : p.events) ev.push_back({{"t", e.t}, {"reaction", e.reaction}});
  j["events"] = std::move(ev);
  j["terminal"] = {{"t", p.terminal.t},
                   {"x", vec_to_json(p.terminal.x)},
                   {"u", vec_to_json(p.terminal.u)},
                   {"z", vec_to_json(p.terminal.z)}};
  return j;
}

inline Json ensemble_to_json(const EnsembleReport& rep, long N,
                             bool with_probability = true) {
  Json j;
  j["count"] = rep.count;
  j["N"] = N;
  if (with_probability) {
    j["hits"] = rep.hits;
    j["p_hat"] = rep.p_hat;
    j["minus_logP_over_N"] = ext_to_json(rep.minus_log_p_over_N);
  }
  return j;
}

inline Json action_to_json(const ActionResult& res) {
  Json j;
  j["total"] = ext_to_json(res.total);
  j["per_reaction"] = vec_to_json(res.per_reaction);
  j["violations"] = Json::array();
  for (const auto& v : res.violations)
    j["violations"].push_back(
        {{"reaction", v.reaction}, {"t_begin", v.t_begin}, {"t_end", v.t_end}});
  return j;
}

inline Json trajectory_summary_json(const OptimalTrajectory& traj) {
  Json j;
  j["action"] = traj.action;
  j["residual_norm"] = traj.residual_norm;
  j["terminal_eta"] = vec_to_json(traj.terminal_eta);
  Json starts = Json::array();
  for (const auto& l : traj.log) {
    starts.push_back({{"start", l.index},
                      {"converged", l.converged},
                      {"iterations", l.iterations},
                      {"residual", l.residual},
                      {"action", l.action},
                      {"note", l.note}});
  }
  j["starts"] = std::move(starts);
  return j;
}

inline Json calcium_params_to_json(const CalciumParams& p) {
  return Json{{"k_f", p.k_f},
              {"V_s", p.V_s},
              {"K_s", p.K_s},
              {"k_leak", p.k_leak},
              {"gamma", p.gamma},
              {"alpha_open", p.alpha_open},
              {"alpha_close", p.alpha_close},
              {"c_total", p.c_total},
              {"N", p.N},
              {"T", p.T},
              {"x_target", p.x_target},
              {"x0", p.x0},
              {"u1_0", p.u1_0}};
}

inline Json wave_report_to_json(const CalciumWaveReport& rep) {
  Json j;
  j["params"] = calcium_params_to_json(rep.params);
  j["fixed_point"] = {{"x_star", rep.fixed_point.x[0]},
                      {"u1_star", rep.fixed_point.u[0]},
                      {"u2_star", rep.fixed_point.u.size() > 1 ? rep.fixed_point.u[1]
                                                               : reduce_u2(rep.params, rep.fixed_point.u[0])},
                      {"residual", rep.fixed_point.residual}};
  j["J_star"] = rep.J_star;
  j["el_residual"] = rep.el_residual;
  j["solver"] = trajectory_summary_json(rep.trajectory);
  Json mc = Json::array();
  for (const auto& row : rep.monte_carlo)
    mc.push_back({{"N", row.N},
                  {"trials", row.trials},
                  {"hits", row.hits},
                  {"minus_logP_over_N", ext_to_json(row.minus_logP_over_N)}});
  j["monte_carlo"] = std::move(mc);
  return j;
}

// Optimal trajectory CSV: t, x, u, eta, zdot columns.
inline std::string optimal_trajectory_csv(const OptimalTrajectory& traj) {
  std::ostringstream os;
  const long n = traj.path.nodes();
  const int d = static_cast<int>(traj.path.X.cols());
  const int m = static_cast<int>(traj.path.U.cols());
  const int M = static_cast<int>(traj.zdot.cols());
  os << "t";
  for (int i = 1; i <= d; ++i) os << ",x" << i;
  for (int j = 1; j <= m; ++j) os << ",u" << j;
  for (int j = 1; j <= m; ++j) os << ",eta" << j;
  for (int a = 1; a <= M; ++a) os << ",zdot" << a;
  os << "\n";
  for (long i = 0; i < n; ++i) {
    os << fmt17(traj.path.time(i));
    for (int k = 0; k < d; ++k) os << "," << fmt17(traj.path.X(i, k));
    for (int k = 0; k < m; ++k) os << "," << fmt17(traj.path.U(i, k));
    for (int k = 0; k < m; ++k) os << "," << fmt17(traj.eta(i, k));
    for (int k = 0; k < M; ++k) os << "," << fmt17(traj.zdot(i, k));
    os << "\n";
  }
  return os.str();
}

inline std::string smooth_path_csv(const SmoothPath& p) {
  std::ostringstream os;
  write_path_csv(os, p);
  return os.str();
}

inline std::string jump_path_csv(const JumpPath& p) {
  std::ostringstream os;
  write_path_csv(os, p);
  return os.str();
}

// Tidy long-format series for external plotting: series,t,value.
inline std::string trajectory_plot_series(const OptimalTrajectory& traj) {
  std::ostringstream os;
  os << "series,t,value\n";
  const long n = traj.path.nodes();
  const int d = static_cast<int>(traj.path.X.cols());
  const int m = static_cast<int>(traj.path.U.cols());
  for (int k = 0; k < d; ++k)
    for (long i = 0; i < n; ++i)
      os << "x" << (k + 1) << "," << fmt17(traj.path.time(i)) << ","
         << fmt17(traj.path.X(i, k)) << "\n";
  for (int k = 0; k < m; ++k)
    for (long i = 0; i < n; ++i)
      os << "u" << (k + 1) << "," << fmt17(traj.path.time(i)) << ","
         << fmt17(traj.path.U(i, k)) << "\n";
  for (int k = 0; k < m; ++k)
    for (long i = 0; i < n; ++i)
      os << "eta" << (k + 1) << "," << fmt17(traj.path.time(i)) << ","
         << fmt17(traj.eta(i, k)) << "\n";
  return os.str();
}

inline std::string ensemble_plot_series(const EnsembleReport& rep) {
  std::ostringstream os;
  os << "series,t,value\n";
  const long n = static_cast<long>(rep.grid.size());
  const int d = static_cast<int>(rep.mean_x.cols());
  const double c = std::max<double>(1, rep.count);
  for (int k = 0; k < d; ++k) {
    for (long i = 0; i < n; ++i)
      os << "mean_x" << (k + 1) << "," << fmt17(rep.grid[i]) << ","
         << fmt17(rep.mean_x(i, k)) << "\n";
    for (long i = 0; i < n; ++i) {
      double se = std::sqrt(rep.var_x(i, k) / c);
      os << "lo_x" << (k + 1) << "," << fmt17(rep.grid[i]) << ","
         << fmt17(rep.mean_x(i, k) - se) << "\n";
    }
    for (long i = 0; i < n; ++i) {
      double se = std::sqrt(rep.var_x(i, k) / c);
      os << "hi_x" << (k + 1) << "," << fmt17(rep.grid[i]) << ","
         << fmt17(rep.mean_x(i, k) + se) << "\n";
    }
  }
  return os.str();
}

inline std::string sweep_plot_series(const std::vector<MonteCarloRow>& rows,
                                     double J_star) {
  std::ostringstream os;
  os << "series,t,value\n";
  for (const auto& r : rows) {
    if (r.minus_logP_over_N.is_inf) continue;
    os << "minus_logP_over_N," << r.N << "," << fmt17(r.minus_logP_over_N.value)
       << "\n";
  }
  for (const auto& r : rows)
    os << "J_star," << r.N << "," << fmt17(J_star) << "\n";
  return os.str();
}

}  // namespace pdmp

#endif  // PDMP_IO_HPP
