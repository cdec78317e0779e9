#ifndef PDMP_COMMON_HPP
#define PDMP_COMMON_HPP

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace pdmp {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Rates below this are treated as zero when deciding whether a flux is
// admissible (the LDP is only stated on sets with rates bounded away from 0).
inline constexpr double kRateFloor = 1e-12;

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ModelError : Error {
  using Error::Error;
};

struct SimulationError : Error {
  double fail_time;
  SimulationError(const std::string& msg, double t)
      : Error(msg + " (t = " + std::to_string(t) + ")"), fail_time(t) {}
};

struct PathError : Error {
  long node;
  PathError(const std::string& msg, long node_index)
      : Error(msg + " (node " + std::to_string(node_index) + ")"), node(node_index) {}
};

struct SolverError : Error {
  double residual;
  SolverError(const std::string& msg, double res)
      : Error(msg + " (residual " + std::to_string(res) + ")"), residual(res) {}
};

struct SingularityError : Error {
  int reaction;
  SingularityError(const std::string& msg, int alpha)
      : Error(msg + " (reaction " + std::to_string(alpha) + ")"), reaction(alpha) {}
};

struct ConfigError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

// Extended-real value: +inf is carried as a tag, never as an IEEE infinity
// inside arithmetic.
struct ExtReal {
  double value = 0.0;
  bool is_inf = false;

  static ExtReal finite(double v) { return {v, false}; }
  static ExtReal infinity() { return {0.0, true}; }
  bool finite_value(double* out) const {
    if (is_inf) return false;
    *out = value;
    return true;
  }
};

inline bool all_finite(const Vec& v) { return v.allFinite(); }

// Fixed 17-significant-digit formatting used by every text artifact so that
// reruns are byte-identical.
inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace pdmp

#endif  // PDMP_COMMON_HPP
