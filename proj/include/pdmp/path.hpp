#ifndef PDMP_PATH_HPP
#define PDMP_PATH_HPP

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "pdmp/common.hpp"
#include "pdmp/model.hpp"

namespace pdmp {

// Piecewise-linear trajectory on a uniform grid over [0, T].  z is linear per
// interval (so zdot is piecewise constant); x and u are nodewise consistent
// with z and the drift ODE.
struct SmoothPath {
  double T = 0.0;
  Mat Z;  // nodes x M
  Mat X;  // nodes x d
  Mat U;  // nodes x m
  long nodes() const { return Z.rows(); }
  double dt() const { return T / static_cast<double>(nodes() - 1); }
  double time(long i) const { return T * static_cast<double>(i) / static_cast<double>(nodes() - 1); }
};

struct PathDiagnostics {
  double constraint_err = 0.0;   // sup |x - x0 - sum z_a xi_a|
  double min_zdot = 0.0;         // most negative forward difference of z
  double u_defect = 0.0;         // sup |du/dt - A| (trapezoid estimate)
};

inline PathDiagnostics check_smooth_path(const SmoothPath& p, const PDMPModel& model) {
  PathDiagnostics diag;
  const auto& net = model.network;
  const long n = p.nodes();
  const double dt = p.dt();
  Vec x(net.d), resid(net.d), a0(model.m), a1(model.m), u(model.m);
  diag.min_zdot = 0.0;
  for (long i = 0; i < n; ++i) {
    resid = p.X.row(i).transpose() - model.x0;
    for (int a = 0; a < net.M; ++a)
      resid -= p.Z(i, a) * net.xi[a].cast<double>();
    diag.constraint_err = std::max(diag.constraint_err, resid.lpNorm<Eigen::Infinity>());
    if (i + 1 < n) {
      for (int a = 0; a < net.M; ++a)
        diag.min_zdot = std::min(diag.min_zdot, (p.Z(i + 1, a) - p.Z(i, a)) / dt);
    }
  }
  if (model.m > 0) {
    for (long i = 0; i + 1 < n; ++i) {
      model.eval_drift(p.U.row(i).transpose(), p.X.row(i).transpose(), a0);
      model.eval_drift(p.U.row(i + 1).transpose(), p.X.row(i + 1).transpose(), a1);
      u = (p.U.row(i + 1) - p.U.row(i)).transpose() / dt - 0.5 * (a0 + a1);
      diag.u_defect = std::max(diag.u_defect, u.lpNorm<Eigen::Infinity>());
    }
  }
  return diag;
}

struct JumpEvent {
  double t;
  int reaction;
};

// Sample trajectory of the N-system: exact event log plus (optionally) a
// dense output grid aligned with the SmoothPath CSV layout.
struct JumpPath {
  double T = 0.0;
  long N = 1;
  std::vector<JumpEvent> events;
  std::vector<double> grid_t;
  Mat X, U, Z;  // dense grid rows (empty when dense output disabled)
  HybridState terminal;
};

// One component of the time-rescaled representation: w_a on [0, tau_a] with a
// strictly increasing (generally nonuniform) sample grid.
struct RescaledComponent {
  Vec s;  // rescaled times, s[0] = 0
  Vec w;  // values, nondecreasing
  double tau() const { return s[s.size() - 1]; }

  double eval(double at) const {
    const long n = s.size();
    if (at <= s[0]) return w[0];
    if (at >= s[n - 1]) return w[n - 1];
    long lo = 0, hi = n - 1;
    while (hi - lo > 1) {
      long mid = (lo + hi) / 2;
      (s[mid] <= at ? lo : hi) = mid;
    }
    double span = s[hi] - s[lo];
    if (span <= 0) return w[lo];
    double th = (at - s[lo]) / span;
    return w[lo] + th * (w[hi] - w[lo]);
  }
};

struct RescaledPathSet {
  double horizon = 0.0;  // original time horizon the map was taken over
  std::vector<RescaledComponent> comps;
};

namespace detail {

inline void write_csv_header(std::ostream& os, int d, int m, int M) {
  os << "t";
  for (int i = 1; i <= d; ++i) os << ",x" << i;
  for (int j = 1; j <= m; ++j) os << ",u" << j;
  for (int a = 1; a <= M; ++a) os << ",z" << a;
  os << "\n";
}

inline void write_csv_row(std::ostream& os, double t, const Vec& x, const Vec& u,
                          const Vec& z) {
  os << fmt17(t);
  for (long i = 0; i < x.size(); ++i) os << "," << fmt17(x[i]);
  for (long j = 0; j < u.size(); ++j) os << "," << fmt17(u[j]);
  for (long a = 0; a < z.size(); ++a) os << "," << fmt17(z[a]);
  os << "\n";
}

}  // namespace detail

inline void write_path_csv(std::ostream& os, const SmoothPath& p) {
  detail::write_csv_header(os, static_cast<int>(p.X.cols()),
                           static_cast<int>(p.U.cols()), static_cast<int>(p.Z.cols()));
  for (long i = 0; i < p.nodes(); ++i)
    detail::write_csv_row(os, p.time(i), p.X.row(i).transpose(),
                          p.U.row(i).transpose(), p.Z.row(i).transpose());
}

inline void write_path_csv(std::ostream& os, const JumpPath& p) {
  detail::write_csv_header(os, static_cast<int>(p.X.cols()),
                           static_cast<int>(p.U.cols()), static_cast<int>(p.Z.cols()));
  for (size_t i = 0; i < p.grid_t.size(); ++i)
    detail::write_csv_row(os, p.grid_t[i], p.X.row(i).transpose(),
                          p.U.row(i).transpose(), p.Z.row(i).transpose());
}

// Parse a SmoothPath from the CSV layout above.  The grid must be uniform.
inline SmoothPath read_smooth_path_csv(std::istream& is, int d, int m, int M) {
  std::string line;
  if (!std::getline(is, line)) throw IoError("empty path CSV");
  std::vector<std::vector<double>> rows;
  const int want = 1 + d + m + M;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::strtod(cell.c_str(), nullptr));
    if (static_cast<int>(row.size()) != want)
      throw IoError("path CSV row has wrong column count");
    rows.push_back(std::move(row));
  }
  if (rows.size() < 2) throw IoError("path CSV needs at least two rows");
  const long n = static_cast<long>(rows.size());
  SmoothPath p;
  p.T = rows.back()[0] - rows.front()[0];
  p.X.resize(n, d);
  p.U.resize(n, m);
  p.Z.resize(n, M);
  const double dt = p.T / static_cast<double>(n - 1);
  for (long i = 0; i < n; ++i) {
    double expect = rows.front()[0] + dt * static_cast<double>(i);
    if (std::abs(rows[i][0] - expect) > 1e-9 * std::max(1.0, p.T))
      throw IoError("path CSV grid is not uniform");
    int c = 1;
    for (int k = 0; k < d; ++k) p.X(i, k) = rows[i][c++];
    for (int k = 0; k < m; ++k) p.U(i, k) = rows[i][c++];
    for (int k = 0; k < M; ++k) p.Z(i, k) = rows[i][c++];
  }
  return p;
}

}  // namespace pdmp

#endif  // PDMP_PATH_HPP
