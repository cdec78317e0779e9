#ifndef PDMP_LDP_HPP
#define PDMP_LDP_HPP

#include <vector>

#include "pdmp/common.hpp"
#include "pdmp/detail/simplex.hpp"
#include "pdmp/model.hpp"
#include "pdmp/path.hpp"
#include "pdmp/rk45.hpp"

namespace pdmp {

// ell(a) = a log a - a + 1, extended continuously with ell(0) = 1.
inline double ell(double a) {
  if (a < 0) throw ModelError("ell defined on [0, inf)");
  if (a == 0.0) return 1.0;
  double e = a - 1.0;
  if (std::abs(e) < 0.5) return a * std::log1p(e) - e;  // accurate near the zero
  return a * std::log(a) - e;
}

namespace detail {

// One term of the flux Lagrangian, with the rate clamped to the floor when a
// positive flux meets a merely-isolated rate dropout.  Callers decide whether
// the dropout has positive measure.
inline double flux_term(double q, double rate) {
  if (q <= 0.0) return rate > kRateFloor ? rate : (rate > 0 ? rate : 0.0);
  double lam = std::max(rate, kRateFloor);
  return ell(q / lam) * lam;
}

}  // namespace detail

// L(q, x, u) = sum_a ell(q_a / lambda_a) lambda_a.  +inf (tagged) when some
// q_a > 0 while lambda_a is at the rate floor.
inline ExtReal flux_lagrangian_rates(const Vec& q, const Vec& rates,
                                     Vec* per_reaction = nullptr) {
  const long M = q.size();
  if (per_reaction) per_reaction->setZero(M);
  bool inf = false;
  double total = 0;
  for (long a = 0; a < M; ++a) {
    if (q[a] < 0) throw ModelError("flux must be nonnegative");
    if (q[a] > 0 && rates[a] <= kRateFloor) { inf = true; continue; }
    double term = detail::flux_term(q[a], rates[a]);
    total += term;
    if (per_reaction) (*per_reaction)[a] = term;
  }
  return inf ? ExtReal::infinity() : ExtReal::finite(total);
}

inline ExtReal flux_lagrangian(const ReactionNetwork& net, const Vec& q,
                               const Vec& x, const Vec& u) {
  Vec rates(net.M);
  for (int a = 0; a < net.M; ++a) rates[a] = net.lambda[a](x, u);
  return flux_lagrangian_rates(q, rates);
}

struct ViolationInterval {
  int reaction;
  double t_begin;
  double t_end;
};

struct ActionResult {
  ExtReal total;
  Vec per_reaction;  // finite contributions per reaction
  std::vector<ViolationInterval> violations;
};

// Rate functional of a piecewise-linear path: forward-difference fluxes,
// trapezoid quadrature of L along the grid.  An interval counts as a
// violation of the admissibility set when a reaction keeps positive flux
// while its rate sits at the floor across the whole interval.
inline ActionResult action(const SmoothPath& path, const ReactionNetwork& net,
                           double consistency_tol = 1e-8) {
  const long n = path.nodes();
  const int M = net.M, d = net.d;
  if (n < 2) throw PathError("path needs at least two nodes", 0);
  const double dt = path.dt();

  // structural checks: linear constraint against node 0, monotone z
  Vec x0 = path.X.row(0).transpose();
  for (int a = 0; a < M; ++a) x0 -= path.Z(0, a) * net.xi[a].cast<double>();
  Vec resid(d);
  for (long i = 0; i < n; ++i) {
    resid = path.X.row(i).transpose() - x0;
    for (int a = 0; a < M; ++a) resid -= path.Z(i, a) * net.xi[a].cast<double>();
    if (resid.lpNorm<Eigen::Infinity>() > consistency_tol)
      throw PathError("path violates x = x0 + sum z_a xi_a", i);
  }

  Mat rates(n, M);
  for (long i = 0; i < n; ++i) {
    Vec x = path.X.row(i).transpose();
    Vec u = path.U.row(i).transpose();
    for (int a = 0; a < M; ++a) rates(i, a) = net.lambda[a](x, u);
  }

  ActionResult res;
  res.per_reaction = Vec::Zero(M);
  std::vector<ViolationInterval> raw;
  for (long i = 0; i + 1 < n; ++i) {
    for (int a = 0; a < M; ++a) {
      double qz = (path.Z(i + 1, a) - path.Z(i, a)) / dt;
      if (qz < -1e-9) throw PathError("z is not nondecreasing", i);
      if (qz < 0) qz = 0;
      double r0 = rates(i, a), r1 = rates(i + 1, a);
      if (qz > 0 && r0 <= kRateFloor && r1 <= kRateFloor) {
        raw.push_back({a, path.time(i), path.time(i + 1)});
        continue;
      }
      res.per_reaction[a] +=
          0.5 * dt * (detail::flux_term(qz, r0) + detail::flux_term(qz, r1));
    }
  }

  // merge adjacent violation intervals per reaction
  for (const auto& v : raw) {
    if (!res.violations.empty() && res.violations.back().reaction == v.reaction &&
        std::abs(res.violations.back().t_end - v.t_begin) < 0.5 * dt)
      res.violations.back().t_end = v.t_end;
    else
      res.violations.push_back(v);
  }
  res.total = res.violations.empty() ? ExtReal::finite(res.per_reaction.sum())
                                     : ExtReal::infinity();
  return res;
}

// Sanov-type rate for unit-rate components: action of the path's flux block
// with every rate pinned to 1.
inline double poisson_action(const SmoothPath& y) {
  const long n = y.nodes();
  const int M = static_cast<int>(y.Z.cols());
  const double dt = y.dt();
  double total = 0;
  for (long i = 0; i + 1 < n; ++i)
    for (int a = 0; a < M; ++a) {
      double q = (y.Z(i + 1, a) - y.Z(i, a)) / dt;
      if (q < -1e-9) throw PathError("y is not nondecreasing", i);
      total += dt * ell(std::max(q, 0.0));
    }
  return total;
}

struct ContractedResult {
  ExtReal value;
  Vec zdot;       // minimizer (zero where infeasible/inactive)
  Vec theta;      // dual variable; gradient of Lhat in xdot
  int iterations = 0;
  bool fallback_used = false;
};

namespace detail {

struct DualNewtonOutcome {
  bool converged = false;
  Vec theta;
  double residual = 0.0;
  int iterations = 0;
};

// Damped Newton on the moment equations sum_a xi_a lambda_a exp(theta.xi_a)
// = xdot over the given reaction subset.  Rank-deficient Hessians (targets on
// a face of the cone) are handled with minimum-norm steps.
inline DualNewtonOutcome dual_newton(const std::vector<int>& active,
                                     const std::vector<Eigen::VectorXi>& xi,
                                     const Vec& rates, const Vec& xdot,
                                     int max_iter = 120) {
  const int d = static_cast<int>(xdot.size());
  DualNewtonOutcome out;
  out.theta = Vec::Zero(d);
  double scale = std::max(1.0, xdot.lpNorm<Eigen::Infinity>());
  for (int a : active) scale = std::max(scale, rates[a]);

  Vec g(d), gtrial(d);
  Mat H(d, d);
  auto eval = [&](const Vec& th, Vec& grad) -> bool {
    grad = -xdot;
    for (int a : active) {
      double e = th.dot(xi[a].cast<double>());
      if (e > 400.0) return false;  // divergence guard
      grad += rates[a] * std::exp(e) * xi[a].cast<double>();
    }
    return true;
  };
  if (!eval(out.theta, g)) return out;

  for (out.iterations = 0; out.iterations < max_iter; ++out.iterations) {
    out.residual = g.lpNorm<Eigen::Infinity>();
    if (out.residual <= 1e-13 * scale) {
      out.converged = true;
      return out;
    }
    H.setZero();
    for (int a : active) {
      double e = out.theta.dot(xi[a].cast<double>());
      if (e > 400.0) return out;
      Vec xa = xi[a].cast<double>();
      H += rates[a] * std::exp(e) * xa * xa.transpose();
    }
    Eigen::CompleteOrthogonalDecomposition<Mat> cod(H);
    cod.setThreshold(1e-13);
    Vec step = cod.solve(-g);
    if (!step.allFinite()) return out;
    double s = 1.0;
    bool moved = false;
    double gn = g.norm();
    for (int half = 0; half < 60; ++half) {
      Vec trial = out.theta + s * step;
      if (eval(trial, gtrial) && gtrial.norm() < gn * (1.0 - 1e-4 * s) + 1e-300) {
        out.theta = trial;
        g = gtrial;
        moved = true;
        break;
      }
      s *= 0.5;
    }
    if (!moved) return out;
  }
  out.residual = g.lpNorm<Eigen::Infinity>();
  return out;
}

}  // namespace detail

// Lhat(xdot, x, u): convex program min sum ell(zdot_a/lambda_a) lambda_a over
// zdot >= 0 with sum_a xi_a zdot_a = xdot, solved through the dual
// parameterization zdot_a = lambda_a exp(theta . xi_a).  Falls back to a
// phase-1 simplex cone check (and forced-zero face reduction) before
// declaring the constraint set empty.
inline ContractedResult contracted_lagrangian_rates(
    const std::vector<Eigen::VectorXi>& xi, const Vec& rates, const Vec& xdot) {
  const int M = static_cast<int>(rates.size());
  const int d = static_cast<int>(xdot.size());
  ContractedResult res;
  res.zdot = Vec::Zero(M);
  res.theta = Vec::Zero(d);

  std::vector<int> active;
  double base = 0.0;  // ell(0) * lambda contributions from sub-floor rates
  for (int a = 0; a < M; ++a) {
    if (rates[a] > kRateFloor)
      active.push_back(a);
    else if (rates[a] > 0)
      base += rates[a];
  }

  double scale = std::max(1.0, xdot.lpNorm<Eigen::Infinity>());
  auto finish = [&](const std::vector<int>& act, const Vec& theta, double extra,
                    int iters, bool fb) {
    double value = base + extra;
    for (int a : act) {
      double q = rates[a] * std::exp(theta.dot(xi[a].cast<double>()));
      res.zdot[a] = q;
      value += ell(q / rates[a]) * rates[a];
    }
    res.theta = theta;
    res.value = ExtReal::finite(value);
    res.iterations = iters;
    res.fallback_used = fb;
  };

  if (active.empty()) {
    if (xdot.lpNorm<Eigen::Infinity>() <= 1e-12 * scale) {
      res.value = ExtReal::finite(base);
      return res;
    }
    res.value = ExtReal::infinity();
    return res;
  }

  auto nw = detail::dual_newton(active, xi, rates, xdot);
  if (nw.converged) {
    // a minimizer component collapsing toward zero signals a target on a
    // face of the cone; classify exactly through the LP path below
    bool boundary = false;
    for (int a : active) {
      double q = rates[a] * std::exp(nw.theta.dot(xi[a].cast<double>()));
      if (q < 1e-11 * std::max(scale, rates[a])) boundary = true;
    }
    if (!boundary) {
      finish(active, nw.theta, 0.0, nw.iterations, false);
      return res;
    }
  }

  // Fallback: decide whether the target is outside the cone of the active
  // reactions or sits on a proper face (forcing some fluxes to zero).
  Mat E(d, static_cast<int>(active.size()));
  for (size_t k = 0; k < active.size(); ++k)
    E.col(static_cast<int>(k)) = xi[active[k]].cast<double>();
  if (!detail::cone_feasible(E, xdot)) {
    res.value = ExtReal::infinity();
    res.fallback_used = true;
    return res;
  }

  std::vector<int> interior;
  double forced_sum = 0.0;
  for (size_t k = 0; k < active.size(); ++k) {
    auto mv = detail::max_variable(E, xdot, static_cast<int>(k));
    if (mv.feasible && mv.bounded && mv.value <= 1e-10 * scale)
      forced_sum += rates[active[k]];  // flux pinned at 0: term is ell(0)*lambda
    else
      interior.push_back(active[k]);
  }
  if (interior.empty()) {
    res.value = ExtReal::finite(base + forced_sum);
    res.fallback_used = true;
    return res;
  }
  auto nw2 = detail::dual_newton(interior, xi, rates, xdot, 240);
  if (!nw2.converged)
    throw SolverError("contracted Lagrangian dual Newton did not converge",
                      nw2.residual);
  finish(interior, nw2.theta, forced_sum, nw.iterations + nw2.iterations, true);
  return res;
}

inline ContractedResult contracted_lagrangian(const ReactionNetwork& net,
                                              const Vec& xdot, const Vec& x,
                                              const Vec& u) {
  Vec rates(net.M);
  for (int a = 0; a < net.M; ++a)
    rates[a] = std::max(net.lambda[a](x, u), 0.0);
  return contracted_lagrangian_rates(net.xi, rates, xdot);
}

// Time-rescaling map: w_a(s) = z_a(Lambda_a^{-1}(s)) with Lambda_a the
// cumulative rate along the path.  The components are returned on their
// natural (nonuniform) parametric grids, which makes the map exact at nodes.
inline RescaledPathSet time_rescale_map(const SmoothPath& path,
                                        const ReactionNetwork& net) {
  const long n = path.nodes();
  const int M = net.M;
  const double dt = path.dt();

  Mat rates(n, M);
  for (long i = 0; i < n; ++i) {
    Vec x = path.X.row(i).transpose();
    Vec u = path.U.row(i).transpose();
    for (int a = 0; a < M; ++a) {
      rates(i, a) = net.lambda[a](x, u);
      if (rates(i, a) < kRateFloor)
        throw PathError("rate below floor on [" + fmt17(path.time(i)) + ", ...]; "
                        "time-rescaling undefined (reaction " + std::to_string(a) + ")",
                        i);
    }
  }

  RescaledPathSet out;
  out.horizon = path.T;
  out.comps.resize(M);
  for (int a = 0; a < M; ++a) {
    auto& c = out.comps[a];
    c.s.resize(n);
    c.w.resize(n);
    c.s[0] = 0.0;
    c.w[0] = path.Z(0, a);
    for (long i = 1; i < n; ++i) {
      c.s[i] = c.s[i - 1] + 0.5 * dt * (rates(i - 1, a) + rates(i, a));
      c.w[i] = path.Z(i, a);
    }
  }
  return out;
}

// Inverse of the time-rescaling map, reconstructed by forward integration:
// advance (x, u) with the drift while z_a(t) = w_a(Lambda_a(t)), where
// Lambda_a accumulates the current rates (trapezoid, solved implicitly per
// step so that a round trip reproduces the forward discretization).
inline SmoothPath inverse_time_rescale(const RescaledPathSet& w,
                                       const PDMPModel& model,
                                       long n_nodes = 0) {
  const auto& net = model.network;
  const int M = net.M, d = net.d, m = model.m;
  if (static_cast<int>(w.comps.size()) != M)
    throw ModelError("rescaled component count disagrees with reaction count");
  if (w.horizon <= 0) throw ModelError("rescaled path has no horizon");
  for (const auto& c : w.comps) {
    if (c.s.size() < 1 || std::abs(c.w[0]) > 1e-9)
      throw ModelError("rescaled components must start at w(0) = 0");
    for (long i = 1; i < c.w.size(); ++i)
      if (c.w[i] < c.w[i - 1] - 1e-12)
        throw ModelError("rescaled components must be nondecreasing");
  }
  if (n_nodes <= 1)
    for (const auto& c : w.comps) n_nodes = std::max<long>(n_nodes, c.s.size());
  const double T = w.horizon;
  const double dt = T / static_cast<double>(n_nodes - 1);

  SmoothPath p;
  p.T = T;
  p.Z.resize(n_nodes, M);
  p.X.resize(n_nodes, d);
  p.U.resize(n_nodes, m);

  Vec z(M), x(d), u(m), lam(M), Lam(M), Lam_next(M), z_next(M), x_next(d),
      u_next(m), lam_next(M);
  Vec k1(m), k2(m), k3(m), k4(m), tmp(m), xa(d);
  z.setZero();
  x = model.x0;
  u = model.u0;
  Lam.setZero();

  auto rates_at = [&](const Vec& xx, const Vec& uu, Vec& out, long node) {
    for (int a = 0; a < M; ++a) {
      out[a] = net.lambda[a](xx, uu);
      if (out[a] < kRateFloor)
        throw PathError("rate below floor during reconstruction (reaction " +
                            std::to_string(a) + ")",
                        node);
    }
  };
  rates_at(x, u, lam, 0);

  p.Z.row(0) = z.transpose();
  p.X.row(0) = x.transpose();
  p.U.row(0) = u.transpose();

  for (long i = 0; i + 1 < n_nodes; ++i) {
    Lam_next = Lam + dt * lam;  // explicit predictor
    for (int it = 0; it < 80; ++it) {
      for (int a = 0; a < M; ++a) z_next[a] = w.comps[a].eval(Lam_next[a]);
      x_next = model.x0;
      for (int a = 0; a < M; ++a) x_next += z_next[a] * net.xi[a].cast<double>();
      if (m > 0) {
        // drift step with x interpolated linearly across the interval
        u_next = u;
        const int sub = 2;
        double h = dt / sub;
        auto rhs = [&](double tau, const Vec& uu, Vec& du) {
          double th = tau / dt;  // fraction across the interval
          xa = (1.0 - th) * x + th * x_next;
          model.drift(uu, xa, du);
        };
        for (int ss = 0; ss < sub; ++ss)
          rk4_step(rhs, static_cast<double>(ss) * h, h, u_next, k1, k2, k3, k4, tmp);
      }
      rates_at(x_next, u_next, lam_next, i + 1);
      double delta = 0;
      for (int a = 0; a < M; ++a) {
        double nv = Lam[a] + 0.5 * dt * (lam[a] + lam_next[a]);
        delta = std::max(delta, std::abs(nv - Lam_next[a]));
        Lam_next[a] = nv;
      }
      if (delta <= 1e-14 * std::max(1.0, Lam_next.lpNorm<Eigen::Infinity>())) break;
    }
    for (int a = 0; a < M; ++a) z_next[a] = w.comps[a].eval(Lam_next[a]);
    x_next = model.x0;
    for (int a = 0; a < M; ++a) x_next += z_next[a] * net.xi[a].cast<double>();
    z = z_next;
    x = x_next;
    u = u_next;
    Lam = Lam_next;
    lam = lam_next;
    p.Z.row(i + 1) = z.transpose();
    p.X.row(i + 1) = x.transpose();
    p.U.row(i + 1) = u.transpose();
  }
  return p;
}

}  // namespace pdmp

#endif  // PDMP_LDP_HPP
