#ifndef PDMP_CALCIUM_HPP
#define PDMP_CALCIUM_HPP

#include <cmath>
#include <vector>

#include "pdmp/common.hpp"
#include "pdmp/ldp.hpp"
#include "pdmp/model.hpp"
#include "pdmp/optimal_path.hpp"
#include "pdmp/simulate.hpp"

namespace pdmp {

// Two-reaction channel model coupled to cytosolic/ER calcium.  The numeric
// defaults are chosen so the fixed point is interior and the drift
// non-stiff; every value is config-overridable.
struct CalciumParams {
  double k_f = 1.0;        // channel flux coefficient
  double V_s = 0.9;        // max SERCA pump rate
  double K_s = 0.2;        // SERCA half-saturation
  double k_leak = 0.05;    // leak coefficient
  double gamma = 5.0;      // cytosol/ER volume ratio
  double alpha_open = 2.0;   // opening rate coefficient (per concentration)
  double alpha_close = 1.0;  // closing rate
  double c_total = 10.0;     // conserved gamma*u1 + u2
  long N = 1000;             // channel count
  double T = 5.0;            // horizon
  double x_target = 0.9;     // wave target, in (x*, 1]
  double x0 = 0.6;           // initial open fraction (simulation start)
  double u1_0 = 1.2;         // initial cytosolic calcium

  void check() const {
    if (k_f <= 0 || V_s <= 0 || K_s <= 0 || k_leak <= 0 || gamma <= 0 ||
        alpha_open <= 0 || alpha_close <= 0)
      throw ModelError("calcium rate parameters must be positive");
    if (c_total <= 0) throw ModelError("c_total must be positive");
    if (!(x_target > 0 && x_target <= 1)) throw ModelError("x_target must lie in (0, 1]");
    if (N < 1) throw ModelError("channel count must be positive");
    if (!(x0 >= 0 && x0 <= 1)) throw ModelError("x0 must lie in [0, 1]");
  }

  double j_serca(double u1) const {
    return V_s * u1 * u1 / (K_s * K_s + u1 * u1);
  }
  double j_serca_prime(double u1) const {
    double den = K_s * K_s + u1 * u1;
    return 2.0 * V_s * K_s * K_s * u1 / (den * den);
  }
};

// u2 follows u1 through the conservation law gamma*u1 + u2 = c_total.
// Negative results indicate unphysical parameters; the algebra still holds.
inline double reduce_u2(const CalciumParams& p, double u1) {
  return p.c_total - p.gamma * u1;
}

// Full (m = 2) or conservation-reduced (m = 1) calcium PDMP.
inline PDMPModel calcium_model(const CalciumParams& p, bool reduced = false) {
  p.check();
  PDMPModel model;
  model.name = reduced ? "calcium-reduced" : "calcium";
  auto& net = model.network;
  net.d = 1;
  net.M = 2;
  net.xi = {Eigen::VectorXi::Constant(1, -1), Eigen::VectorXi::Constant(1, +1)};
  net.rate_bound =
      std::max(p.alpha_close, p.alpha_open * std::max(10.0, p.c_total / p.gamma));

  const double a1 = p.alpha_open, am1 = p.alpha_close;
  net.lambda = {
      [am1](CVecRef x, CVecRef) { return am1 * std::max(x[0], 0.0); },
      [a1](CVecRef x, CVecRef u) {
        return a1 * std::max(u[0], 0.0) * std::max(1.0 - x[0], 0.0);
      }};
  net.dlambda_dx = {
      [am1](CVecRef, CVecRef, Vec& out) { out.resize(1); out[0] = am1; },
      [a1](CVecRef, CVecRef u, Vec& out) { out.resize(1); out[0] = -a1 * u[0]; }};

  const double kf = p.k_f, kl = p.k_leak, g = p.gamma, c = p.c_total;
  const CalciumParams pc = p;
  if (!reduced) {
    model.m = 2;
    net.dlambda_du = {
        [](CVecRef, CVecRef, Vec& out) { out.setZero(2); },
        [a1](CVecRef x, CVecRef, Vec& out) {
          out.setZero(2);
          out[0] = a1 * std::max(1.0 - x[0], 0.0);
        }};
    model.drift = [pc, kf, kl, g](CVecRef u, CVecRef x, VecRef out) {
      double w = u[1] - u[0];
      double a1v = kf * x[0] * w - pc.j_serca(u[0]) + kl * w;
      out[0] = a1v;
      out[1] = -g * a1v;
    };
    model.dA_dx = [kf, g](CVecRef u, CVecRef, Mat& out) {
      out.resize(2, 1);
      out(0, 0) = kf * (u[1] - u[0]);
      out(1, 0) = -g * out(0, 0);
    };
    model.dA_du = [pc, kf, kl, g](CVecRef u, CVecRef x, Mat& out) {
      out.resize(2, 2);
      double d1 = -kf * x[0] - pc.j_serca_prime(u[0]) - kl;
      double d2 = kf * x[0] + kl;
      out(0, 0) = d1;
      out(0, 1) = d2;
      out(1, 0) = -g * d1;
      out(1, 1) = -g * d2;
    };
    model.u0.resize(2);
    model.u0 << p.u1_0, reduce_u2(p, p.u1_0);
    LinearInvariant inv;
    inv.coef_x = Vec::Zero(1);
    inv.coef_u.resize(2);
    inv.coef_u << g, 1.0;
    inv.value = c;
    model.invariants.push_back(inv);
  } else {
    model.m = 1;
    net.dlambda_du = {
        [](CVecRef, CVecRef, Vec& out) { out.setZero(1); },
        [a1](CVecRef x, CVecRef, Vec& out) {
          out.resize(1);
          out[0] = a1 * std::max(1.0 - x[0], 0.0);
        }};
    model.drift = [pc, kf, kl, g, c](CVecRef u, CVecRef x, VecRef out) {
      double w = c - (g + 1.0) * u[0];
      out[0] = (kf * x[0] + kl) * w - pc.j_serca(u[0]);
    };
    model.dA_dx = [kf, g, c](CVecRef u, CVecRef, Mat& out) {
      out.resize(1, 1);
      out(0, 0) = kf * (c - (g + 1.0) * u[0]);
    };
    model.dA_du = [pc, kf, kl, g](CVecRef u, CVecRef x, Mat& out) {
      out.resize(1, 1);
      out(0, 0) = -(kf * x[0] + kl) * (g + 1.0) - pc.j_serca_prime(u[0]);
    };
    model.u0 = Vec::Constant(1, p.u1_0);
  }
  model.x0 = Vec::Constant(1, p.x0);
  model.scale = p.N;
  model.check_structure();
  return model;
}

// Nonnegative root of zdot1 (xdot + zdot1) = lambda1 lambda2, written to
// avoid cancellation on either sign of xdot.
inline double z1dot_quadratic(double xdot, double lambda1, double lambda2) {
  if (lambda1 <= kRateFloor || lambda2 <= kRateFloor)
    throw SingularityError("z1dot quadratic needs rates above the floor",
                           lambda1 <= kRateFloor ? 0 : 1);
  double disc = std::sqrt(xdot * xdot + 4.0 * lambda1 * lambda2);
  if (xdot >= 0) return 2.0 * lambda1 * lambda2 / (xdot + disc);
  return 0.5 * (-xdot + disc);
}

// First and second derivatives of the contracted Lagrangian in closed form.
struct CalciumLagrangianDerivs {
  double value = 0.0;
  double z1dot = 0.0, z2dot = 0.0;
  double dz1_dxdot = 0.0;
  double d2z1_dxdot2 = 0.0;
  double dL_dxdot = 0.0;
  double d2L_dxdot2 = 0.0;
  double d2L_dxdot_dx = 0.0;
  Vec d2L_dxdot_du;  // m entries
  double dL_dx = 0.0;
  Vec dL_du;         // m entries
};

inline CalciumLagrangianDerivs calcium_lagrangian_derivatives(
    double xdot, double x, const Vec& u, const CalciumParams& p,
    bool reduced = false) {
  const int m = reduced ? 1 : 2;
  const double lam1 = p.alpha_close * x;
  const double lam2 = p.alpha_open * u[0] * (1.0 - x);
  const double dlam1_dx = p.alpha_close;
  const double dlam2_dx = -p.alpha_open * u[0];
  const double dlam2_du1 = p.alpha_open * (1.0 - x);

  CalciumLagrangianDerivs D;
  D.z1dot = z1dot_quadratic(xdot, lam1, lam2);
  D.z2dot = lam1 * lam2 / D.z1dot;  // equals xdot + z1dot by the quadratic
  const double den = D.z1dot + D.z2dot;  // = 2 z1dot + xdot
  if (den <= 1e-12)
    throw SingularityError("degenerate denominator 2*z1dot + xdot", -1);

  const double g = -D.z1dot / den;
  const double log1 = std::log(D.z1dot / lam1);
  const double log2 = std::log(D.z2dot / lam2);

  D.value = ell(D.z1dot / lam1) * lam1 + ell(D.z2dot / lam2) * lam2;
  D.dz1_dxdot = g;
  D.d2z1_dxdot2 = D.z1dot / (den * den) * (1.0 + xdot / den);
  D.dL_dxdot = log1 * g + log2 * (1.0 + g);
  D.d2L_dxdot2 = 1.0 / den;
  D.d2L_dxdot_dx = -dlam1_dx / lam1 * g - dlam2_dx / lam2 * (1.0 + g);
  D.d2L_dxdot_du = Vec::Zero(m);
  D.d2L_dxdot_du[0] = -dlam2_du1 / lam2 * (1.0 + g);
  D.dL_dx = dlam1_dx * (1.0 - D.z1dot / lam1) + dlam2_dx * (1.0 - D.z2dot / lam2);
  D.dL_du = Vec::Zero(m);
  D.dL_du[0] = dlam2_du1 * (1.0 - D.z2dot / lam2);
  return D;
}

// Analytic ContractedDerivs provider for the calcium model.
inline ContractedDerivsFn make_calcium_derivs(const CalciumParams& params,
                                              bool reduced = false) {
  return [params, reduced](const Vec& xdot, const Vec& x,
                           const Vec& u) -> ContractedDerivs {
    auto C = calcium_lagrangian_derivatives(xdot[0], x[0], u, params, reduced);
    ContractedDerivs D;
    D.value = C.value;
    D.zdot.resize(2);
    D.zdot << C.z1dot, C.z2dot;
    D.grad_xdot = Vec::Constant(1, C.dL_dxdot);
    D.grad_x = Vec::Constant(1, C.dL_dx);
    D.grad_u = C.dL_du;
    D.hess_xdot = Mat::Constant(1, 1, C.d2L_dxdot2);
    D.hess_xdot_x = Mat::Constant(1, 1, C.d2L_dxdot_dx);
    D.hess_xdot_u = C.d2L_dxdot_du.transpose();
    return D;
  };
}

struct MonteCarloRow {
  long N = 0;
  long trials = 0;
  long hits = 0;
  ExtReal minus_logP_over_N;
};

struct CalciumWaveReport {
  CalciumParams params;
  FixedPointResult fixed_point;
  double J_star = 0.0;
  double el_residual = 0.0;
  OptimalTrajectory trajectory;
  std::vector<MonteCarloRow> monte_carlo;
};

struct CalciumWaveOptions {
  std::vector<long> N_list;   // empty: skip Monte Carlo validation
  long trials = 100000;
  int threads = 1;
  std::uint64_t seed = 2024;
  double x0_snap = 0.0;  // >0: snap start to this grid so every N represents it
  long bvp_nodes = 1025;
};

// Spark-to-wave pipeline: fixed point -> contracted-form shooting with
// eta(T) = 0 -> LDP exponent -> optional Monte Carlo validation.
inline CalciumWaveReport wave_transition_experiment(
    const CalciumParams& params, const CalciumWaveOptions& opts = {}) {
  CalciumWaveReport rep;
  rep.params = params;

  PDMPModel model = calcium_model(params);
  // ride the fluid limit toward the attractor, then polish with Newton
  SmoothPath relax = deterministic_limit(model, 60.0, 257);
  long last = relax.nodes() - 1;
  rep.fixed_point = fixed_point(model, relax.X.row(last).transpose(),
                                relax.U.row(last).transpose());

  double x_start = rep.fixed_point.x[0];
  if (opts.x0_snap > 0) x_start = std::round(x_start / opts.x0_snap) * opts.x0_snap;
  if (params.x_target < x_start - 1e-9)
    throw ModelError("x_target must not lie below the fixed point");

  CalciumParams run = params;
  run.x0 = x_start;
  run.u1_0 = rep.fixed_point.u[0];
  PDMPModel start_model = calcium_model(run);
  // keep u2 exactly at the solved fixed point (c_total already matches)
  start_model.u0 = rep.fixed_point.u;

  ShootingProblem prob;
  prob.model = &start_model;
  prob.form = BvpForm::Contracted;
  prob.T = params.T;
  prob.target = Vec::Constant(1, params.x_target);
  prob.derivs = make_calcium_derivs(run);
  prob.nodes = opts.bvp_nodes;
  prob.threads = opts.threads;
  rep.trajectory = solve_bvp(prob);
  rep.J_star = rep.trajectory.action;
  rep.el_residual = el_residual_supnorm(rep.trajectory, start_model, prob.derivs);

  for (long N : opts.N_list) {
    CalciumParams pN = run;
    pN.N = N;
    pN.x0 = std::round(x_start * static_cast<double>(N)) / static_cast<double>(N);
    PDMPModel mN = calcium_model(pN);
    mN.u0 = rep.fixed_point.u;
    const double threshold = params.x_target - 1e-12;
    EnsembleOptions eo;
    eo.count = opts.trials;
    eo.master_seed = opts.seed + static_cast<std::uint64_t>(N);
    eo.threads = opts.threads;
    eo.dense = false;
    auto er = simulate_ensemble(mN, params.T, eo, [threshold](const JumpPath& p) {
      return p.terminal.x[0] >= threshold;
    });
    MonteCarloRow row;
    row.N = N;
    row.trials = opts.trials;
    row.hits = er.hits;
    row.minus_logP_over_N = er.minus_log_p_over_N;
    rep.monte_carlo.push_back(row);
  }
  return rep;
}

}  // namespace pdmp

#endif  // PDMP_CALCIUM_HPP
