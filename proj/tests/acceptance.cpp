// Acceptance suite: one binary, one pass/fail line per criterion.
// Usage: acceptance [--criterion N] [--threads T]

#include <chrono>
#include <cstdio>
#include <cstring>
#include <string>
#include <thread>
#include <vector>

#include "pdmp/calcium.hpp"
#include "pdmp/ldp.hpp"
#include "pdmp/models.hpp"
#include "pdmp/optimal_path.hpp"
#include "pdmp/simulate.hpp"
#include "support/oracles.hpp"

using namespace pdmp;

namespace {

constexpr double kEll2 = 0.38629436111989062;  // ell(2) = 2 log 2 - 1
int g_threads = 1;

struct Outcome {
  bool pass = false;
  std::string detail;
};

// C1: exact Poisson tails converge to ell(2); the solver reproduces it.
Outcome criterion1() {
  Outcome out;
  std::string detail;
  bool ok = true;
  for (long N : {50L, 100L, 200L, 400L}) {
    double v = -oracles::poisson_log_tail(static_cast<double>(N), 2 * N) /
               static_cast<double>(N);
    double bound = 2.0 * std::log(static_cast<double>(N)) / static_cast<double>(N) + 0.01;
    bool here = std::abs(v - kEll2) <= bound;
    ok = ok && here;
    detail += "N=" + std::to_string(N) + " tail=" + std::to_string(v) + " ";
  }
  auto model = poisson_model(1.0, 100);
  auto hit = hitting_exponent(model, Vec::Constant(1, 2.0), 1.0);
  bool solver_ok = std::abs(hit.J_star - kEll2) <= 1e-6;
  ok = ok && solver_ok;
  out.pass = ok;
  out.detail = detail + "J*=" + std::to_string(hit.J_star) +
               " (ell(2)=" + std::to_string(kEll2) + ")";
  return out;
}

// C2: action of the fluid limit vanishes under grid refinement at order >= 1.9.
Outcome criterion2() {
  CalciumParams p;
  auto model = calcium_model(p);
  std::vector<double> logh, logJ, vals;
  for (long n : {512L, 1024L, 2048L}) {
    auto det = deterministic_limit(model, 10.0, n);
    auto res = action(det, model.network);
    if (res.total.is_inf) return {false, "action infinite on the fluid limit"};
    vals.push_back(res.total.value);
    logh.push_back(std::log(10.0 / static_cast<double>(n - 1)));
    logJ.push_back(std::log(res.total.value));
  }
  double order = oracles::lsq_slope(logh, logJ);
  bool ok = order >= 1.9 && vals.back() <= 1e-6 && vals[0] > vals[1] &&
            vals[1] > vals[2];
  char buf[160];
  std::snprintf(buf, sizeof(buf), "J(512)=%.3e J(1024)=%.3e J(2048)=%.3e order=%.2f",
                vals[0], vals[1], vals[2], order);
  return {ok, buf};
}

// C3: closed-form z1dot matches the dual-Newton minimizer to 1e-10.
Outcome criterion3() {
  ReactionNetwork net;
  net.d = 1;
  net.M = 2;
  net.xi = {Eigen::VectorXi::Constant(1, -1), Eigen::VectorXi::Constant(1, +1)};
  Philox rng(12321, 0);
  double worst_z = 0, worst_L = 0;
  for (int k = 0; k < 1000; ++k) {
    double xd = -5.0 + 10.0 * rng.uniform();
    double l1 = 0.1 + 9.9 * rng.uniform();
    double l2 = 0.1 + 9.9 * rng.uniform();
    Vec rates(2);
    rates << l1, l2;
    auto dual = contracted_lagrangian_rates(net.xi, rates, Vec::Constant(1, xd));
    if (dual.value.is_inf) return {false, "dual solver reported infeasible"};
    double q1 = z1dot_quadratic(xd, l1, l2);
    double lhat = ell(q1 / l1) * l1 + ell((xd + q1) / l2) * l2;
    worst_z = std::max(worst_z, std::abs(dual.zdot[0] - q1));
    worst_L = std::max(worst_L, std::abs(dual.value.value - lhat));
  }
  char buf[120];
  std::snprintf(buf, sizeof(buf), "max|dz1|=%.2e max|dL|=%.2e over 1000 states",
                worst_z, worst_L);
  return {worst_z <= 1e-10 && worst_L <= 1e-10, buf};
}

// C4: analytic first and second derivatives match central differences.
Outcome criterion4() {
  CalciumParams p;
  Philox rng(777, 0);
  auto lhat = [&p](double xd, double x, double u1) {
    double l1 = p.alpha_close * x;
    double l2 = p.alpha_open * u1 * (1.0 - x);
    double q1 = z1dot_quadratic(xd, l1, l2);
    return ell(q1 / l1) * l1 + ell((xd + q1) / l2) * l2;
  };
  auto theta = [&p](double xd, double x, const Vec& u) {
    return calcium_lagrangian_derivatives(xd, x, u, p).dL_dxdot;
  };
  const double h = 1e-5;
  double worst = 0;
  auto rel = [](double a, double f) {
    return std::abs(a - f) / std::max(1.0, std::abs(f));
  };
  for (int k = 0; k < 1000; ++k) {
    double x = 0.15 + 0.7 * rng.uniform();
    Vec u(2);
    u << 0.3 + 1.7 * rng.uniform(), 1.0 + 4.0 * rng.uniform();
    double xd = -2.0 + 4.0 * rng.uniform();
    auto D = calcium_lagrangian_derivatives(xd, x, u, p);

    worst = std::max(worst, rel(D.dL_dxdot,
                                (lhat(xd + h, x, u[0]) - lhat(xd - h, x, u[0])) / (2 * h)));
    worst = std::max(worst, rel(D.dL_dx,
                                (lhat(xd, x + h, u[0]) - lhat(xd, x - h, u[0])) / (2 * h)));
    worst = std::max(worst, rel(D.dL_du[0],
                                (lhat(xd, x, u[0] + h) - lhat(xd, x, u[0] - h)) / (2 * h)));
    worst = std::max(worst, rel(D.d2L_dxdot2,
                                (theta(xd + h, x, u) - theta(xd - h, x, u)) / (2 * h)));
    worst = std::max(worst, rel(D.d2L_dxdot_dx,
                                (theta(xd, x + h, u) - theta(xd, x - h, u)) / (2 * h)));
    Vec up = u, um = u;
    up[0] += h;
    um[0] -= h;
    worst = std::max(worst, rel(D.d2L_dxdot_du[0],
                                (theta(xd, x, up) - theta(xd, x, um)) / (2 * h)));
    double z1p = z1dot_quadratic(xd + h, p.alpha_close * x, p.alpha_open * u[0] * (1 - x));
    double z1m = z1dot_quadratic(xd - h, p.alpha_close * x, p.alpha_open * u[0] * (1 - x));
    worst = std::max(worst, rel(D.dz1_dxdot, (z1p - z1m) / (2 * h)));
  }
  char buf[100];
  std::snprintf(buf, sizeof(buf), "max relative error %.2e over 1000 states", worst);
  return {worst <= 1e-6, buf};
}

// C5: shooting agrees with direct minimization of the discretized action.
Outcome criterion5() {
  CalciumParams p;
  p.T = 5.0;
  auto base = calcium_model(p);
  auto fp = fixed_point(base, Vec::Constant(1, 0.7), base.u0);
  const double x_hat = fp.x[0] + 0.15;

  CalciumParams ps = p;
  ps.x0 = fp.x[0];
  ps.u1_0 = fp.u[0];
  auto model = calcium_model(ps);
  model.u0 = fp.u;

  ShootingProblem prob;
  prob.model = &model;
  prob.form = BvpForm::Contracted;
  prob.T = p.T;
  prob.target = Vec::Constant(1, x_hat);
  prob.derivs = make_calcium_derivs(ps);
  prob.nodes = 2049;
  auto traj = solve_bvp(prob);

  double eta_T = traj.terminal_eta.lpNorm<Eigen::Infinity>();
  double el_res = el_residual_supnorm(traj, model, prob.derivs);

  auto lhat = [&ps](double xd, double x, const Vec& u) {
    double l1 = ps.alpha_close * x;
    double l2 = ps.alpha_open * u[0] * (1.0 - x);
    double q1 = z1dot_quadratic(xd, l1, l2);
    return ell(q1 / l1) * l1 + ell((xd + q1) / l2) * l2;
  };
  const int n_coll = 128;
  auto coll = oracles::minimize_discrete_action(model, lhat, p.T, fp.x[0], x_hat, n_coll);

  // the shooting path evaluated in the same 128-node discretized functional:
  // comparing inside one discretization cancels its O(dt^2) quadrature bias
  Vec xs(n_coll);
  for (int i = 0; i < n_coll; ++i) {
    double t = p.T * static_cast<double>(i) / static_cast<double>(n_coll - 1);
    double pos = t / traj.path.dt();
    long j = std::min<long>(static_cast<long>(pos), traj.path.nodes() - 2);
    double th = pos - static_cast<double>(j);
    xs[i] = (1.0 - th) * traj.path.X(j, 0) + th * traj.path.X(j + 1, 0);
  }
  double J_shoot_128 = oracles::discrete_contracted_action(model, lhat, p.T, xs);

  double rel = std::abs(J_shoot_128 - coll.action) / std::max(coll.action, 1e-300);
  bool minimal = coll.action <= J_shoot_128 + 1e-6;  // oracle cannot beat the EL path
  bool ok = rel <= 1e-3 && minimal && el_res <= 1e-4 && eta_T <= 1e-8;
  char buf[240];
  std::snprintf(buf, sizeof(buf),
                "J_shoot=%.6f J_shoot@128=%.6f J_colloc=%.6f rel=%.2e el_res=%.2e "
                "eta(T)=%.2e (colloc iters %d grad %.1e)",
                traj.action, J_shoot_128, coll.action, rel, el_res, eta_T,
                coll.iterations, coll.grad_norm);
  return {ok, buf};
}

// C6: Monte Carlo exponents approach J* (slope within 25%).
Outcome criterion6() {
  CalciumParams p;
  p.T = 2.5;
  auto base = calcium_model(p);
  auto fp = fixed_point(base, Vec::Constant(1, 0.7), base.u0);
  const double snap = 0.05;  // representable at N = 20, 40, 80
  const double x0 = std::round(fp.x[0] / snap) * snap;

  CalciumParams ps = p;
  ps.x0 = x0;
  ps.u1_0 = fp.u[0];
  auto model = calcium_model(ps);
  model.u0 = fp.u;

  // choose the target whose exponent is closest to 0.08 within [0.02, 0.1];
  // offsets stay below the x = 1 trapping boundary where the opening rate
  // vanishes
  double best_target = -1, J_star = -1;
  std::string scan;
  for (double off : {0.10, 0.15, 0.20}) {
    double cand = x0 + off;
    ShootingProblem prob;
    prob.model = &model;
    prob.form = BvpForm::Contracted;
    prob.T = p.T;
    prob.target = Vec::Constant(1, cand);
    prob.derivs = make_calcium_derivs(ps);
    prob.nodes = 1025;
    double J = solve_bvp(prob).action;
    scan += "off=" + std::to_string(off).substr(0, 4) + ":J=" + std::to_string(J).substr(0, 7) + " ";
    if (J >= 0.02 && J <= 0.1 &&
        (best_target < 0 || std::abs(J - 0.08) < std::abs(J_star - 0.08))) {
      best_target = cand;
      J_star = J;
    }
  }
  if (best_target < 0) return {false, "no target with J* in [0.02, 0.1]; " + scan};

  const double threshold = best_target - 1e-12;
  std::vector<double> Ns, minus_logP;
  std::string rows;
  for (long N : {20L, 40L, 80L}) {
    CalciumParams pN = ps;
    pN.N = N;
    auto mN = calcium_model(pN);
    mN.u0 = fp.u;
    EnsembleOptions eo;
    eo.count = 1000000;
    eo.master_seed = 8675309 + static_cast<std::uint64_t>(N);
    eo.threads = g_threads;
    eo.dense = false;
    auto rep = simulate_ensemble(mN, p.T, eo, [threshold](const JumpPath& jp) {
      return jp.terminal.x[0] >= threshold;
    });
    if (rep.hits == 0) return {false, "no hits at N=" + std::to_string(N)};
    Ns.push_back(static_cast<double>(N));
    minus_logP.push_back(-std::log(rep.p_hat));
    rows += "N=" + std::to_string(N) + ":hits=" + std::to_string(rep.hits) + " ";
  }
  double slope = oracles::lsq_slope(Ns, minus_logP);
  double rel = std::abs(slope - J_star) / J_star;
  bool ok = rel <= 0.25;
  char buf[240];
  std::snprintf(buf, sizeof(buf), "target=%.2f J*=%.4f slope=%.4f rel=%.1f%% %s",
                best_target, J_star, slope, 100 * rel, rows.c_str());
  return {ok, buf};
}

// C7: ensemble-mean error against the fluid limit scales like 1/sqrt(N).
Outcome criterion7() {
  CalciumParams base;
  std::vector<double> logN, logE;
  std::string rows;
  for (long N : {100L, 1000L, 10000L}) {
    CalciumParams p = base;
    p.N = N;
    auto model = calcium_model(p);
    EnsembleOptions eo;
    eo.count = 200;
    eo.master_seed = 4242;
    eo.threads = g_threads;
    eo.dense = true;
    auto rep = simulate_ensemble(model, 5.0, eo, {});
    auto det = deterministic_limit(model, 5.0, 513);
    double sup = 0;
    for (long i = 0; i < det.nodes(); ++i)
      sup = std::max(sup, std::abs(rep.mean_x(i, 0) - det.X(i, 0)));
    logN.push_back(std::log(static_cast<double>(N)));
    logE.push_back(std::log(sup));
    rows += "N=" + std::to_string(N) + ":err=" + std::to_string(sup).substr(0, 8) + " ";
  }
  double slope = oracles::lsq_slope(logN, logE);
  bool ok = std::abs(slope + 0.5) <= 0.15;
  char buf[200];
  std::snprintf(buf, sizeof(buf), "slope=%.3f (want -0.5 +/- 0.15) %s", slope,
                rows.c_str());
  return {ok, buf};
}

// C8: time-rescaling round trip is the identity on admissible paths.
Outcome criterion8() {
  CalciumParams p;
  auto model = calcium_model(p);
  Philox rng(1313, 7);
  double worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    double a1 = 0.4 * (rng.uniform() - 0.5);
    double b1 = 0.4 * (rng.uniform() - 0.5);
    double a2 = 0.4 * (rng.uniform() - 0.5);
    double b2 = 0.4 * (rng.uniform() - 0.5);
    double ph = 6.28 * rng.uniform();
    auto path = oracles::build_flux_path(model, 3.0, 513, [&](int alpha, double t) {
      double w1 = std::sin(2.0 * M_PI * t / 3.0);
      double w2 = std::sin(4.0 * M_PI * t / 3.0 + ph);
      return alpha == 0 ? a1 * w1 + b1 * w2 : a2 * w1 + b2 * w2;
    });
    auto w = time_rescale_map(path, model.network);
    auto back = inverse_time_rescale(w, model, path.nodes());
    double sup = (back.Z - path.Z).lpNorm<Eigen::Infinity>();
    sup = std::max(sup, (back.X - path.X).lpNorm<Eigen::Infinity>());
    sup = std::max(sup, (back.U - path.U).lpNorm<Eigen::Infinity>());
    worst = std::max(worst, sup);
  }
  char buf[100];
  std::snprintf(buf, sizeof(buf), "max round-trip sup error %.2e over 20 paths", worst);
  return {worst <= 1e-6, buf};
}

// C9: conservation, trapping, linear constraint, seed determinism.
Outcome criterion9() {
  CalciumParams p;
  p.N = 50;
  p.x0 = 0.6;  // 30/50 on the grid
  auto model = calcium_model(p);

  double worst_cons = 0, worst_lin = 0;
  bool trapped = true;
  SimulateOptions o;
  o.dense_step = 0.05;
  o.record_events = false;
  for (int s = 0; s < 1000; ++s) {
    auto jp = simulate_pdmp(model, 2.0, 5551, o, s);
    trapped = trapped && jp.X.minCoeff() >= 0.0 && jp.X.maxCoeff() <= 1.0;
    for (long i = 0; i < jp.X.rows(); ++i) {
      worst_cons = std::max(worst_cons, std::abs(p.gamma * jp.U(i, 0) + jp.U(i, 1) -
                                                 p.c_total));
      double lin = jp.X(i, 0) - jp.X(0, 0) - (jp.Z(i, 1) - jp.Z(i, 0));
      worst_lin = std::max(worst_lin, std::abs(lin));
    }
  }

  auto a = simulate_pdmp(model, 2.0, 777);
  auto b = simulate_pdmp(model, 2.0, 777);
  bool deterministic = a.events.size() == b.events.size();
  if (deterministic)
    for (size_t i = 0; i < a.events.size(); ++i)
      deterministic = deterministic && a.events[i].t == b.events[i].t &&
                      a.events[i].reaction == b.events[i].reaction;
  deterministic = deterministic && (a.U - b.U).lpNorm<Eigen::Infinity>() == 0.0;

  bool ok = worst_cons <= 1e-7 && trapped && worst_lin <= 1e-10 && deterministic;
  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "conservation=%.2e linear=%.2e trapped=%s deterministic=%s",
                worst_cons, worst_lin, trapped ? "yes" : "no",
                deterministic ? "yes" : "no");
  return {ok, buf};
}

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  g_threads = std::max(1u, std::thread::hardware_concurrency());
  for (int i = 1; i < argc; ++i) {
    if (!std::strcmp(argv[i], "--criterion") && i + 1 < argc) only = std::atoi(argv[++i]);
    if (!std::strcmp(argv[i], "--threads") && i + 1 < argc)
      g_threads = std::max(1, std::atoi(argv[++i]));
  }

  using Fn = Outcome (*)();
  struct Entry {
    int id;
    const char* name;
    Fn fn;
  };
  const Entry entries[] = {
      {1, "Poisson LDP exponent", criterion1},
      {2, "zero-action deterministic flow", criterion2},
      {3, "closed-form inner minimizer vs dual Newton", criterion3},
      {4, "analytic Lagrangian derivatives vs finite differences", criterion4},
      {5, "shooting vs collocation oracle", criterion5},
      {6, "Monte Carlo exponent consistency", criterion6},
      {7, "Kurtz 1/sqrt(N) convergence", criterion7},
      {8, "time-rescaling round trip", criterion8},
      {9, "structural invariants", criterion9},
  };

  int failures = 0;
  for (const auto& e : entries) {
    if (only != 0 && e.id != only) continue;
    auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = e.fn();
    } catch (const std::exception& ex) {
      out.pass = false;
      out.detail = std::string("exception: ") + ex.what();
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("[%s] C%d %s: %s (%.1fs)\n", out.pass ? "PASS" : "FAIL", e.id,
                e.name, out.detail.c_str(), secs);
    std::fflush(stdout);
    if (!out.pass) ++failures;
  }
  return failures;
}
