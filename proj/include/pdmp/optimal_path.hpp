#ifndef PDMP_OPTIMAL_PATH_HPP
#define PDMP_OPTIMAL_PATH_HPP

#include <atomic>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "pdmp/common.hpp"
#include "pdmp/ldp.hpp"
#include "pdmp/model.hpp"
#include "pdmp/path.hpp"
#include "pdmp/rk45.hpp"
#include "pdmp/simulate.hpp"

namespace pdmp {

// Everything the contracted Euler-Lagrange system needs at one state.
struct ContractedDerivs {
  double value = 0.0;
  Vec zdot;        // inner minimizer
  Vec grad_xdot;   // dLhat/dxdot (= dual variable theta)
  Vec grad_x;      // dLhat/dx
  Vec grad_u;      // dLhat/du
  Mat hess_xdot;   // d2Lhat/dxdot2
  Mat hess_xdot_x; // d2Lhat/dxdot dx
  Mat hess_xdot_u; // d2Lhat/dxdot du
};

using ContractedDerivsFn =
    std::function<ContractedDerivs(const Vec& xdot, const Vec& x, const Vec& u)>;

// Exact derivatives of Lhat through the dual solution: the dual variable is
// the gradient in xdot, the moment-map Jacobian H = sum zdot_a xi_a xi_a^T
// gives hess = H^{-1}, and the mixed partials follow from differentiating the
// moment equations in (x, u).
inline ContractedDerivs contracted_derivs_dual(const PDMPModel& model,
                                               const Vec& xdot, const Vec& x,
                                               const Vec& u) {
  const auto& net = model.network;
  const int d = net.d, m = model.m;
  auto cr = contracted_lagrangian(net, xdot, x, u);
  if (cr.value.is_inf)
    throw SingularityError("contracted Lagrangian infinite at state", -1);

  ContractedDerivs D;
  D.value = cr.value.value;
  D.zdot = cr.zdot;
  D.grad_xdot = cr.theta;
  D.grad_x = Vec::Zero(d);
  D.grad_u = Vec::Zero(m);

  Mat H = Mat::Zero(d, d);
  Mat dGdx = Mat::Zero(d, d), dGdu = Mat::Zero(d, m);
  Vec gx(d), gu(m);
  for (int a = 0; a < net.M; ++a) {
    double lam = net.lambda[a](x, u);
    if (lam <= kRateFloor) continue;
    double q = cr.zdot[a];
    Vec xa = net.xi[a].cast<double>();
    H += q * xa * xa.transpose();
    double fac = 1.0 - q / lam;
    rate_grad_x(net, a, x, u, gx);
    D.grad_x += fac * gx;
    dGdx += (q / lam) * xa * gx.transpose();
    if (m > 0) {
      rate_grad_u(net, a, x, u, gu);
      D.grad_u += fac * gu;
      dGdu += (q / lam) * xa * gu.transpose();
    }
  }
  Eigen::PartialPivLU<Mat> lu(H);
  Mat Hinv = lu.inverse();
  if (!Hinv.allFinite())
    throw SingularityError("singular Hessian of contracted Lagrangian", -1);
  D.hess_xdot = Hinv;
  D.hess_xdot_x = -Hinv * dGdx;
  D.hess_xdot_u = -Hinv * dGdu;
  return D;
}

// Central finite differences of the contracted Lagrangian value; the slow,
// assumption-free route kept alongside the dual one.
inline ContractedDerivs contracted_derivs_fd(const PDMPModel& model,
                                             const Vec& xdot, const Vec& x,
                                             const Vec& u, double h = 1e-5) {
  const auto& net = model.network;
  const int d = net.d, m = model.m;
  auto value_at = [&](const Vec& xd, const Vec& xx, const Vec& uu) {
    auto r = contracted_lagrangian(net, xd, xx, uu);
    if (r.value.is_inf)
      throw SingularityError("contracted Lagrangian infinite near state", -1);
    return r.value.value;
  };
  auto grad_xdot_at = [&](const Vec& xd, const Vec& xx, const Vec& uu) {
    return contracted_lagrangian(net, xd, xx, uu).theta;
  };

  ContractedDerivs D;
  auto cr = contracted_lagrangian(net, xdot, x, u);
  if (cr.value.is_inf)
    throw SingularityError("contracted Lagrangian infinite at state", -1);
  D.value = cr.value.value;
  D.zdot = cr.zdot;
  D.grad_xdot.resize(d);
  D.grad_x.resize(d);
  D.grad_u.resize(m);
  D.hess_xdot.resize(d, d);
  D.hess_xdot_x.resize(d, d);
  D.hess_xdot_u.resize(d, m);

  Vec e;
  for (int i = 0; i < d; ++i) {
    e = Vec::Zero(d); e[i] = h;
    D.grad_xdot[i] = (value_at(xdot + e, x, u) - value_at(xdot - e, x, u)) / (2 * h);
    D.hess_xdot.col(i) =
        (grad_xdot_at(xdot + e, x, u) - grad_xdot_at(xdot - e, x, u)) / (2 * h);
  }
  for (int i = 0; i < d; ++i) {
    e = Vec::Zero(d); e[i] = h;
    D.grad_x[i] = (value_at(xdot, x + e, u) - value_at(xdot, x - e, u)) / (2 * h);
    D.hess_xdot_x.col(i) =
        (grad_xdot_at(xdot, x + e, u) - grad_xdot_at(xdot, x - e, u)) / (2 * h);
  }
  for (int j = 0; j < m; ++j) {
    e = Vec::Zero(m); e[j] = h;
    D.grad_u[j] = (value_at(xdot, x, u + e) - value_at(xdot, x, u - e)) / (2 * h);
    D.hess_xdot_u.col(j) =
        (grad_xdot_at(xdot, x, u + e) - grad_xdot_at(xdot, x, u - e)) / (2 * h);
  }
  return D;
}

inline ContractedDerivsFn make_dual_derivs(const PDMPModel& model) {
  return [&model](const Vec& xdot, const Vec& x, const Vec& u) {
    return contracted_derivs_dual(model, xdot, x, u);
  };
}

// State of either Euler-Lagrange formulation at one time.
struct ELState {
  double t = 0.0;
  Vec x, xdot;   // contracted form
  Vec u, eta;
  Vec z, zdot;   // flux form
};

struct FluxElRates {
  Vec zdot;   // dz/dt
  Vec zddot;  // d(zdot)/dt
  Vec udot;
  Vec etadot;
};

// Flux-space Euler-Lagrange right-hand side.  Uses the variational sign
// convention (coefficient-of-perturbation form); validated against the
// finite-difference gradient of the discretized constrained functional in
// the test suite.
inline FluxElRates assemble_flux_el_rhs(const ELState& state,
                                        const ReactionNetwork& net,
                                        const PDMPModel& model,
                                        bool degenerate_fallback = true) {
  const int d = net.d, m = model.m, M = net.M;
  Vec x = model.x0;
  for (int a = 0; a < M; ++a) x += state.z[a] * net.xi[a].cast<double>();

  Vec rates(M);
  for (int a = 0; a < M; ++a) {
    rates[a] = net.lambda[a](x, state.u);
    if (rates[a] <= kRateFloor)
      throw SingularityError("rate at floor in flux-form assembly", a);
  }

  Vec zdot = state.zdot;
  double floor_flux = kRateFloor;
  bool degenerate = (zdot.array() <= floor_flux).any();
  if (degenerate) {
    if (!degenerate_fallback)
      throw SingularityError("flux at floor in flux-form assembly", -1);
    // switch to the contracted inner minimizer for this step: it realizes
    // the same xdot with strictly positive fluxes whenever possible
    Vec xdot = Vec::Zero(d);
    for (int a = 0; a < M; ++a) xdot += zdot[a] * net.xi[a].cast<double>();
    auto cr = contracted_lagrangian_rates(net.xi, rates, xdot);
    if (cr.value.is_inf || (cr.zdot.array() <= floor_flux).any())
      throw SingularityError("flux at floor in flux-form assembly", -1);
    zdot = cr.zdot;
  }

  Vec xdot = Vec::Zero(d);
  for (int a = 0; a < M; ++a) xdot += zdot[a] * net.xi[a].cast<double>();

  Vec A(m);
  model.eval_drift(state.u, x, A);
  Mat Jx, Ju;
  if (m > 0) {
    drift_jac_x(model, state.u, x, Jx);
    drift_jac_u(model, state.u, x, Ju);
  }

  Vec dL_dx = Vec::Zero(d), dL_du = Vec::Zero(m);
  Mat grad_x(M, d), grad_u(M, m);
  Vec gx(d), gu(m);
  for (int a = 0; a < M; ++a) {
    rate_grad_x(net, a, x, state.u, gx);
    grad_x.row(a) = gx.transpose();
    double fac = 1.0 - zdot[a] / rates[a];
    dL_dx += fac * gx;
    if (m > 0) {
      rate_grad_u(net, a, x, state.u, gu);
      grad_u.row(a) = gu.transpose();
      dL_du += fac * gu;
    }
  }

  FluxElRates out;
  out.zdot = zdot;
  out.udot = A;
  out.zddot.resize(M);
  Vec force = dL_dx;  // dL/dx_i + sum_k eta_k dA_k/dx_i
  if (m > 0) force += Jx.transpose() * state.eta;
  for (int a = 0; a < M; ++a) {
    double dlam_dt = grad_x.row(a).dot(xdot);
    if (m > 0) dlam_dt += grad_u.row(a).dot(A);
    double bracket = dlam_dt / rates[a] + net.xi[a].cast<double>().dot(force);
    out.zddot[a] = zdot[a] * bracket;
  }
  out.etadot = -dL_du;
  if (m > 0) out.etadot -= Ju.transpose() * state.eta;
  return out;
}

struct ContractedElRates {
  Vec xdot;
  Vec xddot;
  Vec udot;
  Vec etadot;
};

// Contracted-form Euler-Lagrange right-hand side: solve the linear system in
// xddot coming from expanding d/dt dLhat/dxdot.
inline ContractedElRates assemble_contracted_el_rhs(const ELState& state,
                                                    const PDMPModel& model,
                                                    const ContractedDerivsFn& derivs) {
  const int m = model.m;
  ContractedDerivs D = derivs(state.xdot, state.x, state.u);

  Vec A(m);
  model.eval_drift(state.u, state.x, A);
  Mat Jx, Ju;
  if (m > 0) {
    drift_jac_x(model, state.u, state.x, Jx);
    drift_jac_u(model, state.u, state.x, Ju);
  }

  Vec rhs = D.grad_x - D.hess_xdot_x * state.xdot;
  if (m > 0) rhs += Jx.transpose() * state.eta - D.hess_xdot_u * A;

  ContractedElRates out;
  out.xdot = state.xdot;
  out.udot = A;
  Eigen::PartialPivLU<Mat> lu(D.hess_xdot);
  out.xddot = lu.solve(rhs);
  if (!out.xddot.allFinite())
    throw SingularityError("singular contracted Hessian", -1);
  out.etadot = -D.grad_u;
  if (m > 0) out.etadot -= Ju.transpose() * state.eta;
  return out;
}

enum class BvpForm { Flux, Contracted };

struct ShootingProblem {
  const PDMPModel* model = nullptr;
  BvpForm form = BvpForm::Contracted;
  double T = 1.0;
  Vec target;  // z* (flux form) or x_hat (contracted form)
  ContractedDerivsFn derivs;  // empty: dual-based generic provider
  double rtol = 1e-10;
  double atol = 1e-12;
  double newton_tol = 1e-9;
  int max_newton = 60;
  long nodes = 1025;  // output / quadrature grid
  int segments = 0;   // multiple-shooting segments; 0 = one per unit time
  int threads = 1;    // multi-starts run concurrently

  int unknowns() const {
    return form == BvpForm::Flux ? model->network.M + model->m
                                 : model->network.d + model->m;
  }
  int state_dim() const {
    return form == BvpForm::Flux
               ? 2 * model->network.M + 2 * model->m
               : 2 * model->network.d + 2 * model->m;
  }
  int segment_count() const {
    if (segments > 0) return segments;
    return std::max(1, std::min(24, static_cast<int>(std::ceil(T / 0.5))));
  }
};

namespace detail {

struct FluxElOde {
  const PDMPModel* model;
  int M, m;
  mutable ELState s;
  void operator()(double t, const Vec& y, Vec& dy) const {
    s.t = t;
    s.z = y.head(M);
    s.zdot = y.segment(M, M).cwiseMax(0.0);
    s.u = y.segment(2 * M, m);
    s.eta = y.tail(m);
    auto r = assemble_flux_el_rhs(s, model->network, *model);
    dy.head(M) = r.zdot;
    dy.segment(M, M) = r.zddot;
    dy.segment(2 * M, m) = r.udot;
    dy.tail(m) = r.etadot;
  }
};

struct ContractedElOde {
  const PDMPModel* model;
  const ContractedDerivsFn* derivs;
  int d, m;
  mutable ELState s;
  void operator()(double t, const Vec& y, Vec& dy) const {
    s.t = t;
    s.x = y.head(d);
    s.xdot = y.segment(d, d);
    s.u = y.segment(2 * d, m);
    s.eta = y.tail(m);
    auto r = assemble_contracted_el_rhs(s, *model, *derivs);
    dy.head(d) = r.xdot;
    dy.segment(d, d) = r.xddot;
    dy.segment(2 * d, m) = r.udot;
    dy.tail(m) = r.etadot;
  }
};

}  // namespace detail

struct ShootResult {
  bool ok = false;
  Vec residual;
  double escape_time = 0.0;
  std::string what;
};

// Integrate the EL system from a guess of the unknown initial data and
// report the terminal constraint residual.
inline ShootResult shoot(const ShootingProblem& prob, const Vec& guess,
                         Mat* trace = nullptr) {
  const auto& model = *prob.model;
  const int d = model.network.d, m = model.m, M = model.network.M;
  ShootResult out;
  if (!guess.allFinite()) {
    out.what = "non-finite guess";
    return out;
  }

  ContractedDerivsFn local;
  const ContractedDerivsFn* derivs = &prob.derivs;
  if (prob.form == BvpForm::Contracted && !prob.derivs) {
    local = make_dual_derivs(model);
    derivs = &local;
  }

  const long n = prob.nodes;
  Vec y0;
  int dim;
  if (prob.form == BvpForm::Flux) {
    dim = 2 * M + 2 * m;
    y0.setZero(dim);
    y0.segment(M, M) = guess.head(M);
    y0.segment(2 * M, m) = model.u0;
    y0.tail(m) = guess.tail(m);
  } else {
    dim = 2 * d + 2 * m;
    y0.setZero(dim);
    y0.head(d) = model.x0;
    y0.segment(d, d) = guess.head(d);
    y0.segment(2 * d, m) = model.u0;
    y0.tail(m) = guess.tail(m);
  }
  if (trace) trace->resize(n, dim);

  double t_reached = 0.0;
  try {
    long next = 0;
    Vec yd(dim);
    auto sample = [&](const auto& s) {
      t_reached = s.t();
      if (!trace) return;
      while (next < n) {
        double tg = prob.T * static_cast<double>(next) / static_cast<double>(n - 1);
        if (tg > s.t() + 1e-14 * std::max(1.0, prob.T)) break;
        s.dense_at(std::min(tg, s.t()), yd);
        trace->row(next) = yd.transpose();
        ++next;
      }
    };
    Vec y_final = y0;
    if (trace) { trace->row(0) = y0.transpose(); next = 1; }
    if (prob.form == BvpForm::Flux) {
      detail::FluxElOde ode{&model, M, m, {}};
      integrate_observed(ode, 0.0, y0, prob.T, prob.rtol, prob.atol,
                         [&](const auto& s) { sample(s); y_final = s.y(); });
      out.residual.resize(M + m);
      out.residual.head(M) = y_final.head(M) - prob.target;
      out.residual.tail(m) = y_final.tail(m);
    } else {
      detail::ContractedElOde ode{&model, derivs, d, m, {}};
      integrate_observed(ode, 0.0, y0, prob.T, prob.rtol, prob.atol,
                         [&](const auto& s) { sample(s); y_final = s.y(); });
      out.residual.resize(d + m);
      out.residual.head(d) = y_final.head(d) - prob.target;
      out.residual.tail(m) = y_final.tail(m);
    }
    if (trace && next == n - 1) { trace->row(n - 1) = y_final.transpose(); ++next; }
    if (trace && next != n) throw SolverError("trace fill incomplete", double(next));
    out.ok = out.residual.allFinite();
  } catch (const Error& e) {
    out.ok = false;
    out.escape_time = t_reached;
    out.what = e.what();
  }
  return out;
}

struct StartLog {
  int index = 0;
  bool converged = false;
  int iterations = 0;
  double residual = 0.0;
  double action = 0.0;
  std::string note;
};

struct OptimalTrajectory {
  SmoothPath path;   // z, x, u on the output grid
  Mat eta;           // nodes x m
  Mat xdot;          // nodes x d
  Mat zdot;          // nodes x M
  double action = 0.0;
  double residual_norm = 0.0;
  Vec terminal_eta;
  std::vector<StartLog> log;
};

namespace detail {

inline double simpson(const Vec& f, double h) {
  const long n = f.size();
  if (n < 3 || n % 2 == 0) {  // fall back to trapezoid on even counts
    double s = 0;
    for (long i = 0; i + 1 < n; ++i) s += 0.5 * h * (f[i] + f[i + 1]);
    return s;
  }
  double s = f[0] + f[n - 1];
  for (long i = 1; i + 1 < n; i += 2) s += 4.0 * f[i];
  for (long i = 2; i + 1 < n; i += 2) s += 2.0 * f[i];
  return s * h / 3.0;
}

// Turn an integrated EL trace into an OptimalTrajectory with a consistent
// (z, x, u) path and a Simpson-quadrature action.
inline OptimalTrajectory build_trajectory(const ShootingProblem& prob,
                                          const Mat& trace) {
  const auto& model = *prob.model;
  const auto& net = model.network;
  const int d = net.d, m = model.m, M = net.M;
  const long n = trace.rows();
  const double h = prob.T / static_cast<double>(n - 1);

  OptimalTrajectory out;
  out.path.T = prob.T;
  out.path.Z.resize(n, M);
  out.path.X.resize(n, d);
  out.path.U.resize(n, m);
  out.eta.resize(n, m);
  out.xdot.resize(n, d);
  out.zdot.resize(n, M);
  Vec L(n);

  if (prob.form == BvpForm::Flux) {
    Vec rates(M), x(d), u(m), q(M);
    for (long i = 0; i < n; ++i) {
      out.path.Z.row(i) = trace.row(i).head(M);
      out.zdot.row(i) = trace.row(i).segment(M, M).cwiseMax(0.0);
      out.path.U.row(i) = trace.row(i).segment(2 * M, m);
      out.eta.row(i) = trace.row(i).tail(m);
      x = model.x0;
      for (int a = 0; a < M; ++a) x += out.path.Z(i, a) * net.xi[a].cast<double>();
      out.path.X.row(i) = x.transpose();
      u = out.path.U.row(i).transpose();
      for (int a = 0; a < M; ++a) rates[a] = net.lambda[a](x, u);
      q = out.zdot.row(i).transpose();
      Vec xd = Vec::Zero(d);
      for (int a = 0; a < M; ++a) xd += q[a] * net.xi[a].cast<double>();
      out.xdot.row(i) = xd.transpose();
      auto lv = flux_lagrangian_rates(q, rates);
      if (lv.is_inf) throw SolverError("infinite Lagrangian on solved path", 0.0);
      L[i] = lv.value;
    }
  } else {
    ContractedDerivsFn local;
    const ContractedDerivsFn* derivs = &prob.derivs;
    if (!prob.derivs) { local = make_dual_derivs(model); derivs = &local; }
    Vec x(d), u(m), xd(d);
    for (long i = 0; i < n; ++i) {
      out.path.X.row(i) = trace.row(i).head(d);
      out.xdot.row(i) = trace.row(i).segment(d, d);
      out.path.U.row(i) = trace.row(i).segment(2 * d, m);
      out.eta.row(i) = trace.row(i).tail(m);
      x = out.path.X.row(i).transpose();
      u = out.path.U.row(i).transpose();
      xd = out.xdot.row(i).transpose();
      ContractedDerivs D = (*derivs)(xd, x, u);
      out.zdot.row(i) = D.zdot.transpose();
      L[i] = D.value;
    }
    // z by cumulative trapezoid of the inner minimizer, then a least-squares
    // shift so x = x0 + sum z_a xi_a holds exactly at every node
    Mat Xi(d, M);
    for (int a = 0; a < M; ++a) Xi.col(a) = net.xi[a].cast<double>();
    Mat XiPinv = Xi.transpose() * (Xi * Xi.transpose()).inverse();
    out.path.Z.row(0).setZero();
    for (long i = 1; i < n; ++i)
      out.path.Z.row(i) = out.path.Z.row(i - 1) +
                          0.5 * h * (out.zdot.row(i) + out.zdot.row(i - 1));
    for (long i = 0; i < n; ++i) {
      Vec defect = out.path.X.row(i).transpose() - model.x0 -
                   Xi * out.path.Z.row(i).transpose();
      out.path.Z.row(i) += (XiPinv * defect).transpose();
    }
  }

  out.action = simpson(L, h);
  out.terminal_eta = out.eta.row(n - 1).transpose();
  return out;
}

}  // namespace detail

// Default multi-start grid: velocities anchored at the deterministic drift
// (and at the ballistic ramp toward the target, which covers starts at a
// fixed point where the drift vanishes), times eta(0) in {0, +0.1, -0.1}.
inline std::vector<Vec> default_starts(const ShootingProblem& prob) {
  const auto& model = *prob.model;
  const auto& net = model.network;
  const int d = net.d, m = model.m, M = net.M;

  std::vector<Vec> anchors;
  if (prob.form == BvpForm::Flux) {
    Vec lam(M);
    for (int a = 0; a < M; ++a)
      lam[a] = std::max(net.lambda[a](model.x0, model.u0), 10 * kRateFloor);
    anchors.push_back(lam);
    Vec ballistic = prob.target / prob.T;
    if ((ballistic - lam).lpNorm<Eigen::Infinity>() > 1e-8)
      anchors.push_back(ballistic.cwiseMax(10 * kRateFloor));
  } else {
    Vec vd = Vec::Zero(d);
    for (int a = 0; a < M; ++a)
      vd += net.lambda[a](model.x0, model.u0) * net.xi[a].cast<double>();
    anchors.push_back(vd);
    Vec ballistic = (prob.target - model.x0) / prob.T;
    if ((ballistic - vd).lpNorm<Eigen::Infinity>() > 1e-8) anchors.push_back(ballistic);
  }

  std::vector<Vec> starts;
  const int nv = prob.form == BvpForm::Flux ? M : d;
  for (const Vec& anchor : anchors)
    for (double sc : {1.0, 0.5, 2.0})
      for (double ev : {0.0, 0.1, -0.1}) {
        Vec g(nv + m);
        g.head(nv) = sc * anchor;
        g.tail(m).setConstant(ev);
        starts.push_back(g);
      }
  return starts;
}

namespace detail {

// Multiple shooting: the unknown vector packs the free initial data
// (xdot(0), eta(0)) together with full states at interior junctions;
// residuals are continuity defects plus the terminal constraints.  Splitting
// the horizon keeps the exponential growth of the multiplier dynamics per
// segment small enough for Newton.
class MultipleShooting {
 public:
  explicit MultipleShooting(const ShootingProblem& prob)
      : prob_(&prob),
        K_(prob.segment_count()),
        D_(prob.state_dim()),
        head_(prob.unknowns()),
        d_(prob.model->network.d),
        m_(prob.model->m),
        M_(prob.model->network.M) {
    if (prob.form == BvpForm::Contracted && !prob.derivs) {
      local_ = make_dual_derivs(*prob.model);
      derivs_ = &local_;
    } else {
      derivs_ = &prob.derivs;
    }
  }

  int unknown_count() const { return head_ + (K_ - 1) * D_; }
  int segment_count() const { return K_; }

  Vec state_from_head(const Vec& w0) const {
    const auto& model = *prob_->model;
    Vec y = Vec::Zero(D_);
    if (prob_->form == BvpForm::Flux) {
      y.segment(M_, M_) = w0.head(M_);
      y.segment(2 * M_, m_) = model.u0;
      y.tail(m_) = w0.tail(m_);
    } else {
      y.head(d_) = model.x0;
      y.segment(d_, d_) = w0.head(d_);
      y.segment(2 * d_, m_) = model.u0;
      y.tail(m_) = w0.tail(m_);
    }
    return y;
  }

  bool integrate_segment(double t0, double t1, const Vec& y0, Vec& y1) const {
    try {
      if (prob_->form == BvpForm::Flux) {
        FluxElOde ode{prob_->model, M_, m_, {}};
        y1 = shifted_integrate(ode, t0, y0, t1);
      } else {
        ContractedElOde ode{prob_->model, derivs_, d_, m_, {}};
        y1 = shifted_integrate(ode, t0, y0, t1);
      }
      return y1.allFinite();
    } catch (const Error&) {
      return false;
    }
  }

  bool eval(const Vec& U, Vec& R) const {
    R.resize(unknown_count());
    Vec y = state_from_head(U.head(head_));
    Vec yend(D_);
    const double seg = prob_->T / static_cast<double>(K_);
    for (int k = 0; k < K_; ++k) {
      if (!integrate_segment(seg * k, seg * (k + 1), y, yend)) return false;
      if (k + 1 < K_) {
        Vec ynext = U.segment(head_ + k * D_, D_);
        R.segment(k * D_, D_) = yend - ynext;
        y = ynext;
      } else {
        int base = (K_ - 1) * D_;
        if (prob_->form == BvpForm::Flux)
          R.segment(base, M_) = yend.head(M_) - prob_->target;
        else
          R.segment(base, d_) = yend.head(d_) - prob_->target;
        R.segment(base + (head_ - m_), m_) = yend.tail(m_);
      }
    }
    return R.allFinite();
  }

  // sample all segments on the global uniform output grid
  bool assemble_trace(const Vec& U, Mat& trace) const {
    const long n = prob_->nodes;
    trace.resize(n, D_);
    const double T = prob_->T;
    const double seg = T / static_cast<double>(K_);
    Vec y = state_from_head(U.head(head_));
    long next = 0;
    Vec yd(D_);
    try {
      for (int k = 0; k < K_; ++k) {
        double t0 = seg * k, t1 = seg * (k + 1);
        Vec y_end = y;
        auto observer = [&](const auto& s) {
          while (next < n) {
            double tg = T * static_cast<double>(next) / static_cast<double>(n - 1);
            if (tg < t0 - 1e-14 * std::max(1.0, T)) { ++next; continue; }
            if (tg > s.t() + 1e-14 * std::max(1.0, T)) break;
            s.dense_at(std::min(tg, s.t()), yd);
            trace.row(next) = yd.transpose();
            ++next;
          }
          y_end = s.y();
        };
        if (next < n) {
          double tg = T * static_cast<double>(next) / static_cast<double>(n - 1);
          if (tg <= t0 + 1e-14 * std::max(1.0, T)) {
            trace.row(next) = y.transpose();
            ++next;
          }
        }
        if (prob_->form == BvpForm::Flux) {
          FluxElOde ode{prob_->model, M_, m_, {}};
          integrate_observed(ode, t0, y, t1, prob_->rtol, prob_->atol, observer);
        } else {
          ContractedElOde ode{prob_->model, derivs_, d_, m_, {}};
          integrate_observed(ode, t0, y, t1, prob_->rtol, prob_->atol, observer);
        }
        y = (k + 1 < K_) ? Vec(U.segment(head_ + k * D_, D_)) : y_end;
      }
      while (next < n) { trace.row(next) = y.transpose(); ++next; }
      return trace.allFinite();
    } catch (const Error&) {
      return false;
    }
  }

  // Continuation seed: deterministic flow blended linearly toward the
  // target, with the junction multipliers obtained by integrating the
  // adjoint equation backward from eta(T) = 0 along the seed path.  That
  // keeps every segment start near the stable manifold of the multiplier
  // dynamics, so the seeded segments integrate without blowing up.
  Vec seed_unknowns(const Vec& w0) const {
    const auto& model = *prob_->model;
    Vec U = Vec::Zero(unknown_count());
    U.head(head_) = w0;
    if (K_ == 1) return U;
    const int sub = 4;
    const long n = sub * K_ + 1;
    SmoothPath det = deterministic_limit(model, prob_->T, n);
    const long last = det.nodes() - 1;
    const double T = prob_->T;
    const double dt = T / static_cast<double>(n - 1);

    // seed (x, xdot, z, zdot, u) per fine node
    Mat xs(n, d_), xds(n, d_), zs(n, M_), zds(n, M_), us(n, m_);
    Vec gap_x, gap_z;
    if (prob_->form == BvpForm::Flux)
      gap_z = prob_->target - det.Z.row(last).transpose();
    else
      gap_x = prob_->target - det.X.row(last).transpose();
    for (long j = 0; j < n; ++j) {
      double frac = static_cast<double>(j) / static_cast<double>(n - 1);
      Vec xj = det.X.row(j).transpose();
      Vec uj = det.U.row(j).transpose();
      Vec rates(M_);
      for (int a = 0; a < M_; ++a) rates[a] = model.network.lambda[a](xj, uj);
      us.row(j) = uj.transpose();
      if (prob_->form == BvpForm::Flux) {
        zs.row(j) = det.Z.row(j) + frac * gap_z.transpose();
        zds.row(j) = (rates + gap_z / T).cwiseMax(10 * kRateFloor).transpose();
        Vec x = model.x0;
        for (int a = 0; a < M_; ++a) x += zs(j, a) * model.network.xi[a].cast<double>();
        xs.row(j) = x.transpose();
        Vec xd = Vec::Zero(d_);
        for (int a = 0; a < M_; ++a) xd += zds(j, a) * model.network.xi[a].cast<double>();
        xds.row(j) = xd.transpose();
      } else {
        xs.row(j) = det.X.row(j) + frac * gap_x.transpose();
        Vec drift_x = Vec::Zero(d_);
        for (int a = 0; a < M_; ++a)
          drift_x += rates[a] * model.network.xi[a].cast<double>();
        xds.row(j) = (drift_x + gap_x / T).transpose();
      }
    }

    // adjoint sweep backward from eta(T) = 0 along the seed path
    Mat etas = Mat::Zero(n, m_);
    if (m_ > 0) {
      Mat Ju;
      Vec eta = Vec::Zero(m_), A(m_), dL_du(m_);
      for (long j = n - 1; j > 0; --j) {
        Vec x = xs.row(j).transpose();
        Vec u = us.row(j).transpose();
        dL_du.setZero();
        try {
          if (prob_->form == BvpForm::Flux) {
            Vec gu(m_);
            Vec rates(M_);
            for (int a = 0; a < M_; ++a) {
              rates[a] = model.network.lambda[a](x, u);
              if (rates[a] <= kRateFloor) continue;
              rate_grad_u(model.network, a, x, u, gu);
              dL_du += (1.0 - zds(j, a) / rates[a]) * gu;
            }
          } else {
            ContractedDerivs Dv = (*derivs_)(xds.row(j).transpose(), x, u);
            dL_du = Dv.grad_u;
          }
        } catch (const Error&) {
          dL_du.setZero();
        }
        drift_jac_u(model, u, x, Ju);
        eta += dt * (dL_du + Ju.transpose() * eta);  // reverse-time Euler
        etas.row(j - 1) = eta.transpose();
      }
    }

    for (int k = 1; k < K_; ++k) {
      long j = sub * k;
      Vec y = Vec::Zero(D_);
      if (prob_->form == BvpForm::Flux) {
        y.head(M_) = zs.row(j).transpose();
        y.segment(M_, M_) = zds.row(j).transpose();
        y.segment(2 * M_, m_) = us.row(j).transpose();
      } else {
        y.head(d_) = xs.row(j).transpose();
        y.segment(d_, d_) = xds.row(j).transpose();
        y.segment(2 * d_, m_) = us.row(j).transpose();
      }
      y.tail(m_) = etas.row(j).transpose();
      U.segment(head_ + (k - 1) * D_, D_) = y;
    }
    return U;
  }

 private:
  template <class Ode>
  Vec shifted_integrate(Ode& ode, double t0, const Vec& y0, double t1) const {
    return integrate_to(ode, t0, y0, t1, prob_->rtol, prob_->atol);
  }

  const ShootingProblem* prob_;
  int K_, D_, head_, d_, m_, M_;
  ContractedDerivsFn local_;
  const ContractedDerivsFn* derivs_;
};

}  // namespace detail

namespace detail {

// Damped Gauss-Newton (with Levenberg-Marquardt fallback) on the
// multiple-shooting residual map.  Returns convergence, leaving the best
// iterate in U.
inline bool ms_newton(const MultipleShooting& ms, const ShootingProblem& prob,
                      Vec& U, Vec& R, double* final_residual, int* iters) {
  const int nu = ms.unknown_count();
  Vec Rt(nu);
  if (!ms.eval(U, R)) {
    *final_residual = -1.0;
    *iters = 0;
    return false;
  }
  double rn = R.lpNorm<Eigen::Infinity>();
  Mat J(nu, nu);
  int it = 0;
  for (; it < prob.max_newton && rn > prob.newton_tol; ++it) {
    bool jac_ok = true;
    Vec Up(nu), Rp(nu);
    for (int j = 0; j < nu && jac_ok; ++j) {
      double hj = 1e-7 * std::max(1.0, std::abs(U[j]));
      Up = U;
      Up[j] += hj;
      if (ms.eval(Up, Rp)) {
        J.col(j) = (Rp - R) / hj;
      } else {
        Up[j] = U[j] - hj;
        if (!ms.eval(Up, Rp)) { jac_ok = false; break; }
        J.col(j) = (R - Rp) / hj;
      }
    }
    if (!jac_ok) break;

    bool moved = false;
    double r2 = R.norm();
    auto try_direction = [&](const Vec& step) {
      if (!step.allFinite()) return;
      double s = 1.0;
      for (int half = 0; half < 30 && !moved; ++half) {
        if (ms.eval(U + s * step, Rt) && Rt.norm() < r2 * (1.0 - 1e-4 * s) + 1e-300) {
          U += s * step;
          R = Rt;
          rn = R.lpNorm<Eigen::Infinity>();
          moved = true;
          return;
        }
        s *= 0.5;
      }
    };
    try_direction(J.colPivHouseholderQr().solve(-R));
    if (!moved) {
      Mat JtJ = J.transpose() * J;
      Vec Jtr = J.transpose() * R;
      double mu = 1e-10 * std::max(1.0, JtJ.trace());
      for (int k = 0; k < 14 && !moved; ++k) {
        try_direction((JtJ + mu * Mat::Identity(nu, nu)).ldlt().solve(-Jtr));
        mu *= 10.0;
      }
    }
    if (!moved) break;
  }
  *final_residual = rn;
  *iters = it;
  return rn <= prob.newton_tol;
}

}  // namespace detail

// Multiple-shooting damped Newton with a finite-difference Jacobian,
// multi-start, plus a target-continuation fallback for far targets; returns
// the lowest-action converged solution (ties broken by start index).
inline OptimalTrajectory solve_bvp(const ShootingProblem& prob,
                                   std::vector<Vec> starts = {}) {
  if (!prob.model) throw ModelError("shooting problem has no model");
  const int head = prob.unknowns();
  if (prob.target.size() != (prob.form == BvpForm::Flux
                                 ? prob.model->network.M
                                 : prob.model->network.d))
    throw ModelError("target dimension mismatch");
  if (starts.empty()) starts = default_starts(prob);

  ShootingProblem work = prob;  // target is adjusted during continuation
  detail::MultipleShooting ms(work);
  const int nu = ms.unknown_count();
  const Vec target_full = prob.target;

  std::vector<StartLog> logs;
  bool have_best = false;
  double best_action = 0;
  Vec best_U;

  auto consider = [&](const Vec& U, StartLog& log) {
    Mat trace;
    if (!ms.assemble_trace(U, trace)) {
      log.converged = false;
      log.note = "re-integration failed";
      return;
    }
    OptimalTrajectory cand = detail::build_trajectory(work, trace);
    log.action = cand.action;
    if (!have_best || cand.action < best_action - 1e-14) {
      have_best = true;
      best_action = cand.action;
      best_U = U;
    }
  };

  for (const auto& s : starts)
    if (s.size() != head) throw ModelError("start guess dimension mismatch");

  // direct solves, fanned out across workers; selection stays by start index
  struct DirectOutcome {
    StartLog log;
    Vec U;
  };
  std::vector<DirectOutcome> outs(starts.size());
  work.target = target_full;
  std::atomic<size_t> next_start{0};
  auto direct_worker = [&]() {
    for (;;) {
      size_t si = next_start.fetch_add(1);
      if (si >= starts.size()) return;
      auto& o = outs[si];
      o.log.index = static_cast<int>(si);
      Vec U = ms.seed_unknowns(starts[si]);
      Vec R(nu);
      double rn = 0;
      int it = 0;
      o.log.converged = detail::ms_newton(ms, work, U, R, &rn, &it);
      o.log.iterations = it;
      o.log.residual = rn;
      if (rn < 0) o.log.note = "initial integration failed";
      o.U = std::move(U);
    }
  };
  const int workers =
      std::max(1, std::min<int>(prob.threads, static_cast<int>(starts.size())));
  if (workers == 1) {
    direct_worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(direct_worker);
    for (auto& th : pool) th.join();
  }
  for (auto& o : outs) {
    if (o.log.converged) consider(o.U, o.log);
    logs.push_back(o.log);
  }

  if (!have_best) {
    // continuation from the deterministic endpoint toward the target,
    // warm-starting each stage
    Vec base;
    {
      SmoothPath det = deterministic_limit(*prob.model, prob.T, 65);
      base = prob.form == BvpForm::Flux ? det.Z.row(det.nodes() - 1).transpose()
                                        : det.X.row(det.nodes() - 1).transpose();
    }
    for (size_t si = 0; si < starts.size() && !have_best; ++si) {
      StartLog log;
      log.index = static_cast<int>(si + starts.size());
      log.note = "continuation";
      Vec U;
      Vec R(nu);
      double alpha = 0.0, step = 0.25;
      int total_it = 0;
      bool warm = false;
      while (alpha < 1.0 - 1e-12 && step >= 1.0 / 256.0 &&
             total_it <= 10 * prob.max_newton) {
        double trial = std::min(1.0, alpha + step);
        work.target = base + trial * (target_full - base);
        // until a stage has converged, re-seed against the stage target
        Vec Ut = warm ? U : ms.seed_unknowns(starts[si]);
        double rn = 0;
        int it = 0;
        if (detail::ms_newton(ms, work, Ut, R, &rn, &it)) {
          alpha = trial;
          U = Ut;
          warm = true;
          total_it += it;
          step = std::min(step * 1.6, 0.25);
          log.residual = rn;
        } else {
          total_it += std::max(it, 1);
          step *= 0.5;
        }
      }
      log.iterations = total_it;
      log.converged = alpha >= 1.0 - 1e-12;
      work.target = target_full;
      if (log.converged) consider(U, log);
      logs.push_back(log);
    }
  }

  if (!have_best) {
    std::string diag = "no shooting start converged;";
    for (const auto& l : logs)
      diag += " [start " + std::to_string(l.index) + ": res " +
              std::to_string(l.residual) + (l.note.empty() ? "" : " " + l.note) + "]";
    throw SolverError(diag, logs.empty() ? -1.0 : logs.front().residual);
  }

  work.target = target_full;
  Mat trace;
  ms.assemble_trace(best_U, trace);
  Vec Rf(nu);
  ms.eval(best_U, Rf);
  OptimalTrajectory out = detail::build_trajectory(work, trace);
  out.residual_norm = Rf.lpNorm<Eigen::Infinity>();
  out.log = std::move(logs);
  return out;
}

struct HittingResult {
  double J_star = 0.0;     // action of the optimal trajectory
  double exponent = 0.0;   // N * J_star at the model scale
  OptimalTrajectory trajectory;
};

// LDP estimate for reaching x_hat at time T: P ~ exp(-N J*).
inline HittingResult hitting_exponent(const PDMPModel& model, const Vec& x_hat,
                                      double T,
                                      const ContractedDerivsFn& derivs = {},
                                      long nodes = 1025) {
  ShootingProblem prob;
  prob.model = &model;
  prob.form = BvpForm::Contracted;
  prob.T = T;
  prob.target = x_hat;
  prob.derivs = derivs;
  prob.nodes = nodes;
  HittingResult res;
  res.trajectory = solve_bvp(prob);
  res.J_star = res.trajectory.action;
  res.exponent = res.J_star * static_cast<double>(model.scale);
  return res;
}

// Sup-norm of the discretized Euler-Lagrange defect along a contracted-form
// trajectory: central-difference d/dt of dLhat/dxdot minus its right-hand
// side, evaluated at interior nodes.
inline double el_residual_supnorm(const OptimalTrajectory& traj,
                                  const PDMPModel& model,
                                  const ContractedDerivsFn& derivs_in = {}) {
  ContractedDerivsFn local;
  const ContractedDerivsFn* derivs = &derivs_in;
  if (!derivs_in) { local = make_dual_derivs(model); derivs = &local; }
  const long n = traj.path.nodes();
  const int d = static_cast<int>(traj.path.X.cols());
  const int m = static_cast<int>(traj.path.U.cols());
  const double h = traj.path.dt();

  Mat theta(n, d);
  for (long i = 0; i < n; ++i) {
    ContractedDerivs D = (*derivs)(traj.xdot.row(i).transpose(),
                                   traj.path.X.row(i).transpose(),
                                   traj.path.U.row(i).transpose());
    theta.row(i) = D.grad_xdot.transpose();
  }
  double sup = 0;
  Mat Jx;
  for (long i = 1; i + 1 < n; ++i) {
    Vec x = traj.path.X.row(i).transpose();
    Vec u = traj.path.U.row(i).transpose();
    ContractedDerivs D = (*derivs)(traj.xdot.row(i).transpose(), x, u);
    Vec rhs = D.grad_x;
    if (m > 0) {
      drift_jac_x(model, u, x, Jx);
      rhs += Jx.transpose() * traj.eta.row(i).transpose();
    }
    Vec lhs;
    if (i >= 2 && i + 2 < n)  // fourth-order stencils throughout
      lhs = (-theta.row(i + 2) + 8.0 * theta.row(i + 1) - 8.0 * theta.row(i - 1) +
             theta.row(i - 2))
                .transpose() /
            (12.0 * h);
    else if (i < 2)
      lhs = (-25.0 * theta.row(i) + 48.0 * theta.row(i + 1) -
             36.0 * theta.row(i + 2) + 16.0 * theta.row(i + 3) -
             3.0 * theta.row(i + 4))
                .transpose() /
            (12.0 * h);
    else
      lhs = (25.0 * theta.row(i) - 48.0 * theta.row(i - 1) +
             36.0 * theta.row(i - 2) - 16.0 * theta.row(i - 3) +
             3.0 * theta.row(i - 4))
                .transpose() /
            (12.0 * h);
    sup = std::max(sup, (lhs - rhs).lpNorm<Eigen::Infinity>());
  }
  return sup;
}

}  // namespace pdmp

#endif  // PDMP_OPTIMAL_PATH_HPP
