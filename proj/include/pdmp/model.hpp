#ifndef PDMP_MODEL_HPP
#define PDMP_MODEL_HPP

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "pdmp/common.hpp"
#include "pdmp/philox.hpp"

namespace pdmp {

// Ref-based signatures let sub-vector blocks bind without copies, which keeps
// the per-event cost of the simulator flat.
using CVecRef = const Eigen::Ref<const Vec>&;
using VecRef = Eigen::Ref<Vec>;

using RateFn = std::function<double(CVecRef x, CVecRef u)>;
// Gradient callbacks write into a caller-owned vector (d or m entries).
using RateGradFn = std::function<void(CVecRef x, CVecRef u, Vec& out)>;
using DriftFn = std::function<void(CVecRef u, CVecRef x, VecRef out)>;
// Jacobians: dA/dx is m x d, dA/du is m x m.
using DriftJacFn = std::function<void(CVecRef u, CVecRef x, Mat& out)>;

// Species/reaction structure: stoichiometric vectors and per-capita intensity
// functions.  Intensities must be nonnegative, bounded by rate_bound on the
// operating box, and vanish whenever firing would push a concentration
// negative.
struct ReactionNetwork {
  int d = 0;  // species count
  int M = 0;  // reaction count
  std::vector<Eigen::VectorXi> xi;  // M stoichiometric vectors in Z^d
  std::vector<RateFn> lambda;       // M intensities (x, u) -> rate
  double rate_bound = 0.0;          // asserted uniform bound K

  // Optional analytic partials; when absent, callers fall back to central
  // finite differences.
  std::vector<RateGradFn> dlambda_dx;  // each writes d entries
  std::vector<RateGradFn> dlambda_du;  // each writes m entries

  bool has_rate_gradients() const {
    return static_cast<int>(dlambda_dx.size()) == M &&
           static_cast<int>(dlambda_du.size()) == M;
  }

  double rate(int alpha, const Vec& x, const Vec& u) const {
    return lambda[alpha](x, u);
  }

  void check_structure() const {
    if (M <= 0) throw ModelError("network has zero reactions");
    if (d <= 0) throw ModelError("network has zero species");
    if (static_cast<int>(xi.size()) != M || static_cast<int>(lambda.size()) != M)
      throw ModelError("reaction arrays disagree with reaction count");
    for (int a = 0; a < M; ++a) {
      if (xi[a].size() != d) throw ModelError("stoichiometric vector has wrong dimension");
      if (xi[a].isZero()) throw ModelError("stoichiometric vector is zero");
      if (!lambda[a]) throw ModelError("missing intensity function");
    }
    if (rate_bound < 0) throw ModelError("negative rate bound");
  }
};

// Linear invariant c_x . x + c_u . u = value, declared by the model author.
// Used to pin the fixed point on the conserved manifold.
struct LinearInvariant {
  Vec coef_x;
  Vec coef_u;
  double value = 0.0;
};

struct PDMPModel {
  ReactionNetwork network;
  DriftFn drift;  // A(u, x); may be empty when m == 0
  int m = 0;      // slow-variable dimension
  Vec u0;         // initial slow state
  Vec x0;         // initial concentrations
  long scale = 1; // N

  DriftJacFn dA_dx;  // optional analytic Jacobians
  DriftJacFn dA_du;
  std::vector<LinearInvariant> invariants;
  std::string name = "custom";

  bool has_drift_jacobians() const { return bool(dA_dx) && bool(dA_du); }

  void eval_drift(CVecRef u, CVecRef x, Vec& out) const {
    out.resize(m);
    if (m == 0) return;
    drift(u, x, out);
  }

  void check_structure() const {
    network.check_structure();
    if (m < 0) throw ModelError("negative slow dimension");
    if (m > 0 && !drift) throw ModelError("missing drift");
    if (u0.size() != m) throw ModelError("u0 has wrong dimension");
    if (x0.size() != network.d) throw ModelError("x0 has wrong dimension");
    if ((x0.array() < 0).any()) throw ModelError("x0 has negative entries");
    if (scale < 1) throw ModelError("scale N must be positive");
    Vec a(m);
    eval_drift(u0, x0, a);
    if (!a.allFinite()) throw ModelError("drift not finite at initial state");
  }
};

// Value snapshot of the hybrid state (z, x, u) at time t.
struct HybridState {
  double t = 0.0;
  Vec z;  // scaled reaction counts
  Vec x;  // concentrations
  Vec u;  // slow variables
};

inline HybridState initial_state(const PDMPModel& model) {
  HybridState s;
  s.t = 0;
  s.z = Vec::Zero(model.network.M);
  s.x = model.x0;
  s.u = model.u0;
  return s;
}

// Per-capita intensity of one reaction; the N-system fires at N times this.
inline double intensity(const ReactionNetwork& net, const Vec& x, const Vec& u,
                        int alpha) {
  if (alpha < 0 || alpha >= net.M) throw ModelError("reaction index out of range");
  if ((x.array() < 0).any()) throw ModelError("intensity queried outside positive orthant");
  double r = net.lambda[alpha](x, u);
  if (!std::isfinite(r)) throw ModelError("intensity not finite");
  if (r < 0) throw ModelError("negative intensity");
  return r;
}

// Fire reaction alpha once: z_alpha += 1/N, x += xi_alpha / N.
inline HybridState apply_reaction(const HybridState& state, int alpha, long N) {
  HybridState next = state;
  if (alpha < 0 || alpha >= state.z.size()) throw ModelError("reaction index out of range");
  next.z[alpha] += 1.0 / static_cast<double>(N);
  return next;
}

inline HybridState apply_reaction(const HybridState& state,
                                  const ReactionNetwork& net, int alpha, long N) {
  HybridState next = apply_reaction(state, alpha, N);
  const double tol = 1e-12 * std::max(1, net.M);
  for (int i = 0; i < net.d; ++i) {
    double v = next.x[i] + net.xi[alpha][i] / static_cast<double>(N);
    if (v < -tol)
      throw ModelError("reaction drove concentration negative: broken positivity guard");
    next.x[i] = std::max(v, 0.0);
  }
  return next;
}

struct SamplingBox {
  Vec x_lo, x_hi;
  Vec u_lo, u_hi;
};

struct ValidationIssue {
  int reaction;
  std::string what;
  double value;
};

struct ValidationReport {
  bool passed = true;
  double max_rate = 0.0;
  std::vector<ValidationIssue> issues;
};

// Spot-check the structural assumptions: rates nonnegative, bounded by K, and
// zero whenever a reaction would push a zero coordinate negative.
inline ValidationReport validate_network(const ReactionNetwork& net,
                                         const SamplingBox& box, long samples,
                                         std::uint64_t seed = 12345) {
  net.check_structure();
  if (samples < 1) throw ModelError("samples must be >= 1");
  if (box.x_lo.size() != net.d || box.x_hi.size() != net.d)
    throw ModelError("sampling box x dimension mismatch");
  if (box.u_lo.size() != box.u_hi.size())
    throw ModelError("sampling box u dimension mismatch");

  ValidationReport report;
  Philox rng(seed, 0);
  const int m = static_cast<int>(box.u_lo.size());
  Vec x(net.d), u(m);
  auto record = [&](int a, const std::string& what, double v) {
    report.passed = false;
    if (report.issues.size() < 64) report.issues.push_back({a, what, v});
  };

  for (long s = 0; s < samples; ++s) {
    for (int i = 0; i < net.d; ++i)
      x[i] = box.x_lo[i] + (box.x_hi[i] - box.x_lo[i]) * rng.uniform();
    for (int j = 0; j < m; ++j)
      u[j] = box.u_lo[j] + (box.u_hi[j] - box.u_lo[j]) * rng.uniform();
    for (int a = 0; a < net.M; ++a) {
      double r = net.lambda[a](x, u);
      if (!std::isfinite(r)) { record(a, "non-finite rate", r); continue; }
      if (r < 0) record(a, "negative rate", r);
      if (r > net.rate_bound * (1 + 1e-12)) record(a, "rate exceeds bound K", r);
      report.max_rate = std::max(report.max_rate, r);
    }
    // Positivity guard: snap coordinates consumed by a reaction to zero and
    // require the rate to vanish there.
    for (int a = 0; a < net.M; ++a) {
      Vec xz = x;
      bool touches = false;
      for (int i = 0; i < net.d; ++i)
        if (net.xi[a][i] < 0) { xz[i] = 0.0; touches = true; }
      if (!touches) continue;
      double r = net.lambda[a](xz, u);
      if (!(std::abs(r) <= 1e-12 * std::max(1.0, net.rate_bound)))
        record(a, "positivity guard violated at zero boundary", r);
    }
  }
  return report;
}

// Central finite differences for rate partials when analytic ones are absent.
inline void rate_grad_x(const ReactionNetwork& net, int alpha, const Vec& x,
                        const Vec& u, Vec& out) {
  if (net.has_rate_gradients()) { net.dlambda_dx[alpha](x, u, out); return; }
  out.resize(x.size());
  Vec xp = x, xm = x;
  for (int i = 0; i < x.size(); ++i) {
    double h = 1e-6 * std::max(1.0, std::abs(x[i]));
    xp[i] = x[i] + h; xm[i] = x[i] - h;
    out[i] = (net.lambda[alpha](xp, u) - net.lambda[alpha](xm, u)) / (2 * h);
    xp[i] = x[i]; xm[i] = x[i];
  }
}

inline void rate_grad_u(const ReactionNetwork& net, int alpha, const Vec& x,
                        const Vec& u, Vec& out) {
  if (net.has_rate_gradients()) { net.dlambda_du[alpha](x, u, out); return; }
  out.resize(u.size());
  Vec up = u, um = u;
  for (int j = 0; j < u.size(); ++j) {
    double h = 1e-6 * std::max(1.0, std::abs(u[j]));
    up[j] = u[j] + h; um[j] = u[j] - h;
    out[j] = (net.lambda[alpha](x, up) - net.lambda[alpha](x, um)) / (2 * h);
    up[j] = u[j]; um[j] = u[j];
  }
}

inline void drift_jac_x(const PDMPModel& model, const Vec& u, const Vec& x, Mat& out) {
  if (model.dA_dx) { model.dA_dx(u, x, out); return; }
  const int m = model.m, d = model.network.d;
  out.resize(m, d);
  Vec xp = x, xm = x, ap(m), am(m);
  for (int i = 0; i < d; ++i) {
    double h = 1e-6 * std::max(1.0, std::abs(x[i]));
    xp[i] = x[i] + h; xm[i] = x[i] - h;
    model.eval_drift(u, xp, ap);
    model.eval_drift(u, xm, am);
    out.col(i) = (ap - am) / (2 * h);
    xp[i] = x[i]; xm[i] = x[i];
  }
}

inline void drift_jac_u(const PDMPModel& model, const Vec& u, const Vec& x, Mat& out) {
  if (model.dA_du) { model.dA_du(u, x, out); return; }
  const int m = model.m;
  out.resize(m, m);
  Vec up = u, um = u, ap(m), am(m);
  for (int j = 0; j < m; ++j) {
    double h = 1e-6 * std::max(1.0, std::abs(u[j]));
    up[j] = u[j] + h; um[j] = u[j] - h;
    model.eval_drift(up, x, ap);
    model.eval_drift(um, x, am);
    out.col(j) = (ap - am) / (2 * h);
    up[j] = u[j]; um[j] = u[j];
  }
}

}  // namespace pdmp

#endif  // PDMP_MODEL_HPP
