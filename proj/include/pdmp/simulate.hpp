#ifndef PDMP_SIMULATE_HPP
#define PDMP_SIMULATE_HPP

#include <atomic>
#include <functional>
#include <thread>
#include <vector>

#include "pdmp/common.hpp"
#include "pdmp/model.hpp"
#include "pdmp/path.hpp"
#include "pdmp/philox.hpp"
#include "pdmp/rk45.hpp"

namespace pdmp {

struct SimulateOptions {
  double rtol = 1e-8;
  double atol = 1e-10;
  double dense_step = -1.0;  // <0: T/512; 0: terminal state only
  bool record_events = true;
  long max_events = 500'000'000;
};

namespace detail {

// Between jumps the concentrations are frozen, so we integrate the slow
// variables together with the cumulative per-capita intensities.
struct SegmentRhs {
  const PDMPModel* model;
  const Vec* x;
  int m, M;
  void operator()(double, const Vec& y, Vec& dy) const {
    if (m > 0) model->drift(y.head(m), *x, dy.head(m));
    for (int a = 0; a < M; ++a) {
      double r = model->network.lambda[a](*x, y.head(m));
      dy[m + a] = r > 0 ? r : 0.0;
    }
  }
};

}  // namespace detail

// Exact sampling of the PDMP by the time-rescaling representation: each
// reaction carries a unit-exponential residual clock consumed at rate
// N*lambda_a; threshold crossings are located by bisection on the dense
// output of the integrator.  Ensembles give trajectory i the stream id i.
inline JumpPath simulate_pdmp(const PDMPModel& model, double T,
                              std::uint64_t seed,
                              const SimulateOptions& opts = {},
                              std::uint64_t stream = 0) {
  if (T <= 0) throw ModelError("horizon must be positive");
  const auto& net = model.network;
  const int m = model.m, M = net.M, d = net.d;
  const double N = static_cast<double>(model.scale);

  JumpPath out;
  out.T = T;
  out.N = model.scale;
  const double dense_step = opts.dense_step < 0 ? T / 512.0 : opts.dense_step;
  const long n_grid = dense_step > 0 ? static_cast<long>(std::floor(T / dense_step + 1e-9)) + 1 : 0;
  if (n_grid > 0) {
    out.grid_t.reserve(n_grid);
    out.X.resize(n_grid, d);
    out.U.resize(n_grid, m);
    out.Z.resize(n_grid, M);
  }

  Philox rng(seed, stream);
  std::vector<double> clock(M);
  for (int a = 0; a < M; ++a) clock[a] = rng.exponential();

  // integer species counts: x0 snaps to the 1/N grid (these ARE the
  // N-system's states), so boundary states are exact and guards trap
  std::vector<long> counts(M, 0);
  Eigen::VectorX<long> Xint(d);
  for (int i = 0; i < d; ++i) {
    Xint[i] = std::llround(N * model.x0[i]);
    if (Xint[i] < 0) Xint[i] = 0;
  }
  Vec x(d), z = Vec::Zero(M);
  Vec u = model.u0;
  double t = 0.0;

  auto refresh_xz = [&]() {
    for (int i = 0; i < d; ++i) x[i] = static_cast<double>(Xint[i]) / N;
    for (int a = 0; a < M; ++a) z[a] = static_cast<double>(counts[a]) / N;
  };
  refresh_xz();

  long next_grid = 0;
  auto emit_grid_point = [&](double tg, const Vec& ug) {
    out.grid_t.push_back(tg);
    long r = static_cast<long>(out.grid_t.size()) - 1;
    out.X.row(r) = x.transpose();
    out.U.row(r) = ug.transpose();
    out.Z.row(r) = z.transpose();
  };
  if (n_grid > 0) {
    emit_grid_point(0.0, u);
    next_grid = 1;
  }

  detail::SegmentRhs rhs{&model, &x, m, M};
  Dopri5<detail::SegmentRhs> stepper(rhs, m + M, opts.rtol, opts.atol);
  Vec y0(m + M), yd(m + M);
  const double time_tol = 1e-10 * std::max(1.0, T);
  long fired = 0;

  while (t < T - 1e-14 * std::max(1.0, T)) {
    y0.head(m) = u;
    y0.tail(M).setZero();
    stepper.init(t, y0);

    bool segment_done = false;
    while (!segment_done) {
      double t_end = stepper.step(T);
      double t_start = stepper.t_old();

      // earliest threshold crossing inside this step, if any
      double t_fire = T + 1.0;
      int a_fire = -1;
      for (int a = 0; a < M; ++a) {
        if (N * stepper.y()[m + a] < clock[a]) continue;
        double lo = t_start, hi = t_end;
        while (hi - lo > time_tol) {
          double mid = 0.5 * (lo + hi);
          (N * stepper.dense_component(mid, m + a) >= clock[a] ? hi : lo) = mid;
        }
        if (hi < t_fire) { t_fire = hi; a_fire = a; }
      }

      // grid samples strictly before an event (the event time itself gets
      // the post-jump state, matching cadlag sampling)
      while (n_grid > 0 && next_grid < n_grid) {
        double tg = next_grid == n_grid - 1 ? T : dense_step * static_cast<double>(next_grid);
        bool take = a_fire >= 0 ? (tg < t_fire)
                                : (tg <= t_end + 1e-14 * std::max(1.0, T));
        if (!take) break;
        stepper.dense_at(std::min(tg, t_end), yd);
        emit_grid_point(tg, yd.head(m));
        ++next_grid;
      }

      if (a_fire >= 0) {
        stepper.dense_at(t_fire, yd);
        u = yd.head(m);
        for (int a = 0; a < M; ++a) {
          if (a == a_fire) continue;
          clock[a] -= N * std::max(yd[m + a], 0.0);
          if (clock[a] < 1e-14) clock[a] = 1e-14;
        }
        counts[a_fire] += 1;
        Xint += net.xi[a_fire].cast<long>();
        if ((Xint.array() < 0).any())
          throw SimulationError("positivity guard failed to trap reaction " +
                                    std::to_string(a_fire),
                                t_fire);
        clock[a_fire] = rng.exponential();
        refresh_xz();
        t = t_fire;
        if (opts.record_events) out.events.push_back({t, a_fire});
        if (++fired > opts.max_events)
          throw SimulationError("event budget exhausted", t);
        segment_done = true;
      } else if (t_end >= T - 1e-14 * std::max(1.0, T)) {
        u = stepper.y().head(m);
        t = T;
        segment_done = true;
      }
    }
  }

  if (n_grid > 0) {
    while (next_grid < n_grid) {
      double tg = next_grid == n_grid - 1 ? T : dense_step * static_cast<double>(next_grid);
      emit_grid_point(tg, u);
      ++next_grid;
    }
  }
  out.terminal = HybridState{T, z, x, u};
  return out;
}

namespace detail {

struct FluidRhs {
  const PDMPModel* model;
  int m, M, d;
  mutable Vec x_buf;
  void operator()(double, const Vec& y, Vec& dy) const {
    x_buf = model->x0;
    for (int a = 0; a < M; ++a) x_buf += y[a] * model->network.xi[a].cast<double>();
    for (int i = 0; i < d; ++i) x_buf[i] = std::max(x_buf[i], 0.0);
    for (int a = 0; a < M; ++a) {
      double r = model->network.lambda[a](x_buf, y.tail(m));
      dy[a] = r > 0 ? r : 0.0;
    }
    if (m > 0) model->drift(y.tail(m), x_buf, dy.tail(m));
  }
};

}  // namespace detail

// Kurtz fluid limit: dz_a/dt = lambda_a, x = x0 + sum z_a xi_a, du/dt = A.
inline SmoothPath deterministic_limit(const PDMPModel& model, double T,
                                      long n_nodes = 513, double rtol = 1e-10,
                                      double atol = 1e-12) {
  if (T <= 0) throw ModelError("horizon must be positive");
  const auto& net = model.network;
  const int m = model.m, M = net.M, d = net.d;
  SmoothPath p;
  p.T = T;
  p.Z.resize(n_nodes, M);
  p.X.resize(n_nodes, d);
  p.U.resize(n_nodes, m);

  detail::FluidRhs rhs{&model, m, M, d, Vec(d)};
  Vec y0(M + m);
  y0.head(M).setZero();
  y0.tail(m) = model.u0;

  p.Z.row(0).setZero();
  p.X.row(0) = model.x0.transpose();
  p.U.row(0) = model.u0.transpose();
  long next = 1;
  Vec yd(M + m), x(d);
  auto emit = [&](const Vec& y) {
    for (int a = 0; a < M; ++a) p.Z(next, a) = y[a];
    x = model.x0;
    for (int a = 0; a < M; ++a) x += y[a] * net.xi[a].cast<double>();
    p.X.row(next) = x.transpose();
    p.U.row(next) = y.tail(m).transpose();
    ++next;
  };

  Vec y_final = y0;
  integrate_observed(rhs, 0.0, y0, T, rtol, atol, [&](const auto& s) {
    while (next < n_nodes) {
      double tg = p.T * static_cast<double>(next) / static_cast<double>(n_nodes - 1);
      if (tg > s.t() + 1e-14 * std::max(1.0, T)) break;
      s.dense_at(std::min(tg, s.t()), yd);
      emit(yd);
    }
    y_final = s.y();
  });
  if (next == n_nodes - 1) emit(y_final);  // final node lost to rounding
  if (next != n_nodes) throw SimulationError("dense grid fill incomplete", T);
  return p;
}

struct FixedPointResult {
  Vec x;        // stationary concentrations
  Vec u;        // stationary slow variables
  Vec lambda;   // per-reaction rates at the fixed point
  double residual = 0.0;
  int iterations = 0;
};

// Newton (Gauss-Newton least squares) on the stationarity system
//   sum_a xi_a lambda_a(x,u) = 0,  A(u,x) = 0,
// augmented with any model-declared linear invariants anchored at the
// initial condition, which pins the root on the conserved manifold.
inline FixedPointResult fixed_point(const PDMPModel& model, const Vec& x_guess,
                                    const Vec& u_guess, double tol = 1e-12,
                                    int max_iter = 100) {
  const auto& net = model.network;
  const int d = net.d, m = model.m, M = net.M;
  const int K = static_cast<int>(model.invariants.size());
  if ((x_guess.array() < 0).any())
    throw ModelError("fixed-point guess outside positive orthant");

  Vec v(d + m);
  v.head(d) = x_guess;
  v.tail(m) = u_guess;

  Vec F(d + m + K), Ftrial(d + m + K), a(m), grad(std::max(d, m));
  Mat J(d + m + K, d + m), jx, ju;

  auto eval_F = [&](const Vec& vv, Vec& out) {
    Vec x = vv.head(d), u = vv.tail(m);
    out.head(d).setZero();
    for (int al = 0; al < M; ++al)
      out.head(d) += net.lambda[al](x, u) * net.xi[al].cast<double>();
    if (m > 0) {
      model.drift(u, x, a);
      out.segment(d, m) = a;
    }
    for (int k = 0; k < K; ++k) {
      const auto& inv = model.invariants[k];
      out[d + m + k] = inv.coef_x.dot(x) + inv.coef_u.dot(u) - inv.value;
    }
  };

  eval_F(v, F);
  double fnorm = F.lpNorm<Eigen::Infinity>();
  int it = 0;
  for (; it < max_iter && fnorm > tol; ++it) {
    Vec x = v.head(d), u = v.tail(m);
    J.setZero();
    for (int al = 0; al < M; ++al) {
      rate_grad_x(net, al, x, u, grad);
      J.block(0, 0, d, d) += net.xi[al].cast<double>() * grad.head(d).transpose();
      if (m > 0) {
        rate_grad_u(net, al, x, u, grad);
        J.block(0, d, d, m) += net.xi[al].cast<double>() * grad.head(m).transpose();
      }
    }
    if (m > 0) {
      drift_jac_x(model, u, x, jx);
      drift_jac_u(model, u, x, ju);
      J.block(d, 0, m, d) = jx;
      J.block(d, d, m, m) = ju;
    }
    for (int k = 0; k < K; ++k) {
      J.block(d + m + k, 0, 1, d) = model.invariants[k].coef_x.transpose();
      J.block(d + m + k, d, 1, m) = model.invariants[k].coef_u.transpose();
    }
    Vec step = J.colPivHouseholderQr().solve(-F);
    double s = 1.0;
    bool moved = false;
    for (int half = 0; half < 60; ++half) {
      Vec trial = v + s * step;
      for (int i = 0; i < d; ++i) trial[i] = std::max(trial[i], 0.0);
      eval_F(trial, Ftrial);
      if (Ftrial.lpNorm<Eigen::Infinity>() < fnorm * (1.0 - 1e-4 * s) + 1e-300) {
        v = trial;
        F = Ftrial;
        fnorm = F.lpNorm<Eigen::Infinity>();
        moved = true;
        break;
      }
      s *= 0.5;
    }
    if (!moved) break;
  }
  if (fnorm > 1e-10)
    throw SolverError("fixed point iteration did not converge", fnorm);

  FixedPointResult res;
  res.x = v.head(d);
  res.u = v.tail(m);
  res.lambda.resize(M);
  for (int al = 0; al < M; ++al) res.lambda[al] = net.lambda[al](res.x, res.u);
  res.residual = fnorm;
  res.iterations = it;
  return res;
}

using PathPredicate = std::function<bool(const JumpPath&)>;

struct EnsembleOptions {
  long count = 1;
  std::uint64_t master_seed = 0;
  int threads = 1;
  bool dense = true;           // collect mean/variance paths
  SimulateOptions sim;
};

struct EnsembleReport {
  long count = 0;
  long hits = 0;
  double p_hat = 0.0;
  ExtReal minus_log_p_over_N;  // -(1/N) log p_hat, +inf sentinel when p_hat=0
  std::vector<double> grid;
  Mat mean_x, var_x, mean_u, var_u, mean_z, var_z;
};

namespace detail {

struct EnsembleBlock {
  long hits = 0;
  long done = 0;
  Mat sum_x, sq_x, sum_u, sq_u, sum_z, sq_z;
  bool failed = false;
  long fail_index = 0;
  std::string fail_msg;
};

}  // namespace detail

// Trajectory i always draws from stream i of the master seed and partial
// sums are combined in fixed block order, so the result is identical for any
// worker count.
inline EnsembleReport simulate_ensemble(const PDMPModel& model, double T,
                                        const EnsembleOptions& opts,
                                        const PathPredicate& predicate) {
  if (opts.count < 1) throw ModelError("ensemble count must be >= 1");
  const long block_size = 256;
  const long n_blocks = (opts.count + block_size - 1) / block_size;
  std::vector<detail::EnsembleBlock> blocks(n_blocks);

  SimulateOptions sim = opts.sim;
  if (!opts.dense) {
    sim.dense_step = 0.0;
    sim.record_events = false;
  }
  const double dense_step = sim.dense_step < 0 ? T / 512.0 : sim.dense_step;
  const long n_grid = opts.dense ? static_cast<long>(std::floor(T / dense_step + 1e-9)) + 1 : 0;
  const int d = model.network.d, m = model.m, M = model.network.M;

  std::atomic<long> next_block{0};
  auto worker = [&]() {
    for (;;) {
      long b = next_block.fetch_add(1);
      if (b >= n_blocks) return;
      auto& blk = blocks[b];
      if (n_grid > 0) {
        blk.sum_x = Mat::Zero(n_grid, d); blk.sq_x = Mat::Zero(n_grid, d);
        blk.sum_u = Mat::Zero(n_grid, m); blk.sq_u = Mat::Zero(n_grid, m);
        blk.sum_z = Mat::Zero(n_grid, M); blk.sq_z = Mat::Zero(n_grid, M);
      }
      const long lo = b * block_size;
      const long hi = std::min(lo + block_size, opts.count);
      for (long i = lo; i < hi; ++i) {
        try {
          JumpPath p = simulate_pdmp(model, T, opts.master_seed, sim,
                                     static_cast<std::uint64_t>(i));
          if (n_grid > 0) {
            blk.sum_x += p.X; blk.sq_x += p.X.cwiseProduct(p.X);
            blk.sum_u += p.U; blk.sq_u += p.U.cwiseProduct(p.U);
            blk.sum_z += p.Z; blk.sq_z += p.Z.cwiseProduct(p.Z);
          }
          if (predicate && predicate(p)) ++blk.hits;
          ++blk.done;
        } catch (const Error& e) {
          if (!blk.failed) {
            blk.failed = true;
            blk.fail_index = i;
            blk.fail_msg = e.what();
          }
          return;
        }
      }
    }
  };

  const long n_threads = std::max<long>(1, std::min<long>(opts.threads, n_blocks));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(n_threads);
    for (int w = 0; w < n_threads; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  for (const auto& blk : blocks)
    if (blk.failed)
      throw SimulationError("ensemble trajectory " + std::to_string(blk.fail_index) +
                                " failed: " + blk.fail_msg,
                            static_cast<double>(blk.fail_index));

  EnsembleReport rep;
  rep.count = opts.count;
  for (const auto& blk : blocks) rep.hits += blk.hits;
  rep.p_hat = static_cast<double>(rep.hits) / static_cast<double>(rep.count);
  rep.minus_log_p_over_N =
      rep.hits == 0 ? ExtReal::infinity()
                    : ExtReal::finite(-std::log(rep.p_hat) /
                                      static_cast<double>(model.scale));
  if (n_grid > 0) {
    rep.grid.resize(n_grid);
    for (long g = 0; g < n_grid; ++g)
      rep.grid[g] = g == n_grid - 1 ? T : dense_step * static_cast<double>(g);
    Mat sx = Mat::Zero(n_grid, d), qx = Mat::Zero(n_grid, d);
    Mat su = Mat::Zero(n_grid, m), qu = Mat::Zero(n_grid, m);
    Mat sz = Mat::Zero(n_grid, M), qz = Mat::Zero(n_grid, M);
    for (const auto& blk : blocks) {
      sx += blk.sum_x; qx += blk.sq_x;
      su += blk.sum_u; qu += blk.sq_u;
      sz += blk.sum_z; qz += blk.sq_z;
    }
    const double c = static_cast<double>(rep.count);
    rep.mean_x = sx / c;
    rep.mean_u = su / c;
    rep.mean_z = sz / c;
    rep.var_x = (qx / c - rep.mean_x.cwiseProduct(rep.mean_x)).cwiseMax(0.0);
    rep.var_u = (qu / c - rep.mean_u.cwiseProduct(rep.mean_u)).cwiseMax(0.0);
    rep.var_z = (qz / c - rep.mean_z.cwiseProduct(rep.mean_z)).cwiseMax(0.0);
  }
  return rep;
}

}  // namespace pdmp

#endif  // PDMP_SIMULATE_HPP
