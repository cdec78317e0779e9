#ifndef PDMP_RK45_HPP
#define PDMP_RK45_HPP

#include <algorithm>
#include <cmath>
#include <functional>

#include "pdmp/common.hpp"

namespace pdmp {

// Dormand-Prince 5(4) embedded pair with the classic quartic dense-output
// interpolant.  The right-hand side is a template parameter so concrete
// functors inline; use std::function only where the indirection is cold.
template <class Rhs>
class Dopri5 {
 public:
  Dopri5(Rhs rhs, int dim, double rtol = 1e-8, double atol = 1e-10)
      : rhs_(std::move(rhs)), n_(dim), rtol_(rtol), atol_(atol) {
    for (Vec* v : {&y_, &ynew_, &yerr_, &ytmp_, &k1_, &k2_, &k3_, &k4_, &k5_,
                   &k6_, &k7_, &r1_, &r2_, &r3_, &r4_, &r5_})
      v->resize(n_);
  }

  void init(double t0, const Vec& y0) {
    t_ = told_ = t0;
    y_ = y0;
    rhs_(t_, y_, k1_);
    if (!k1_.allFinite()) throw SimulationError("non-finite rhs at start", t_);
    h_ = initial_step();
    first_ = false;
  }

  double t() const { return t_; }
  double t_old() const { return told_; }
  const Vec& y() const { return y_; }
  double suggested_step() const { return h_; }

  // Advance by one accepted step, not past t_limit.  Returns the new time.
  double step(double t_limit) {
    double h = std::min(h_, t_limit - t_);
    if (h <= 0) return t_;
    int rejects = 0;
    for (;;) {
      if (h < 1e-14 * std::max(1.0, std::abs(t_)))
        throw SimulationError("step size underflow", t_);
      double err = try_step(h);
      if (err <= 1.0) {  // accept
        prepare_dense(h);
        told_ = t_;
        t_ += h;
        hlast_ = h;
        y_.swap(ynew_);
        k1_.swap(k7_);  // FSAL
        double fac = 0.9 * std::pow(std::max(err, 1e-10), -0.2);
        h_ = h * std::clamp(fac, 0.2, 5.0);
        return t_;
      }
      double fac = std::max(0.9 * std::pow(err, -0.2), 0.1);
      h *= fac;
      if (++rejects > 200) throw SimulationError("step control stalled", t_);
    }
  }

  // Dense interpolation for t in [t_old, t] after an accepted step.
  void dense_at(double t, Vec& out) const {
    double theta = (t - told_) / hlast_;
    double th1 = 1.0 - theta;
    out = r1_ + theta * (r2_ + th1 * (r3_ + theta * (r4_ + th1 * r5_)));
  }

  double dense_component(double t, int i) const {
    double theta = (t - told_) / hlast_;
    double th1 = 1.0 - theta;
    return r1_[i] + theta * (r2_[i] + th1 * (r3_[i] + theta * (r4_[i] + th1 * r5_[i])));
  }

 private:
  double try_step(double h) {
    const double t = t_;
    const Vec& y = y_;
    ytmp_ = y + h * (a21 * k1_);
    rhs_(t + c2 * h, ytmp_, k2_);
    ytmp_ = y + h * (a31 * k1_ + a32 * k2_);
    rhs_(t + c3 * h, ytmp_, k3_);
    ytmp_ = y + h * (a41 * k1_ + a42 * k2_ + a43 * k3_);
    rhs_(t + c4 * h, ytmp_, k4_);
    ytmp_ = y + h * (a51 * k1_ + a52 * k2_ + a53 * k3_ + a54 * k4_);
    rhs_(t + c5 * h, ytmp_, k5_);
    ytmp_ = y + h * (a61 * k1_ + a62 * k2_ + a63 * k3_ + a64 * k4_ + a65 * k5_);
    rhs_(t + h, ytmp_, k6_);
    ynew_ = y + h * (a71 * k1_ + a73 * k3_ + a74 * k4_ + a75 * k5_ + a76 * k6_);
    rhs_(t + h, ynew_, k7_);
    if (!ynew_.allFinite() || !k7_.allFinite())
      throw SimulationError("non-finite state during integration", t);
    yerr_ = h * (e1 * k1_ + e3 * k3_ + e4 * k4_ + e5 * k5_ + e6 * k6_ + e7 * k7_);
    double sum = 0;
    for (int i = 0; i < n_; ++i) {
      double sc = atol_ + rtol_ * std::max(std::abs(y[i]), std::abs(ynew_[i]));
      double q = yerr_[i] / sc;
      sum += q * q;
    }
    return std::sqrt(sum / n_);
  }

  void prepare_dense(double h) {
    r1_ = y_;
    r2_ = ynew_ - y_;
    r3_ = h * k1_ - r2_;
    r4_ = r2_ - h * k7_ - r3_;
    r5_ = h * (d1 * k1_ + d3 * k3_ + d4 * k4_ + d5 * k5_ + d6 * k6_ + d7 * k7_);
  }

  double initial_step() const {
    double dn = 0, yn = 0;
    for (int i = 0; i < n_; ++i) {
      double sc = atol_ + rtol_ * std::abs(y_[i]);
      yn += (y_[i] / sc) * (y_[i] / sc);
      dn += (k1_[i] / sc) * (k1_[i] / sc);
    }
    yn = std::sqrt(yn / n_);
    dn = std::sqrt(dn / n_);
    double h0 = (yn < 1e-5 || dn < 1e-5) ? 1e-6 : 0.01 * yn / dn;
    return std::max(h0, 1e-10);
  }

  static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
  static constexpr double a21 = 1.0 / 5;
  static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187,
                          a53 = 64448.0 / 6561, a54 = -212.0 / 729;
  static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33,
                          a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                          a65 = -5103.0 / 18656;
  static constexpr double a71 = 35.0 / 384, a73 = 500.0 / 1113, a74 = 125.0 / 192,
                          a75 = -2187.0 / 6784, a76 = 11.0 / 84;
  static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                          e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;
  static constexpr double d1 = -12715105075.0 / 11282082432.0;
  static constexpr double d3 = 87487479700.0 / 32700410799.0;
  static constexpr double d4 = -10690763975.0 / 1880347072.0;
  static constexpr double d5 = 701980252875.0 / 199316789632.0;
  static constexpr double d6 = -1453857185.0 / 822651844.0;
  static constexpr double d7 = 69997945.0 / 29380423.0;

  Rhs rhs_;
  int n_;
  double rtol_, atol_;
  double t_ = 0, told_ = 0, h_ = 0, hlast_ = 0;
  bool first_ = true;
  Vec y_, ynew_, yerr_, ytmp_;
  Vec k1_, k2_, k3_, k4_, k5_, k6_, k7_;
  Vec r1_, r2_, r3_, r4_, r5_;
};

// Integrate rhs from (t0, y0) to t1, calling observer(stepper) after every
// accepted step.  Observer may inspect dense output over [t_old, t].
template <class Rhs, class Observer>
void integrate_observed(Rhs rhs, double t0, const Vec& y0, double t1,
                        double rtol, double atol, Observer&& obs) {
  Dopri5<Rhs> stepper(std::move(rhs), static_cast<int>(y0.size()), rtol, atol);
  stepper.init(t0, y0);
  long guard = 0;
  while (stepper.t() < t1 - 1e-14 * std::max(1.0, std::abs(t1))) {
    stepper.step(t1);
    obs(stepper);
    if (++guard > 50'000'000) throw SimulationError("step budget exhausted", stepper.t());
  }
}

template <class Rhs>
Vec integrate_to(Rhs rhs, double t0, const Vec& y0, double t1, double rtol,
                 double atol) {
  Vec result = y0;
  if (t1 <= t0) return result;
  integrate_observed(std::move(rhs), t0, y0, t1, rtol, atol,
                     [&](const auto& s) { result = s.y(); });
  return result;
}

// Classic fixed-step RK4, used where the step grid is dictated by the caller.
template <class Rhs>
void rk4_step(Rhs&& rhs, double t, double h, Vec& y, Vec& k1, Vec& k2, Vec& k3,
              Vec& k4, Vec& tmp) {
  rhs(t, y, k1);
  tmp = y + (0.5 * h) * k1;
  rhs(t + 0.5 * h, tmp, k2);
  tmp = y + (0.5 * h) * k2;
  rhs(t + 0.5 * h, tmp, k3);
  tmp = y + h * k3;
  rhs(t + h, tmp, k4);
  y += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

}  // namespace pdmp

#endif  // PDMP_RK45_HPP
