#ifndef PDMP_DETAIL_SIMPLEX_HPP
#define PDMP_DETAIL_SIMPLEX_HPP

#include <vector>

#include "pdmp/common.hpp"

namespace pdmp::detail {

// Dense two-phase tableau simplex with Bland's rule, for the tiny linear
// programs behind the feasible-cone checks (columns = reactions, rows =
// species; both single digits in practice).
class Simplex {
 public:
  enum class Status { Optimal, Unbounded, Infeasible };

  // max c.q  s.t.  E q = b, q >= 0
  Simplex(const Mat& E, const Vec& b) : r_(int(E.rows())), n_(int(E.cols())) {
    T_.resize(r_, n_ + r_ + 1);
    T_.block(0, 0, r_, n_) = E;
    T_.col(n_ + r_) = b;
    for (int i = 0; i < r_; ++i)  // normalize rhs >= 0 before adding artificials
      if (T_(i, n_ + r_) < 0) T_.row(i) = -T_.row(i);
    T_.block(0, n_, r_, r_) = Mat::Identity(r_, r_);
    basis_.resize(r_);
    for (int i = 0; i < r_; ++i) basis_[i] = n_ + i;
  }

  // Phase 1; returns true when the system is feasible.
  bool make_feasible() {
    Vec c = Vec::Zero(n_ + r_);
    c.tail(r_).setConstant(-1.0);
    set_objective(c);
    iterate(n_ + r_);
    if (obj_value() < -1e-9) return false;
    drive_out_artificials();
    return true;
  }

  // Phase 2 after make_feasible(): maximize q_j over the feasible set.
  Status maximize_var(int j, double* value) {
    Vec c = Vec::Zero(n_ + r_);
    c[j] = 1.0;
    set_objective(c);
    Status s = iterate(n_);  // artificial columns may not enter
    *value = obj_value();
    return s;
  }

  Vec point() const {
    Vec q = Vec::Zero(n_);
    for (int i = 0; i < r_; ++i)
      if (basis_[i] < n_) q[basis_[i]] = T_(i, n_ + r_);
    return q;
  }

 private:
  void set_objective(const Vec& c) {
    f_ = Vec::Zero(n_ + r_ + 1);
    f_.head(n_ + r_) = -c;
    for (int i = 0; i < r_; ++i) {
      double coef = f_[basis_[i]];
      if (coef != 0.0) f_ -= coef * T_.row(i).transpose();
    }
  }

  // pricing out basic columns accumulates c_B . x_B in the rhs slot
  double obj_value() const { return f_[n_ + r_]; }

  Status iterate(int allowed_cols) {
    const double eps = 1e-11;
    for (int guard = 0; guard < 20000; ++guard) {
      int enter = -1;
      for (int j = 0; j < allowed_cols; ++j)
        if (f_[j] < -eps) { enter = j; break; }  // Bland: first improving
      if (enter < 0) return Status::Optimal;
      int leave = -1;
      double best = 0;
      for (int i = 0; i < r_; ++i) {
        if (T_(i, enter) <= eps) continue;
        double ratio = T_(i, n_ + r_) / T_(i, enter);
        if (leave < 0 || ratio < best - 1e-15 ||
            (std::abs(ratio - best) <= 1e-15 && basis_[i] < basis_[leave])) {
          leave = i;
          best = ratio;
        }
      }
      if (leave < 0) return Status::Unbounded;
      pivot(leave, enter);
    }
    return Status::Optimal;  // cycling guard; sizes here make this unreachable
  }

  void drive_out_artificials() {
    const double eps = 1e-11;
    for (int i = 0; i < r_; ++i) {
      if (basis_[i] < n_) continue;
      int enter = -1;
      for (int j = 0; j < n_; ++j)
        if (std::abs(T_(i, j)) > eps) { enter = j; break; }
      if (enter >= 0) pivot(i, enter);
      // else: redundant row, harmless to leave the artificial basic at zero
    }
  }

  void pivot(int row, int col) {
    T_.row(row) /= T_(row, col);
    for (int i = 0; i < r_; ++i) {
      if (i == row) continue;
      double coef = T_(i, col);
      if (coef != 0.0) T_.row(i) -= coef * T_.row(row);
    }
    double coef = f_[col];
    if (coef != 0.0) f_ -= coef * T_.row(row).transpose();
    basis_[row] = col;
  }

  int r_, n_;
  Mat T_;
  Vec f_;
  std::vector<int> basis_;
};

inline bool cone_feasible(const Mat& E, const Vec& b) {
  Simplex s(E, b);
  return s.make_feasible();
}

struct VarMax {
  bool feasible = false;
  bool bounded = false;
  double value = 0.0;
};

inline VarMax max_variable(const Mat& E, const Vec& b, int j) {
  Simplex s(E, b);
  VarMax out;
  if (!s.make_feasible()) return out;
  out.feasible = true;
  double v = 0;
  auto st = s.maximize_var(j, &v);
  out.bounded = (st == Simplex::Status::Optimal);
  out.value = v;
  return out;
}

}  // namespace pdmp::detail

#endif  // PDMP_DETAIL_SIMPLEX_HPP
