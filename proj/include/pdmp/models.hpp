#ifndef PDMP_MODELS_HPP
#define PDMP_MODELS_HPP

#include "pdmp/model.hpp"

namespace pdmp {

// Single unit-species counting process with constant rate: z counts firings,
// x = x0 + z.  No slow variables.
inline PDMPModel poisson_model(double rate, long N, double x0 = 0.0) {
  if (rate < 0) throw ModelError("rate must be nonnegative");
  PDMPModel model;
  model.name = "poisson";
  model.network.d = 1;
  model.network.M = 1;
  model.network.xi = {Eigen::VectorXi::Constant(1, +1)};
  model.network.rate_bound = rate;
  model.network.lambda = {[rate](CVecRef, CVecRef) { return rate; }};
  model.network.dlambda_dx = {[](CVecRef, CVecRef, Vec& out) { out.setZero(1); }};
  model.network.dlambda_du = {[](CVecRef, CVecRef, Vec& out) { out.setZero(0); }};
  model.m = 0;
  model.u0.resize(0);
  model.x0 = Vec::Constant(1, x0);
  model.scale = N;
  return model;
}

// Constant birth, linear death.  Still no slow block; useful for exactness
// checks where the stationary law is known.
inline PDMPModel birth_death_model(double birth, double death, long N,
                                   double x0 = 0.0) {
  if (birth < 0 || death < 0) throw ModelError("rates must be nonnegative");
  PDMPModel model;
  model.name = "birth-death";
  model.network.d = 1;
  model.network.M = 2;
  model.network.xi = {Eigen::VectorXi::Constant(1, +1),
                      Eigen::VectorXi::Constant(1, -1)};
  model.network.lambda = {
      [birth](CVecRef, CVecRef) { return birth; },
      [death](CVecRef x, CVecRef) { return death * std::max(x[0], 0.0); }};
  model.network.rate_bound = std::max(birth, death * (x0 + 100.0));
  model.m = 0;
  model.u0.resize(0);
  model.x0 = Vec::Constant(1, x0);
  model.scale = N;
  return model;
}

}  // namespace pdmp

#endif  // PDMP_MODELS_HPP
