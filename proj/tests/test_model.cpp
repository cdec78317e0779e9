#include <catch2/catch_amalgamated.hpp>

#include "pdmp/calcium.hpp"
#include "pdmp/model.hpp"
#include "pdmp/models.hpp"
#include "pdmp/philox.hpp"

using namespace pdmp;

namespace {

SamplingBox calcium_box() {
  SamplingBox box;
  box.x_lo = Vec::Constant(1, 0.0);
  box.x_hi = Vec::Constant(1, 1.0);
  box.u_lo = Vec::Zero(2);
  box.u_hi = Vec::Constant(2, 10.0);
  return box;
}

}  // namespace

TEST_CASE("structural validation rejects malformed networks") {
  ReactionNetwork net;
  net.d = 1;
  net.M = 0;
  CHECK_THROWS_AS(net.check_structure(), ModelError);

  net.M = 1;
  net.xi = {Eigen::VectorXi::Zero(1)};
  net.lambda = {[](CVecRef, CVecRef) { return 1.0; }};
  CHECK_THROWS_AS(net.check_structure(), ModelError);  // zero reaction vector

  net.xi = {Eigen::VectorXi::Constant(2, 1)};
  CHECK_THROWS_AS(net.check_structure(), ModelError);  // dimension mismatch
}

TEST_CASE("validate_network passes the calcium model on its box") {
  CalciumParams p;
  auto model = calcium_model(p);
  auto rep = validate_network(model.network, calcium_box(), 2000);
  CHECK(rep.passed);
  CHECK(rep.max_rate <= model.network.rate_bound);
  CHECK(rep.max_rate > 0.0);
}

TEST_CASE("validate_network flags a negative constant rate") {
  ReactionNetwork net;
  net.d = 1;
  net.M = 1;
  net.xi = {Eigen::VectorXi::Constant(1, +1)};
  net.lambda = {[](CVecRef, CVecRef) { return -1.0; }};
  net.rate_bound = 1.0;
  SamplingBox box;
  box.x_lo = Vec::Zero(1);
  box.x_hi = Vec::Ones(1);
  box.u_lo.resize(0);
  box.u_hi.resize(0);
  auto rep = validate_network(net, box, 100);
  CHECK_FALSE(rep.passed);
  REQUIRE_FALSE(rep.issues.empty());
  CHECK(rep.issues.front().what.find("negative") != std::string::npos);
}

TEST_CASE("validate_network flags a broken positivity guard") {
  ReactionNetwork net;
  net.d = 1;
  net.M = 1;
  net.xi = {Eigen::VectorXi::Constant(1, -1)};  // consumes the species
  net.lambda = {[](CVecRef, CVecRef) { return 1.0; }};  // but never vanishes
  net.rate_bound = 1.0;
  SamplingBox box;
  box.x_lo = Vec::Zero(1);
  box.x_hi = Vec::Ones(1);
  box.u_lo.resize(0);
  box.u_hi.resize(0);
  auto rep = validate_network(net, box, 100);
  CHECK_FALSE(rep.passed);
  REQUIRE_FALSE(rep.issues.empty());
  CHECK(rep.issues.front().what.find("positivity") != std::string::npos);
}

TEST_CASE("intensity matches the calcium closures") {
  CalciumParams p;
  p.alpha_close = 2.0;
  auto model = calcium_model(p);
  Vec u = model.u0;

  CHECK(intensity(model.network, Vec::Constant(1, 0.5), u, 0) == Catch::Approx(1.0));
  CHECK(intensity(model.network, Vec::Constant(1, 1.0), u, 1) == 0.0);

  CalciumParams q;
  q.alpha_open = 5.0;
  auto model2 = calcium_model(q);
  Vec u2(2);
  u2 << 0.8, reduce_u2(q, 0.8);
  CHECK(intensity(model2.network, Vec::Constant(1, 0.25), u2, 1) == Catch::Approx(3.0));
}

TEST_CASE("apply_reaction updates z and x by 1/N steps") {
  CalciumParams p;
  p.x0 = 0.5;
  p.N = 10;
  auto model = calcium_model(p);
  auto s = initial_state(model);

  auto s2 = apply_reaction(s, model.network, 1, model.scale);
  CHECK(s2.x[0] == Catch::Approx(0.6).margin(1e-15));
  CHECK(s2.z[1] == Catch::Approx(0.1).margin(1e-15));
  CHECK(s2.z[0] == 0.0);
  CHECK(s2.u == s.u);

  // fire 1 then 2: x returns to start, both counters advanced
  auto s3 = apply_reaction(apply_reaction(s, model.network, 0, 10), model.network, 1, 10);
  CHECK(s3.x[0] == Catch::Approx(0.5).margin(1e-12));
  CHECK(s3.z[0] == Catch::Approx(0.1));
  CHECK(s3.z[1] == Catch::Approx(0.1));
}

TEST_CASE("apply_reaction in two species moves mass across coordinates") {
  ReactionNetwork net;
  net.d = 2;
  net.M = 1;
  Eigen::VectorXi xi(2);
  xi << 1, -1;
  net.xi = {xi};
  net.lambda = {[](CVecRef x, CVecRef) { return std::max(x[1], 0.0); }};
  net.rate_bound = 1.0;

  HybridState s;
  s.z = Vec::Zero(1);
  s.x = Vec::Zero(2);
  s.x << 0.0, 0.25;
  s.u.resize(0);
  auto s2 = apply_reaction(s, net, 0, 4);
  CHECK(s2.x[0] == Catch::Approx(0.25));
  CHECK(s2.x[1] == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("apply_reaction reports violated positivity as an error") {
  ReactionNetwork net;
  net.d = 1;
  net.M = 1;
  net.xi = {Eigen::VectorXi::Constant(1, -1)};
  net.lambda = {[](CVecRef, CVecRef) { return 1.0; }};
  net.rate_bound = 1.0;
  HybridState s;
  s.z = Vec::Zero(1);
  s.x = Vec::Zero(1);
  s.u.resize(0);
  CHECK_THROWS_AS(apply_reaction(s, net, 0, 10), ModelError);
}

TEST_CASE("linear-constraint identity holds along random firing sequences") {
  CalciumParams p;
  p.x0 = 0.5;
  p.N = 40;  // x0 on the 1/N grid, as for any N-system state
  auto model = calcium_model(p);
  Philox rng(99, 0);
  auto s = initial_state(model);
  for (int k = 0; k < 5000; ++k) {
    int a = rng.uniform() < 0.5 ? 0 : 1;
    // respect guards: skip reactions whose rate vanishes at the boundary
    if (model.network.lambda[a](s.x, s.u) <= 1e-9) continue;
    s = apply_reaction(s, model.network, a, model.scale);
    CHECK(s.x[0] >= 0.0);
  }
  Vec resid = s.x - model.x0;
  for (int a = 0; a < model.network.M; ++a)
    resid -= s.z[a] * model.network.xi[a].cast<double>();
  CHECK(resid.lpNorm<Eigen::Infinity>() <= 1e-10);
}

TEST_CASE("intensity evaluation is bit-deterministic") {
  CalciumParams p;
  auto model = calcium_model(p);
  Vec x = Vec::Constant(1, 0.37);
  Vec u(2);
  u << 1.1, 4.3;
  double first = intensity(model.network, x, u, 1);
  for (int k = 0; k < 100; ++k)
    REQUIRE(intensity(model.network, x, u, 1) == first);
}

TEST_CASE("finite-difference rate gradients agree with analytic ones") {
  CalciumParams p;
  auto model = calcium_model(p);
  auto generic = model.network;
  generic.dlambda_dx.clear();
  generic.dlambda_du.clear();

  Vec x = Vec::Constant(1, 0.4), u(2);
  u << 1.3, 3.5;
  Vec ga, gf;
  for (int a = 0; a < 2; ++a) {
    rate_grad_x(model.network, a, x, u, ga);
    rate_grad_x(generic, a, x, u, gf);
    CHECK((ga - gf).lpNorm<Eigen::Infinity>() < 1e-7);
    rate_grad_u(model.network, a, x, u, ga);
    rate_grad_u(generic, a, x, u, gf);
    CHECK((ga - gf).lpNorm<Eigen::Infinity>() < 1e-7);
  }
}
