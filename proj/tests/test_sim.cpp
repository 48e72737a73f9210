#include <cmath>

#include "doctest.h"
#include "fbopt/flows.hpp"
#include "fbopt/sim.hpp"

using namespace fbopt;
using convex::ConvexSet;
using flows::ScalarField;

namespace {
Vec scalar(double a) { return Vec::Constant(1, a); }
}  // namespace

TEST_SUITE("sim.integrate") {
  TEST_CASE("linear decay with RK4 hits the analytic endpoint") {
    auto field = [](double, const Vec& x) -> Vec { return -x; };
    sim::IntegratorConfig cfg;
    cfg.dt = 0.01;
    cfg.t_end = 1.0;
    auto res = sim::integrate(field, scalar(1.0), cfg);
    CHECK(res.status == sim::Status::TimeLimit);
    CHECK(res.trajectory.back()[0] == doctest::Approx(std::exp(-1.0)).epsilon(1e-6));
    CHECK(res.trajectory.times.back() == doctest::Approx(1.0));
  }

  TEST_CASE("zero field stays constant") {
    auto field = [](double, const Vec& x) -> Vec { return Vec::Zero(x.size()); };
    sim::IntegratorConfig cfg;
    cfg.dt = 0.1;
    cfg.t_end = 2.0;
    auto res = sim::integrate(field, scalar(3.5), cfg);
    for (const auto& x : res.trajectory.states) CHECK(x[0] == 3.5);
  }

  TEST_CASE("divergence is detected against the radius") {
    auto field = [](double, const Vec& x) -> Vec { return x; };
    sim::IntegratorConfig cfg;
    cfg.dt = 0.05;
    cfg.t_end = 100.0;
    cfg.divergence_radius = 1e3;
    auto res = sim::integrate(field, scalar(1.0), cfg);
    CHECK(res.status == sim::Status::Diverged);
    CHECK(res.t_final < 100.0);
  }

  TEST_CASE("convergence tolerance stops early") {
    auto field = [](double, const Vec& x) -> Vec { return -x; };
    sim::IntegratorConfig cfg;
    cfg.dt = 0.01;
    cfg.t_end = 1e3;
    cfg.convergence_tol = 1e-9;
    auto res = sim::integrate(field, scalar(1.0), cfg);
    CHECK(res.status == sim::Status::Converged);
    CHECK(res.t_final < 30.0);
  }

  TEST_CASE("RK4 order is at least ~3.5 on a smooth field") {
    auto field = [](double t, const Vec& x) -> Vec {
      Vec out(1);
      out[0] = -x[0] + std::sin(2.0 * t);
      return out;
    };
    auto endpoint = [&](double dt) {
      sim::IntegratorConfig cfg;
      cfg.dt = dt;
      cfg.t_end = 1.0;
      return sim::integrate(field, scalar(1.0), cfg).trajectory.back()[0];
    };
    double ref = endpoint(1e-4);
    double e1 = std::abs(endpoint(0.02) - ref);
    double e2 = std::abs(endpoint(0.01) - ref);
    double order = std::log2(e1 / e2);
    CHECK(order >= 3.5);
  }

  TEST_CASE("projection set keeps recorded states feasible") {
    auto box = ConvexSet::box(Vec::Zero(1), Vec::Ones(1));
    auto field = [](double, const Vec&) -> Vec { return scalar(5.0); };  // pushes out
    sim::IntegratorConfig cfg;
    cfg.method = sim::Method::Euler;
    cfg.dt = 0.1;
    cfg.t_end = 2.0;
    cfg.projection_set = box;
    auto res = sim::integrate(field, scalar(0.0), cfg);
    for (const auto& x : res.trajectory.states) CHECK(box.max_violation(x) <= 1e-10);
    CHECK(res.trajectory.back()[0] == 1.0);
  }

  TEST_CASE("Euler with re-projection reproduces projected gradient descent bitwise") {
    auto box = ConvexSet::box(Vec::Zero(2), Vec::Ones(2));
    auto phi = flows::quadratic_field(Mat::Identity(2, 2), Vec(Vec::Constant(2, -3.0)));
    auto field = flows::gradient_field(phi);
    const double alpha = 0.07;
    sim::IntegratorConfig cfg;
    cfg.method = sim::Method::Euler;
    cfg.dt = alpha;
    cfg.t_end = 10 * alpha;
    cfg.projection_set = box;
    Vec x0(2);
    x0 << 0.2, -0.4;
    auto res = sim::integrate(field, x0, cfg);
    // reference recursion x+ = P(x - alpha grad Phi(x)) on the same numbers
    Vec x = convex::project_point(box, x0);
    for (size_t k = 1; k < res.trajectory.size(); ++k) {
      x = convex::project_point(box, Vec(x + alpha * field(0.0, x)));
      CHECK(x == res.trajectory.states[k]);  // bitwise
    }
  }

  TEST_CASE("domain errors surface with the offending time") {
    auto field = [](double, const Vec& x) -> Vec {
      if (x[0] >= 0.999) throw OutOfDomain("wall");
      return scalar(1.0);
    };
    sim::IntegratorConfig cfg;
    cfg.method = sim::Method::Euler;
    cfg.dt = 0.1;
    cfg.t_end = 5.0;
    CHECK_THROWS_AS(sim::integrate(field, scalar(0.0), cfg), sim::FieldDomainError);
  }

  TEST_CASE("barrier trajectories stay interior via step rejection") {
    // barrier descent dx/dt = 1/x - 1/(1-x) on (0,1): equilibrium x = 1/2;
    // from x ~ 1 the first Euler steps overshoot past 0 without rejection.
    auto field = [](double, const Vec& x) -> Vec {
      if (x[0] <= 0.0 || x[0] >= 1.0) throw OutOfDomain("outside (0,1)");
      return scalar(1.0 / x[0] - 1.0 / (1.0 - x[0]));
    };
    sim::IntegratorConfig cfg;
    cfg.method = sim::Method::Euler;
    cfg.dt = 0.05;
    cfg.t_end = 3.0;
    auto res = sim::integrate(field, scalar(0.98), cfg);
    for (const auto& x : res.trajectory.states) {
      CHECK(x[0] > 0.0);
      CHECK(x[0] < 1.0);
    }
    CHECK(res.trajectory.back()[0] == doctest::Approx(0.5).epsilon(1e-3));
  }
}

TEST_SUITE("sim.check_gradient") {
  TEST_CASE("quadratic gradient is exact to roundoff") {
    auto phi = flows::quadratic_field(Mat::Identity(3, 3), Vec::Ones(3));
    Vec x(3);
    x << 0.3, -1.2, 2.0;
    CHECK(sim::check_gradient(phi, x) <= 1e-9);
  }

  TEST_CASE("two-well quartic at y = 0.5") {
    ScalarField phi;
    phi.value = [](const Vec& x) { return std::pow(x[0] * x[0] - 1.0, 2); };
    phi.gradient = [](const Vec& x) -> Vec {
      return Vec::Constant(1, 4.0 * x[0] * (x[0] * x[0] - 1.0));
    };
    CHECK(sim::check_gradient(phi, scalar(0.5)) <= 1e-6);
  }

  TEST_CASE("a planted 10% fault is detected") {
    ScalarField bad;
    bad.value = [](const Vec& x) { return 0.5 * x.squaredNorm(); };
    bad.gradient = [](const Vec& x) -> Vec { return 1.1 * x; };  // off by 10%
    double err = sim::check_gradient(bad, scalar(2.0));
    CHECK(err > 0.05);
    CHECK(err < 0.15);
  }
}

TEST_SUITE("sim.settle_time") {
  TEST_CASE("linear decay settles at log(1/tol)") {
    auto field = [](double, const Vec& x) -> Vec { return -x; };
    sim::IntegratorConfig cfg;
    cfg.dt = 1e-3;
    cfg.t_end = 3.0;
    auto res = sim::integrate(field, scalar(1.0), cfg);
    auto t = sim::settle_time(res.trajectory, Vec::Zero(1), std::exp(-1.0));
    REQUIRE(t.has_value());
    CHECK(*t == doctest::Approx(1.0).epsilon(1e-2));
  }

  TEST_CASE("constant trajectory at the target settles immediately") {
    sim::Trajectory traj;
    traj.times = {0.0, 0.5, 1.0};
    traj.states = {scalar(2.0), scalar(2.0), scalar(2.0)};
    auto t = sim::settle_time(traj, scalar(2.0), 1e-12);
    REQUIRE(t.has_value());
    CHECK(*t == 0.0);
  }

  TEST_CASE("diverging trajectory never settles") {
    auto field = [](double, const Vec& x) -> Vec { return x; };
    sim::IntegratorConfig cfg;
    cfg.dt = 0.01;
    cfg.t_end = 5.0;
    auto res = sim::integrate(field, scalar(1.0), cfg);
    CHECK(!sim::settle_time(res.trajectory, Vec::Zero(1), 0.5).has_value());
  }
}
