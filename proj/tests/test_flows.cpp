#include <cmath>
#include <random>

#include "doctest.h"
#include "fbopt/flows.hpp"
#include "fbopt/sim.hpp"
#include "oracles.hpp"

using namespace fbopt;
using convex::ConvexSet;
using convex::Metric;
using flows::ConstraintMap;
using flows::ScalarField;
using flows::SaddleSystem;

namespace {

Vec vec2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}

Vec scalar(double a) { return Vec::Constant(1, a); }

// Phi(y) = (y^2 - 1)^2, the two-well benchmark objective.
ScalarField quartic_two_well() {
  ScalarField phi;
  phi.value = [](const Vec& x) { return std::pow(x[0] * x[0] - 1.0, 2); };
  phi.gradient = [](const Vec& x) -> Vec {
    return Vec::Constant(1, 4.0 * x[0] * (x[0] * x[0] - 1.0));
  };
  phi.hessian = [](const Vec& x) -> Mat {
    return Mat::Constant(1, 1, 12.0 * x[0] * x[0] - 4.0);
  };
  return phi;
}

Mat random_spd(std::mt19937& rng, int n) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Mat R(n, n);
  for (int i = 0; i < n * n; ++i) R(i / n, i % n) = gauss(rng);
  return R * R.transpose() + 0.3 * Mat::Identity(n, n);
}

}  // namespace

TEST_SUITE("flows.gradient") {
  TEST_CASE("euclidean gradient of the sphere") {
    auto phi = flows::quadratic_field(Mat::Identity(2, 2), Vec::Zero(2));
    auto field = flows::gradient_field(phi);
    CHECK(field(0.0, vec2(3, -1)).isApprox(vec2(-3, 1)));
  }

  TEST_CASE("two-well objective at y = 0.5") {
    // grad Phi = 4y(y^2-1) = 4*0.5*(-0.75) = -1.5, so the field is +1.5
    auto field = flows::gradient_field(quartic_two_well());
    CHECK(field(0.0, scalar(0.5))[0] == doctest::Approx(1.5).epsilon(1e-12));
  }

  TEST_CASE("newton flow on a strongly convex quadratic is -x") {
    std::mt19937 rng(21);
    for (int k = 0; k < 5; ++k) {
      Mat H = random_spd(rng, 3);
      auto phi = flows::quadratic_field(H, Vec::Zero(3));
      auto field = flows::gradient_field(phi, flows::newton_metric(phi));
      Vec x = vec2(1, 2).replicate(1, 1).eval();
      Vec x3(3);
      x3 << 1, -2, 0.5;
      CHECK(field(0.0, x3).isApprox(-x3, 1e-10));
    }
  }

  TEST_CASE("newton metric throws on an indefinite Hessian") {
    auto phi = quartic_two_well();
    auto metric = flows::newton_metric(phi);
    CHECK_THROWS_AS(metric.eval(scalar(0.0)), SingularHessian);  // hess = -4 < 0
  }

  TEST_CASE("metric invariance of equilibria") {
    // Equilibria of -Q grad(x) located by integration from a seed grid match
    // the Euclidean ones for random constant SPD metrics.
    ScalarField phi;
    phi.value = [](const Vec& x) {
      return std::pow(x[0] * x[0] - 1.0, 2) + 0.5 * x[1] * x[1];
    };
    phi.gradient = [](const Vec& x) -> Vec {
      return vec2(4.0 * x[0] * (x[0] * x[0] - 1.0), x[1]);
    };
    std::mt19937 rng(5);
    std::vector<Vec> seeds = {vec2(0.8, 0.5), vec2(-0.7, -0.4), vec2(1.4, 1.0)};
    sim::IntegratorConfig cfg;
    cfg.dt = 2e-3;
    cfg.t_end = 60.0;
    for (int k = 0; k < 10; ++k) {
      auto metric = Metric::constant(random_spd(rng, 2));
      for (const Vec& s : seeds) {
        auto eucl = sim::integrate(flows::gradient_field(phi), s, cfg);
        auto warped = sim::integrate(flows::gradient_field(phi, metric), s, cfg);
        Vec a = eucl.trajectory.back();
        Vec bq = warped.trajectory.back();
        CHECK(phi.gradient(a).norm() <= 1e-6);
        CHECK(phi.gradient(bq).norm() <= 1e-6);
        CHECK((a - bq).norm() <= 1e-6);  // same critical point reached
      }
    }
  }
}

TEST_SUITE("flows.penalty_barrier") {
  TEST_CASE("penalty value and gradient") {
    auto g = flows::affine_map(Mat::Identity(1, 1), Vec::Constant(1, -1.0));  // x - 1
    auto pen = flows::penalty_term(g, 2.0);
    CHECK(pen.value(scalar(0.0)) == 0.0);
    CHECK(pen.gradient(scalar(0.0)).norm() == 0.0);
    CHECK(pen.value(scalar(2.0)) == doctest::Approx(1.0));
    CHECK(pen.gradient(scalar(2.0))[0] == doctest::Approx(2.0));
  }

  TEST_CASE("inactive rows do not contribute") {
    Mat A(2, 1);
    A << 1, 1;
    Vec c(2);
    c << -1, -10;  // rows x-1, x-10
    auto pen = flows::penalty_term(flows::affine_map(A, c), 3.0);
    // at x = 2 only the first row is active: grad = rho * (x-1) = 3
    CHECK(pen.gradient(scalar(2.0))[0] == doctest::Approx(3.0));
  }

  TEST_CASE("barrier value, asymptote, and domain error") {
    auto g = flows::affine_map(Mat::Identity(1, 1), Vec::Constant(1, -1.0));  // x - 1
    auto bar = flows::barrier_term(g, 1.0);
    CHECK(bar.value(scalar(0.0)) == doctest::Approx(0.0));
    CHECK(bar.value(scalar(0.999)) > 6.0);
    CHECK(bar.gradient(scalar(0.999))[0] > 100.0);
    CHECK_THROWS_AS(bar.value(scalar(1.5)), OutOfDomain);
    CHECK_THROWS_AS(bar.value(scalar(1.0)), OutOfDomain);
  }

  TEST_CASE("penalty/barrier gradients pass finite differences") {
    Mat A(2, 2);
    A << 1, 1, -1, 2;
    Vec c(2);
    c << -2, -3;
    auto g = flows::affine_map(A, c);
    auto pen = flows::penalty_term(g, 5.0);
    auto bar = flows::barrier_term(g, 2.0);
    CHECK(sim::check_gradient(pen, vec2(3.0, 1.0)) <= 1e-6);
    CHECK(sim::check_gradient(bar, vec2(0.0, 0.0)) <= 1e-6);
  }
}

TEST_SUITE("flows.projected") {
  // feasible set {x2 >= 0, x2 >= x1} and a convex quadratic with infeasible
  // unconstrained minimum (2, -1); constrained minimizer is the origin.
  ConvexSet mechanism_set() {
    Mat A(2, 2);
    A << 0, -1, 1, -1;
    return ConvexSet::polyhedron(A, Vec::Zero(2));
  }
  ScalarField mechanism_cost() {
    Mat H(2, 2);
    H << 1, 0, 0, 2;
    return flows::quadratic_field(H, vec2(-2, 2));  // min at (2, -1)
  }

  TEST_CASE("interior point matches the plain gradient field") {
    auto phi = mechanism_cost();
    auto set = mechanism_set();
    auto pf = flows::projected_gradient_field(phi, set);
    auto gf = flows::gradient_field(phi);
    Vec x = vec2(-1.0, 2.0);
    CHECK(pf(0.0, x).isApprox(gf(0.0, x)));
  }

  TEST_CASE("boundary point keeps only the tangential component") {
    auto phi = mechanism_cost();
    auto set = mechanism_set();
    auto pf = flows::projected_gradient_field(phi, set);
    Vec x = vec2(-1.0, 0.0);  // on the face x2 = 0, gradient pushes outward
    Vec raw = -phi.gradient(x);
    REQUIRE(raw[1] < 0.0);
    Vec v = pf(0.0, x);
    CHECK(v[1] == doctest::Approx(0.0));
    CHECK(v[0] == doctest::Approx(raw[0]));
    // agrees with the projection oracle
    Vec expect = convex::project_tangent(set, x, raw);
    CHECK(v.isApprox(expect, 1e-12));
  }

  TEST_CASE("field vanishes at the KKT point") {
    auto phi = mechanism_cost();
    auto set = mechanism_set();
    // KKT at the origin: grad = (-2, 2), multipliers (0, 2) on rows
    // (0,-1), (1,-1): (-2,2) + 2*(1,-1)... = 0 with the sign convention
    // grad + sum lambda_i a_i = 0.
    auto pf = flows::projected_gradient_field(phi, set);
    CHECK(pf(0.0, Vec::Zero(2)).norm() <= 1e-9);
  }

  TEST_CASE("descent and feasibility along integrated trajectories") {
    auto phi = mechanism_cost();
    auto set = mechanism_set();
    auto pf = flows::projected_gradient_field(phi, set);
    sim::IntegratorConfig cfg;
    cfg.method = sim::Method::Euler;
    cfg.dt = 1e-3;
    cfg.t_end = 8.0;
    cfg.projection_set = set;
    auto res = sim::integrate(pf, vec2(-1.0, 2.0), cfg);
    for (size_t k = 0; k < res.trajectory.size(); k += 100) {
      const Vec& x = res.trajectory.states[k];
      CHECK(set.max_violation(x) <= 1e-10);
      CHECK(phi.gradient(x).dot(pf(0.0, x)) <= 1e-9);  // <grad, field> <= 0
    }
    CHECK((res.trajectory.back() - Vec::Zero(2)).norm() <= 1e-3);
  }

  TEST_CASE("oblique flow equilibria are still KKT points") {
    auto phi = mechanism_cost();
    auto set = mechanism_set();
    std::mt19937 rng(17);
    for (int k = 0; k < 5; ++k) {
      auto metric = Metric::constant(random_spd(rng, 2));
      auto pf = flows::projected_gradient_field(phi, set, metric);
      CHECK(pf(0.0, Vec::Zero(2)).norm() <= 1e-9);
      // and <grad, field> <= 0 away from the equilibrium
      Vec x = vec2(-1.0, 0.0);
      CHECK(phi.gradient(x).dot(pf(0.0, x)) <= 1e-12);
    }
  }
}

TEST_SUITE("flows.saddle") {
  TEST_CASE("equality-constrained quadratic reaches the KKT point") {
    // min 1/2||x||^2 s.t. x1 + x2 = 1: x* = (1/2, 1/2), nu* = -1/2
    SaddleSystem sys;
    sys.n = 2;
    sys.objective = flows::quadratic_field(Mat::Identity(2, 2), Vec::Zero(2));
    sys.eq = flows::affine_map(Mat::Ones(1, 2), Vec::Constant(1, -1.0));
    auto field = flows::saddle_field(sys);
    Vec star(3);
    star << 0.5, 0.5, -0.5;
    CHECK(field(0.0, star).norm() <= 1e-12);

    sim::IntegratorConfig cfg;
    cfg.dt = 1e-3;
    cfg.t_end = 100.0;
    cfg.convergence_tol = 1e-9;
    auto res = sim::integrate(field, Vec::Zero(3), cfg);
    CHECK(res.status == sim::Status::Converged);
    CHECK((res.trajectory.back() - star).norm() <= 1e-6);
  }

  TEST_CASE("orthant projection kills inward-negative dual drift") {
    SaddleSystem sys;
    sys.n = 1;
    sys.objective = flows::quadratic_field(Mat::Identity(1, 1), Vec::Zero(1));
    sys.ineq = flows::affine_map(Mat::Identity(1, 1), Vec::Constant(1, -1.0));  // x - 1 <= 0
    auto field = flows::saddle_field(sys);
    Vec z(2);
    z << 0.0, 0.0;  // mu = 0, g(x) = -1 < 0
    CHECK(field(0.0, z)[1] == 0.0);
  }

  TEST_CASE("dual regularization perturbs the equilibrium as analyzed") {
    // min 1/2 u^2 s.t. 1 - u <= 0. With damping rho_dual the equilibrium
    // satisfies mu (g - rho_dual mu) = 0, so x = mu = 1/(1 + rho_dual).
    const double rho_hat = 0.25;
    SaddleSystem sys;
    sys.n = 1;
    sys.objective = flows::quadratic_field(Mat::Identity(1, 1), Vec::Zero(1));
    Mat A = -Mat::Identity(1, 1);
    sys.ineq = flows::affine_map(A, Vec::Constant(1, 1.0));
    sys.rho_dual = rho_hat;
    auto field = flows::saddle_field(sys);
    sim::IntegratorConfig cfg;
    cfg.dt = 1e-3;
    cfg.t_end = 60.0;
    cfg.convergence_tol = 1e-11;
    Vec z0(2);
    z0 << 2.0, 0.5;
    auto res = sim::integrate(field, z0, cfg);
    Vec z = res.trajectory.back();
    double expect = 1.0 / (1.0 + rho_hat);
    CHECK(z[0] == doctest::Approx(expect).epsilon(1e-5));
    CHECK(z[1] == doctest::Approx(expect).epsilon(1e-5));
    double g = 1.0 - z[0];
    CHECK(std::abs(z[1] * (g - rho_hat * z[1])) <= 1e-6);
  }

  TEST_CASE("PI analogy: penalty-augmented saddle equals gradient flow plus coupling") {
    std::mt19937 rng(9);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double rho = 3.0;
    Mat A(2, 3);
    Vec b(2);
    for (int i = 0; i < 6; ++i) A(i / 3, i % 3) = gauss(rng);
    b << gauss(rng), gauss(rng);
    Mat H = random_spd(rng, 3);
    auto phi = flows::quadratic_field(H, Vec::Zero(3));

    SaddleSystem sys;
    sys.n = 3;
    sys.objective = phi;
    sys.eq = flows::affine_map(A, Vec(-b));
    sys.rho_primal = rho;
    auto sfield = flows::saddle_field(sys);

    // gradient field of Phi + rho/2 ||Ax-b||^2
    auto augmented = flows::add_fields(
        phi, flows::quadratic_field(Mat(rho * A.transpose() * A), Vec(-rho * A.transpose() * b),
                                    0.5 * rho * b.squaredNorm()));
    auto gfield = flows::gradient_field(augmented);

    for (int k = 0; k < 20; ++k) {
      Vec x(3), nu(2);
      for (int i = 0; i < 3; ++i) x[i] = gauss(rng);
      for (int i = 0; i < 2; ++i) nu[i] = gauss(rng);
      Vec z(5);
      z << x, nu;
      Vec rate = sfield(0.0, z);
      Vec expect_x = gfield(0.0, x) - A.transpose() * nu;
      CHECK((rate.head(3) - expect_x).norm() <= 1e-12 * (1.0 + expect_x.norm()));
      CHECK((rate.tail(2) - (A * x - b)).norm() <= 1e-12);
    }
  }

  TEST_CASE("projected saddle flow with inequality reaches KKT") {
    // min 1/2||x - (2,2)||^2 s.t. x1 + x2 <= 1: x* = (1/2, 1/2), mu* = 3/2
    SaddleSystem sys;
    sys.n = 2;
    sys.objective = flows::quadratic_field(Mat::Identity(2, 2), vec2(-2, -2));
    sys.ineq = flows::affine_map(Mat::Ones(1, 2), Vec::Constant(1, -1.0));
    auto field = flows::saddle_field(sys);
    sim::IntegratorConfig cfg;
    cfg.dt = 1e-3;
    cfg.t_end = 80.0;
    cfg.convergence_tol = 1e-8;
    auto res = sim::integrate(field, Vec::Zero(3), cfg);
    Vec z = res.trajectory.back();
    CHECK(z[0] == doctest::Approx(0.5).epsilon(1e-5));
    CHECK(z[1] == doctest::Approx(0.5).epsilon(1e-5));
    CHECK(z[2] == doctest::Approx(1.5).epsilon(1e-5));
  }
}
