#include <cmath>
#include <random>

#include "doctest.h"
#include "fbopt/plants.hpp"

using namespace fbopt;
using convex::ConvexSet;
using plants::DynamicPlant;
using plants::Signal;

namespace {
Vec scalar(double a) { return Vec::Constant(1, a); }
}  // namespace

TEST_SUITE("plants.benchmark") {
  TEST_CASE("a=2, b=25 gives eigenvalues -1 +- i sqrt(24)") {
    auto p = plants::second_order_benchmark(2.0, 25.0);
    // companion form A = [0 1; -b -a]
    Mat A(2, 2);
    A << 0, 1, -25, -2;
    Eigen::EigenSolver<Mat> es(A);
    for (int i = 0; i < 2; ++i) {
      CHECK(es.eigenvalues()[i].real() == doctest::Approx(-1.0).epsilon(1e-9));
      CHECK(std::abs(es.eigenvalues()[i].imag()) == doctest::Approx(std::sqrt(24.0)));
    }
    // the plant's own dynamics agree with the companion matrix
    Vec z(2);
    z << 0.3, -0.7;
    CHECK(p.dynamics(z, Vec::Zero(1)).isApprox(A * z));
  }

  TEST_CASE("step input settles at y = u") {
    auto p = plants::second_order_benchmark(2.0, 25.0);
    Vec zeta = plants::settle(p, scalar(1.0), Vec::Zero(2));
    CHECK(p.output(zeta)[0] == doctest::Approx(1.0).epsilon(1e-8));
    CHECK(std::abs(zeta[1]) <= 1e-8);
  }

  TEST_CASE("steady state drifts less than 1e-8 over 10 time units") {
    auto p = plants::second_order_benchmark(2.0, 25.0);
    Vec u = scalar(0.7);
    Vec zeta = plants::settle(p, u, Vec::Zero(2));
    auto field = [&](double, const Vec& z) -> Vec { return p.dynamics(z, u); };
    sim::IntegratorConfig cfg;
    cfg.dt = 1e-3;
    cfg.t_end = 10.0;
    auto res = sim::integrate(field, zeta, cfg);
    CHECK((res.trajectory.back() - zeta).norm() <= 1e-8);
  }
}

TEST_SUITE("plants.lti") {
  TEST_CASE("scalar plant has H = 1") {
    auto lti = plants::lti_plant(-Mat::Identity(1, 1), Mat::Identity(1, 1), Mat::Identity(1, 1),
                                 Mat::Zero(1, 1), Vec::Zero(1));
    CHECK(lti.steady_state.sensitivity(Vec::Zero(1))(0, 0) == doctest::Approx(1.0));
    CHECK(lti.steady_state.h(scalar(2.0))[0] == doctest::Approx(2.0));
  }

  TEST_CASE("A=-I2 gives H = I") {
    auto lti = plants::lti_plant(-Mat::Identity(2, 2), Mat::Identity(2, 2), Mat::Identity(2, 2),
                                 Mat::Zero(2, 2), Vec::Zero(2));
    CHECK(lti.steady_state.sensitivity(Vec::Zero(2)).isApprox(Mat::Identity(2, 2)));
  }

  TEST_CASE("random stable 3x3 matches settled finite differences") {
    std::mt19937 rng(13);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Mat M(3, 3);
    for (int i = 0; i < 9; ++i) M(i / 3, i % 3) = gauss(rng);
    Mat A = -(M * M.transpose() + 0.5 * Mat::Identity(3, 3));  // symmetric Hurwitz
    Mat B(3, 2), C(2, 3);
    for (int i = 0; i < 6; ++i) {
      B(i / 2, i % 2) = gauss(rng);
      C(i / 3, i % 3) = gauss(rng);
    }
    Vec d(2);
    d << 0.3, -0.1;
    auto lti = plants::lti_plant(A, B, C, Mat::Zero(2, 2), d);
    Vec u(2);
    u << 0.5, -1.0;
    plants::SettleOptions opt;
    opt.dt = 2e-3;
    Mat S = plants::estimate_sensitivity(lti.plant, u, 0.0, opt);
    CHECK((S - lti.steady_state.sensitivity(u)).norm() <= 1e-6);
  }

  TEST_CASE("non-Hurwitz A is rejected") {
    Mat A(2, 2);
    A << 0.1, 0, 0, -1;
    CHECK_THROWS_AS(plants::lti_plant(A, Mat::Identity(2, 2), Mat::Identity(2, 2),
                                      Mat::Zero(2, 2), Vec::Zero(2)),
                    NotStable);
  }
}

TEST_SUITE("plants.sensitivity") {
  TEST_CASE("benchmark plant has unit sensitivity at any input") {
    auto p = plants::second_order_benchmark(2.0, 25.0);
    for (double u : {-1.0, 0.0, 2.5}) {
      Mat S = plants::estimate_sensitivity(p, scalar(u));
      CHECK(S(0, 0) == doctest::Approx(1.0).epsilon(1e-6));
    }
  }

  TEST_CASE("unstable plant reports NoSettle") {
    DynamicPlant p;
    p.state_dim = 1;
    p.input_dim = 1;
    p.output_dim = 1;
    p.dynamics = [](const Vec& z, const Vec&) -> Vec { return z.cwiseMax(0.1); };
    p.output = [](const Vec& z) -> Vec { return z; };
    p.disturbance = Signal::zero(1);
    CHECK_THROWS_AS(plants::estimate_sensitivity(p, scalar(0.0)), NoSettle);
  }

  TEST_CASE("additive disturbance shifts h but not the sensitivity") {
    std::mt19937 rng(19);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Mat A(2, 2);
    A << -2, 0.3, 0.1, -1.5;
    Mat B(2, 1), C(1, 2);
    B << 1, 0.5;
    C << 1, -1;
    Vec u = scalar(0.4);
    Mat S_ref;
    Vec h_ref;
    for (int k = 0; k < 3; ++k) {
      Vec d = scalar(gauss(rng));
      auto lti = plants::lti_plant(A, B, C, Mat::Zero(1, 1), d);
      Mat S = plants::estimate_sensitivity(lti.plant, u);
      Vec zeta = plants::settle(lti.plant, u, Vec::Zero(2));
      Vec y = lti.plant.measure(zeta, 0.0);
      if (k == 0) {
        S_ref = S;
        h_ref = y - d;
      } else {
        CHECK((S - S_ref).norm() <= 1e-6);          // sensitivity unchanged
        CHECK((y - d - h_ref).norm() <= 1e-7);      // h(u) + d shifts with d
      }
    }
  }
}

TEST_SUITE("plants.saturation") {
  TEST_CASE("inner plant receives the projected input exactly") {
    auto box = ConvexSet::box(scalar(-1.0), scalar(1.0));
    DynamicPlant probe;
    probe.state_dim = 1;
    probe.input_dim = 1;
    probe.output_dim = 1;
    auto seen = std::make_shared<Vec>(Vec::Zero(1));
    probe.dynamics = [seen](const Vec& z, const Vec& u) -> Vec {
      *seen = u;
      return -z;
    };
    probe.output = [](const Vec& z) -> Vec { return z; };
    probe.disturbance = Signal::zero(1);
    auto sat = plants::saturate(probe, box);
    for (double u : {-3.0, -0.2, 0.9, 7.0}) {
      sat.dynamics(Vec::Zero(1), scalar(u));
      Vec expect = convex::project_point(box, scalar(u));
      CHECK((*seen)[0] == expect[0]);
    }
  }

  TEST_CASE("piecewise-constant signals step at their timestamps") {
    auto s = Signal::steps({0.0, 1.0, 2.5}, {scalar(0.0), scalar(1.0), scalar(-2.0)});
    CHECK(s.value(0.0)[0] == 0.0);
    CHECK(s.value(0.999)[0] == 0.0);
    CHECK(s.value(1.0)[0] == 1.0);
    CHECK(s.value(2.4999)[0] == 1.0);
    CHECK(s.value(3.0)[0] == -2.0);
  }
}
