#pragma once

// Tutorial reproductions: the six-mechanism constraint-enforcement comparison
// on a 2-d quadratic, the two-well gain sweep with its stability threshold,
// and metric/Newton-flow phase portraits.

#include <cmath>
#include <random>
#include <vector>

#include "fbopt/controllers.hpp"
#include "fbopt/convex.hpp"
#include "fbopt/core.hpp"
#include "fbopt/flows.hpp"
#include "fbopt/plants.hpp"
#include "fbopt/sim.hpp"

namespace fbopt::scenarios {

// ---------------------------------------------------------------------------
// Shared testbed: minimize 1/2 (x - c)^T H (x - c), H = diag(1, 2),
// c = (2, -1), subject to x2 >= 0 and x2 >= x1. The unconstrained minimum is
// infeasible; the constrained minimizer is the origin with multiplier (0, 2).

struct MechanismProblem {
  flows::ScalarField cost;
  flows::ConstraintMap g;  // rows: -x2 <= 0, x1 - x2 <= 0
  convex::ConvexSet set;
  Vec x0;
  Vec minimizer;
};

inline MechanismProblem mechanism_problem() {
  MechanismProblem mp;
  Mat H(2, 2);
  H << 1, 0, 0, 2;
  Vec c(2);
  c << 2, -1;
  mp.cost = flows::quadratic_field(H, Vec(-H * c), 0.5 * c.dot(H * c));
  Mat A(2, 2);
  A << 0, -1, 1, -1;
  mp.g = flows::affine_map(A, Vec::Zero(2));
  mp.set = convex::ConvexSet::polyhedron(A, Vec::Zero(2));
  mp.x0 = Vec(2);
  mp.x0 << -1.0, 2.0;
  mp.minimizer = Vec::Zero(2);
  return mp;
}

struct PanelResult {
  sim::Trajectory traj;
  double max_violation = 0.0;
  double final_violation = 0.0;
  Vec final_state;
  bool strictly_feasible = true;  // every recorded sample satisfies g < 0
};

namespace detail {

inline PanelResult summarize_panel(const MechanismProblem& mp, sim::IntegrationResult r,
                                   int primal_dim) {
  PanelResult out;
  out.traj = std::move(r.trajectory);
  for (const auto& z : out.traj.states) {
    Vec gv = mp.g.value(z.head(primal_dim));
    out.max_violation = std::max(out.max_violation, gv.maxCoeff());
    if (gv.maxCoeff() >= 0.0) out.strictly_feasible = false;
  }
  out.final_state = out.traj.back();
  out.final_violation = std::max(mp.g.value(out.final_state.head(primal_dim)).maxCoeff(), 0.0);
  return out;
}

}  // namespace detail

// (a) penalty-augmented gradient flow.
inline PanelResult penalty_panel(const MechanismProblem& mp, double rho, double dt = 1e-3,
                                 double t_end = 60.0) {
  auto aug = flows::add_fields(mp.cost, flows::penalty_term(mp.g, rho));
  sim::IntegratorConfig cfg;
  cfg.dt = dt;
  cfg.t_end = t_end;
  cfg.convergence_tol = 1e-12;
  return detail::summarize_panel(mp, sim::integrate(flows::gradient_field(aug), mp.x0, cfg,
                                                    {"x1", "x2"}),
                                 2);
}

// (b) barrier-augmented gradient flow (kept interior by step rejection).
inline PanelResult barrier_panel(const MechanismProblem& mp, double mu = 20.0, double dt = 1e-3,
                                 double t_end = 60.0) {
  auto aug = flows::add_fields(mp.cost, flows::barrier_term(mp.g, mu));
  sim::IntegratorConfig cfg;
  cfg.method = sim::Method::Euler;
  cfg.dt = dt;
  cfg.t_end = t_end;
  return detail::summarize_panel(mp, sim::integrate(flows::gradient_field(aug), mp.x0, cfg,
                                                    {"x1", "x2"}),
                                 2);
}

// (c)/(d) saddle-point flow, plain (rho = 0) or penalty-augmented.
inline PanelResult saddle_panel(const MechanismProblem& mp, double rho, double dt = 1e-3,
                                double t_end = 120.0) {
  flows::SaddleSystem sys;
  sys.n = 2;
  sys.objective = mp.cost;
  sys.ineq = mp.g;
  sys.rho_primal = rho;
  sim::IntegratorConfig cfg;
  cfg.method = sim::Method::Euler;
  cfg.dt = dt;
  cfg.t_end = t_end;
  Vec lo = Vec::Constant(4, -kInf);
  lo[2] = 0.0;
  lo[3] = 0.0;
  cfg.projection_set = convex::ConvexSet::box(lo, Vec::Constant(4, kInf));
  Vec z0 = Vec::Zero(4);
  z0.head(2) = mp.x0;
  return detail::summarize_panel(
      mp, sim::integrate(flows::saddle_field(sys), z0, cfg, {"x1", "x2", "mu1", "mu2"}), 2);
}

// (e) projected gradient flow (Euler + re-projection).
inline PanelResult projected_panel(const MechanismProblem& mp, double dt = 1e-3,
                                   double t_end = 30.0) {
  auto field = flows::projected_gradient_field(mp.cost, mp.set);
  sim::IntegratorConfig cfg;
  cfg.method = sim::Method::Euler;
  cfg.dt = dt;
  cfg.t_end = t_end;
  cfg.projection_set = mp.set;
  return detail::summarize_panel(mp, sim::integrate(field, mp.x0, cfg, {"x1", "x2"}), 2);
}

// (f) mixed: x2 >= 0 enforced by projection, x2 >= x1 dualized.
inline PanelResult mixed_panel(const MechanismProblem& mp, double dt = 1e-3,
                               double t_end = 120.0) {
  flows::SaddleSystem sys;
  sys.n = 2;
  sys.objective = mp.cost;
  Mat A(1, 2);
  A << 1, -1;  // x1 - x2 <= 0 dualized
  sys.ineq = flows::affine_map(A, Vec::Zero(1));
  Mat Ap(1, 2);
  Ap << 0, -1;  // -x2 <= 0 projected
  sys.primal_set = convex::ConvexSet::polyhedron(Ap, Vec::Zero(1));
  sim::IntegratorConfig cfg;
  cfg.method = sim::Method::Euler;
  cfg.dt = dt;
  cfg.t_end = t_end;
  Vec lo = Vec::Constant(3, -kInf);
  lo[2] = 0.0;  // dual orthant
  Mat Az = Mat::Zero(2, 3);
  Az(0, 1) = -1.0;  // x2 >= 0 within the stacked state
  Az(1, 2) = -1.0;
  cfg.projection_set = convex::ConvexSet::polyhedron(Az, Vec::Zero(2));
  Vec z0 = Vec::Zero(3);
  z0.head(2) = mp.x0;
  auto res = sim::integrate(flows::saddle_field(sys), z0, cfg, {"x1", "x2", "mu1"});
  PanelResult out = detail::summarize_panel(mp, std::move(res), 2);
  // feasibility of the projected coordinate alone
  out.strictly_feasible = true;
  for (const auto& z : out.traj.states)
    if (z[1] < -1e-10) out.strictly_feasible = false;
  return out;
}

// ---------------------------------------------------------------------------
// Two-well benchmark loop (quartic objective, second-order plant) and the
// empirical gain threshold.

inline flows::ScalarField two_well_objective() {
  flows::ScalarField phi;
  phi.value = [](const Vec& y) { return std::pow(y[0] * y[0] - 1.0, 2); };
  phi.gradient = [](const Vec& y) -> Vec {
    return Vec::Constant(1, 4.0 * y[0] * (y[0] * y[0] - 1.0));
  };
  phi.hessian = [](const Vec& y) -> Mat {
    return Mat::Constant(1, 1, 12.0 * y[0] * y[0] - 4.0);
  };
  return phi;
}

struct TwoWellRun {
  sim::IntegrationResult result;
  control::ClosedLoop loop;
};

// Started from u = zeta = 2.5, where the stable/divergent bands meet sharply
// (the marginal limit-cycle window is narrow for this initial condition).
inline TwoWellRun run_two_well_loop(double eps, double t_end = 400.0, double dt = 2e-3,
                                    double u0 = 2.5) {
  auto plant = plants::second_order_benchmark(2.0, 25.0);
  control::FeedbackProblem prob;
  prob.input_dim = 1;
  prob.output_dim = 1;
  prob.cost = control::output_cost(two_well_objective(), 1, 1);
  prob.input_set = convex::ConvexSet::whole_space(1);
  prob.sensitivity = control::SensitivityProvider::matrix(Mat::Identity(1, 1));
  TwoWellRun out;
  out.loop = control::gradient_feedback(plant, prob, eps);
  sim::IntegratorConfig cfg;
  cfg.dt = dt;
  cfg.t_end = t_end;
  cfg.divergence_radius = 1e3;
  Vec z0 = out.loop.initial(Vec(Vec::Constant(2, 0.0)), Vec::Constant(1, u0));
  z0[0] = u0;  // plant position matches the input
  out.result = sim::integrate(out.loop.field, z0, cfg, {"zeta", "zetadot", "u"});
  return out;
}

// Converges to one of the two minimizers within |error| <= tol.
inline bool two_well_stable(double eps, double tol = 1e-4) {
  auto run = run_two_well_loop(eps);
  if (run.result.status == sim::Status::Diverged) return false;
  double u = run.loop.input_of(run.result.trajectory.back())[0];
  return std::abs(std::abs(u) - 1.0) <= tol;
}

// Bisection for the empirical stability threshold (relative tolerance).
inline double two_well_gain_threshold(double rel_tol = 0.01) {
  double lo = 0.05, hi = 0.6;
  require(two_well_stable(lo) && !two_well_stable(hi),
          "two_well_gain_threshold: bracket does not straddle the threshold");
  while ((hi - lo) > rel_tol * lo) {
    double mid = 0.5 * (lo + hi);
    (two_well_stable(mid) ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

// ---------------------------------------------------------------------------
// Metric and Newton-flow phase portraits.

// Non-convex two-well potential in 2-d for the variable-metric portrait.
inline flows::ScalarField two_well_2d() {
  flows::ScalarField phi;
  phi.value = [](const Vec& x) {
    return std::pow(x[0] * x[0] - 1.0, 2) + 0.5 * x[1] * x[1];
  };
  phi.gradient = [](const Vec& x) -> Vec {
    Vec g(2);
    g << 4.0 * x[0] * (x[0] * x[0] - 1.0), x[1];
    return g;
  };
  return phi;
}

// Ill-conditioned strongly convex quadratic for the Newton-flow portrait.
inline flows::ScalarField ill_conditioned_quadratic() {
  Mat H(2, 2);
  H << 10.0, 0.0, 0.0, 0.1;
  return flows::quadratic_field(H, Vec::Zero(2));
}

struct PortraitResult {
  std::vector<sim::Trajectory> euclidean;
  std::vector<sim::Trajectory> warped;  // variable metric or Newton
};

inline PortraitResult metric_portrait(unsigned seed = 2, double dt = 2e-3, double t_end = 40.0) {
  auto phi = two_well_2d();
  std::mt19937 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Mat Rm(2, 2);
  for (int i = 0; i < 4; ++i) Rm(i / 2, i % 2) = gauss(rng);
  Mat Q = Rm * Rm.transpose() + 0.3 * Mat::Identity(2, 2);
  PortraitResult out;
  sim::IntegratorConfig cfg;
  cfg.dt = dt;
  cfg.t_end = t_end;
  for (double sx : {-1.4, -0.6, 0.6, 1.4}) {
    for (double sy : {-1.0, 1.0}) {
      Vec x0(2);
      x0 << sx, sy;
      out.euclidean.push_back(
          sim::integrate(flows::gradient_field(phi), x0, cfg, {"x1", "x2"}).trajectory);
      out.warped.push_back(
          sim::integrate(flows::gradient_field(phi, convex::Metric::constant(Q)), x0, cfg,
                         {"x1", "x2"})
              .trajectory);
    }
  }
  return out;
}

inline PortraitResult newton_portrait(double dt = 2e-3, double t_end = 10.0) {
  auto phi = ill_conditioned_quadratic();
  PortraitResult out;
  sim::IntegratorConfig cfg;
  cfg.dt = dt;
  cfg.t_end = t_end;
  auto newton = flows::newton_metric(phi);
  for (double a = 0.0; a < 2.0 * M_PI - 1e-9; a += M_PI / 4.0) {
    Vec x0(2);
    x0 << 2.0 * std::cos(a), 2.0 * std::sin(a);
    out.euclidean.push_back(
        sim::integrate(flows::gradient_field(phi), x0, cfg, {"x1", "x2"}).trajectory);
    out.warped.push_back(
        sim::integrate(flows::gradient_field(phi, newton), x0, cfg, {"x1", "x2"}).trajectory);
  }
  return out;
}

}  // namespace fbopt::scenarios
