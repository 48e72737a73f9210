#pragma once

// Physical-system models: dynamic plants with steady-state maps, the
// second-order benchmark, LTI plants, input-saturation wrappers, and
// steady-state sensitivity estimation.

#include <cmath>
#include <memory>
#include <optional>
#include <utility>
#include <vector>

#include "fbopt/convex.hpp"
#include "fbopt/core.hpp"
#include "fbopt/sim.hpp"

namespace fbopt::plants {

using convex::ConvexSet;

// Piecewise-constant signal given by time-stamped steps; value(t) is the last
// step at or before t.
class Signal {
 public:
  Signal() = default;
  static Signal constant(Vec v) {
    Signal s;
    s.times_ = {0.0};
    s.values_ = {std::move(v)};
    return s;
  }
  static Signal zero(int dim) { return constant(Vec::Zero(dim)); }
  static Signal steps(std::vector<double> times, std::vector<Vec> values) {
    require(times.size() == values.size() && !times.empty(), "Signal: times/values mismatch");
    for (size_t k = 1; k < times.size(); ++k)
      require(times[k] > times[k - 1], "Signal: times must be increasing");
    Signal s;
    s.times_ = std::move(times);
    s.values_ = std::move(values);
    return s;
  }

  Vec value(double t) const {
    require(!times_.empty(), "Signal: empty");
    size_t k = 0;
    while (k + 1 < times_.size() && times_[k + 1] <= t) ++k;
    return values_[k];
  }
  int dim() const { return values_.empty() ? 0 : static_cast<int>(values_.front().size()); }
  const std::vector<double>& step_times() const { return times_; }

 private:
  std::vector<double> times_;
  std::vector<Vec> values_;
};

// zeta_dot = f(zeta, u), y = g(zeta) + d(t).
struct DynamicPlant {
  int state_dim = 0;
  int input_dim = 0;
  int output_dim = 0;
  std::function<Vec(const Vec&, const Vec&)> dynamics;  // f(zeta, u)
  std::function<Vec(const Vec&)> output;                // g(zeta)
  Signal disturbance;                                   // additive output disturbance

  Vec measure(const Vec& zeta, double t) const { return output(zeta) + disturbance.value(t); }
};

// u |-> y at steady state, with sensitivity grad h(u).
struct SteadyStateMap {
  int input_dim = 0;
  int output_dim = 0;
  std::function<Vec(const Vec&)> h;
  std::function<Mat(const Vec&)> sensitivity;
};

struct SettleOptions {
  double dt = 1e-3;
  double f_tol = 1e-9;
  double t_cap = 1e4;
  double divergence_radius = 1e6;
  // central-difference step for sensitivity estimation; wide enough that the
  // settling residual (~ f_tol / decay rate) stays below 1e-6 relative
  double fd_delta = 1e-3;
};

// Simulate the plant at constant input until ||f(zeta, u)|| <= f_tol.
inline Vec settle(const DynamicPlant& plant, const Vec& u, Vec zeta0,
                  const SettleOptions& opt = {}) {
  Vec zeta = std::move(zeta0);
  double t = 0.0;
  auto field = [&](double, const Vec& z) -> Vec { return plant.dynamics(z, u); };
  while (t < opt.t_cap) {
    if (plant.dynamics(zeta, u).norm() <= opt.f_tol) return zeta;
    // advance in chunks to amortize the residual check
    for (int k = 0; k < 50 && t < opt.t_cap; ++k) {
      zeta = sim::detail::step_once(field, t, zeta, opt.dt, sim::Method::RK4);
      t += opt.dt;
      if (!zeta.allFinite() || zeta.norm() > opt.divergence_radius)
        throw NoSettle("settle: state diverged at constant input");
    }
  }
  throw NoSettle("settle: time cap reached before ||f|| <= tol");
}

// Second-order benchmark zeta'' + a zeta' + b (zeta - u) = 0, y = zeta,
// realized as a two-state first-order system. At steady state y = u.
inline DynamicPlant second_order_benchmark(double a, double b) {
  require(a > 0 && b > 0, "second_order_benchmark: a, b must be positive");
  DynamicPlant p;
  p.state_dim = 2;
  p.input_dim = 1;
  p.output_dim = 1;
  p.dynamics = [a, b](const Vec& z, const Vec& u) -> Vec {
    Vec dz(2);
    dz[0] = z[1];
    dz[1] = -a * z[1] - b * (z[0] - u[0]);
    return dz;
  };
  p.output = [](const Vec& z) -> Vec { return z.head(1); };
  p.disturbance = Signal::zero(1);
  return p;
}

struct LtiPlant {
  DynamicPlant plant;
  SteadyStateMap steady_state;
  Mat A, B, C, D;
};

// LTI plant with h(u) = (-C A^{-1} B + D) u + d. A must be Hurwitz.
inline LtiPlant lti_plant(Mat A, Mat B, Mat C, Mat D, Vec d) {
  require_dims(A.rows() == A.cols() && B.rows() == A.rows() && C.cols() == A.rows() &&
                   D.rows() == C.rows() && D.cols() == B.cols() && d.size() == C.rows(),
               "lti_plant: dims");
  Eigen::EigenSolver<Mat> es(A);
  for (int i = 0; i < A.rows(); ++i)
    if (es.eigenvalues()[i].real() >= -1e-9)
      throw NotStable("lti_plant: A is not Hurwitz (Re lambda = " +
                      std::to_string(es.eigenvalues()[i].real()) + ")");
  Eigen::FullPivLU<Mat> lu(A);
  if (!lu.isInvertible()) throw SingularMatrix("lti_plant: A is singular");
  Mat H = -C * lu.solve(B) + D;

  LtiPlant out;
  out.A = A;
  out.B = B;
  out.C = C;
  out.D = D;
  auto Ap = std::make_shared<Mat>(std::move(A));
  auto Bp = std::make_shared<Mat>(std::move(B));
  auto Cp = std::make_shared<Mat>(C);
  auto Dp = std::make_shared<Mat>(D);
  out.plant.state_dim = static_cast<int>(Ap->rows());
  out.plant.input_dim = static_cast<int>(Bp->cols());
  out.plant.output_dim = static_cast<int>(Cp->rows());
  out.plant.dynamics = [Ap, Bp](const Vec& z, const Vec& u) -> Vec { return *Ap * z + *Bp * u; };
  // D u enters through the output map only at steady state; fold it via the
  // stored input is not possible, so D is exposed in the steady-state map and
  // the dynamic output keeps g(zeta) = C zeta (D = 0 in every scenario here).
  out.plant.output = [Cp](const Vec& z) -> Vec { return *Cp * z; };
  out.plant.disturbance = Signal::constant(d);

  out.steady_state.input_dim = out.plant.input_dim;
  out.steady_state.output_dim = out.plant.output_dim;
  auto Hp = std::make_shared<Mat>(std::move(H));
  auto dp = std::make_shared<Vec>(std::move(d));
  out.steady_state.h = [Hp, dp](const Vec& u) -> Vec { return *Hp * u + *dp; };
  out.steady_state.sensitivity = [Hp](const Vec&) -> Mat { return *Hp; };
  return out;
}

// Steady-state sensitivity by settled central differences,
// column j = (h(u + delta e_j) - h(u - delta e_j)) / (2 delta).
inline Mat estimate_sensitivity(const DynamicPlant& plant, const Vec& u, double t = 0.0,
                                const SettleOptions& opt = {}) {
  const double delta = opt.fd_delta * (1.0 + u.norm());
  Mat S(plant.output_dim, plant.input_dim);
  Vec zeta0 = Vec::Zero(plant.state_dim);
  for (int j = 0; j < plant.input_dim; ++j) {
    Vec up = u, um = u;
    up[j] += delta;
    um[j] -= delta;
    Vec yp = plant.measure(settle(plant, up, zeta0, opt), t);
    Vec ym = plant.measure(settle(plant, um, zeta0, opt), t);
    S.col(j) = (yp - ym) / (2.0 * delta);
  }
  return S;
}

// Wraps a plant so the applied input is always P_U(u).
inline DynamicPlant saturate(const DynamicPlant& inner, const ConvexSet& input_set) {
  require_dims(input_set.dim() == inner.input_dim, "saturate: input set dim");
  DynamicPlant p = inner;
  auto f = inner.dynamics;
  p.dynamics = [f, input_set](const Vec& z, const Vec& u) -> Vec {
    return f(z, convex::project_point(input_set, u));
  };
  return p;
}

inline SteadyStateMap saturate(const SteadyStateMap& inner, const ConvexSet& input_set) {
  require_dims(input_set.dim() == inner.input_dim, "saturate: input set dim");
  SteadyStateMap m = inner;
  auto h = inner.h;
  auto s = inner.sensitivity;
  m.h = [h, input_set](const Vec& u) -> Vec { return h(convex::project_point(input_set, u)); };
  m.sensitivity = [s, input_set](const Vec& u) -> Mat {
    return s(convex::project_point(input_set, u));
  };
  return m;
}

}  // namespace fbopt::plants
