#pragma once

// Fixed-step integration of (possibly discontinuous) vector fields, trajectory
// recording, divergence detection, and numerical verification utilities.

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fbopt/convex.hpp"
#include "fbopt/core.hpp"
#include "fbopt/flows.hpp"

namespace fbopt::sim {

using convex::ConvexSet;
using flows::ScalarField;
using flows::VectorField;

struct Trajectory {
  std::vector<double> times;
  std::vector<Vec> states;
  std::vector<std::string> labels;

  const Vec& back() const { return states.back(); }
  int dim() const { return states.empty() ? 0 : static_cast<int>(states.front().size()); }
  size_t size() const { return times.size(); }
};

enum class Method { Euler, RK4 };

enum class Status { Converged, Diverged, TimeLimit };

inline const char* to_string(Status s) {
  switch (s) {
    case Status::Converged:
      return "converged";
    case Status::Diverged:
      return "diverged";
    default:
      return "time_limit";
  }
}

struct IntegratorConfig {
  Method method = Method::RK4;
  double dt = 1e-3;
  double t_end = 1.0;
  double divergence_radius = 1e6;
  std::optional<ConvexSet> projection_set;  // re-project after every step
  double convergence_tol = 0.0;             // 0 disables early termination
  double t_start = 0.0;

  void validate() const {
    require(dt > 0, "IntegratorConfig: dt must be positive");
    require(divergence_radius > 0, "IntegratorConfig: divergence_radius must be positive");
  }
};

struct IntegrationResult {
  Trajectory trajectory;
  Status status = Status::TimeLimit;
  double t_final = 0.0;
};

/// Domain error surfaced by integrate() with the offending time attached.
struct FieldDomainError : Error {
  FieldDomainError(double t, const std::string& msg)
      : Error("field domain error at t=" + std::to_string(t) + ": " + msg), time(t) {}
  double time;
};

namespace detail {

inline Vec step_once(const VectorField& f, double t, const Vec& x, double h, Method m) {
  if (m == Method::Euler) return x + h * f(t, x);
  Vec k1 = f(t, x);
  Vec k2 = f(t + 0.5 * h, x + 0.5 * h * k1);
  Vec k3 = f(t + 0.5 * h, x + 0.5 * h * k2);
  Vec k4 = f(t + h, x + h * k3);
  return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

// Advance by h; on a DomainError the step is rejected and retried as two
// half-steps, so barrier trajectories stay interior instead of seeing inf.
// The field is probed at the new (re-projected) state so that steps landing
// outside the domain are rejected as well.
inline Vec advance(const VectorField& f, double t, const Vec& x, double h, Method m, int depth,
                   const std::optional<ConvexSet>& proj) {
  try {
    Vec xn = step_once(f, t, x, h, m);
    if (proj) xn = convex::project_point(*proj, xn);
    f(t + h, xn);
    return xn;
  } catch (const DomainError& e) {
    if (depth >= 40) throw FieldDomainError(t, e.what());
    Vec mid = advance(f, t, x, 0.5 * h, m, depth + 1, proj);
    return advance(f, t + 0.5 * h, mid, 0.5 * h, m, depth + 1, proj);
  }
}

}  // namespace detail

inline IntegrationResult integrate(const VectorField& field, Vec x0, const IntegratorConfig& cfg,
                                   std::vector<std::string> labels = {}) {
  cfg.validate();
  IntegrationResult res;
  res.trajectory.labels = std::move(labels);
  Vec x = std::move(x0);
  if (cfg.projection_set) x = convex::project_point(*cfg.projection_set, x);
  double t = cfg.t_start;
  res.trajectory.times.push_back(t);
  res.trajectory.states.push_back(x);

  const long n_steps = static_cast<long>(std::ceil((cfg.t_end - cfg.t_start) / cfg.dt - 1e-12));
  for (long k = 0; k < n_steps; ++k) {
    if (cfg.convergence_tol > 0.0) {
      Vec fx;
      try {
        fx = field(t, x);
      } catch (const DomainError& e) {
        throw FieldDomainError(t, e.what());
      }
      if (fx.norm() < cfg.convergence_tol) {
        res.status = Status::Converged;
        res.t_final = t;
        return res;
      }
    }
    x = detail::advance(field, t, x, cfg.dt, cfg.method, 0, cfg.projection_set);
    t = cfg.t_start + (k + 1) * cfg.dt;
    res.trajectory.times.push_back(t);
    res.trajectory.states.push_back(x);
    if (!x.allFinite() || x.norm() > cfg.divergence_radius) {
      res.status = Status::Diverged;
      res.t_final = t;
      return res;
    }
  }
  res.status = Status::TimeLimit;
  res.t_final = t;
  return res;
}

// Max relative error of the gradient against central finite differences,
// max_i |grad_i - fd_i| / (1 + |grad_i|), with delta = 1e-5 (1 + ||x||).
inline double check_gradient(const ScalarField& phi, const Vec& x) {
  const double delta = 1e-5 * (1.0 + x.norm());
  Vec g = phi.gradient(x);
  double worst = 0.0;
  for (int i = 0; i < x.size(); ++i) {
    Vec xp = x, xm = x;
    xp[i] += delta;
    xm[i] -= delta;
    double fd = (phi.value(xp) - phi.value(xm)) / (2.0 * delta);
    worst = std::max(worst, std::abs(g[i] - fd) / (1.0 + std::abs(g[i])));
  }
  return worst;
}

// Same check for a vector-valued map's Jacobian.
inline double check_jacobian(const flows::ConstraintMap& g, const Vec& x) {
  const double delta = 1e-5 * (1.0 + x.norm());
  Mat J = g.jacobian(x);
  double worst = 0.0;
  for (int i = 0; i < x.size(); ++i) {
    Vec xp = x, xm = x;
    xp[i] += delta;
    xm[i] -= delta;
    Vec fd = (g.value(xp) - g.value(xm)) / (2.0 * delta);
    for (int r = 0; r < J.rows(); ++r)
      worst = std::max(worst, std::abs(J(r, i) - fd[r]) / (1.0 + std::abs(J(r, i))));
  }
  return worst;
}

// First time the trajectory enters the tol-ball around target and stays there.
inline std::optional<double> settle_time(const Trajectory& traj, const Vec& target, double tol) {
  if (traj.states.empty()) return std::nullopt;
  std::optional<double> entered;
  for (size_t k = 0; k < traj.states.size(); ++k) {
    if ((traj.states[k] - target).norm() <= tol) {
      if (!entered) entered = traj.times[k];
    } else {
      entered.reset();
    }
  }
  return entered;
}

}  // namespace fbopt::sim
