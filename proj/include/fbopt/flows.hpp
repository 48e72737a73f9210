#pragma once

// Optimization dynamics as composable vector fields: gradient flows with a
// metric, penalty/barrier augmentation, projected gradient flows, and
// saddle-point flows with primal/dual augmentation.

#include <cmath>
#include <optional>
#include <utility>
#include <vector>

#include "fbopt/convex.hpp"
#include "fbopt/core.hpp"

namespace fbopt::flows {

using convex::ConvexSet;
using convex::Metric;

// Time-dependent vector field (t, x) |-> dx/dt.
using VectorField = std::function<Vec(double, const Vec&)>;

// ---------------------------------------------------------------------------
// ScalarField: value + gradient (+ optional Hessian).

struct ScalarField {
  std::function<double(const Vec&)> value;
  std::function<Vec(const Vec&)> gradient;
  std::function<Mat(const Vec&)> hessian;  // may be empty
  bool convex = false;

  bool has_hessian() const { return static_cast<bool>(hessian); }
};

// Phi(x) = 1/2 x^T H x + f^T x + c.
inline ScalarField quadratic_field(Mat H, Vec f, double c = 0.0) {
  ScalarField phi;
  auto Hp = std::make_shared<Mat>(std::move(H));
  auto fp = std::make_shared<Vec>(std::move(f));
  phi.value = [Hp, fp, c](const Vec& x) { return 0.5 * x.dot(*Hp * x) + fp->dot(x) + c; };
  phi.gradient = [Hp, fp](const Vec& x) -> Vec { return *Hp * x + *fp; };
  phi.hessian = [Hp](const Vec&) -> Mat { return *Hp; };
  phi.convex = true;
  return phi;
}

inline ScalarField add_fields(ScalarField a, ScalarField b) {
  ScalarField out;
  out.value = [a, b](const Vec& x) { return a.value(x) + b.value(x); };
  out.gradient = [a, b](const Vec& x) -> Vec { return a.gradient(x) + b.gradient(x); };
  if (a.has_hessian() && b.has_hessian())
    out.hessian = [a, b](const Vec& x) -> Mat { return a.hessian(x) + b.hessian(x); };
  out.convex = a.convex && b.convex;
  return out;
}

// ---------------------------------------------------------------------------
// Vector-valued constraint map g with Jacobian.

struct ConstraintMap {
  int out_dim = 0;
  std::function<Vec(const Vec&)> value;
  std::function<Mat(const Vec&)> jacobian;
};

// g(x) = A x + c.
inline ConstraintMap affine_map(Mat A, Vec c) {
  require_dims(A.rows() == c.size(), "affine_map: dims");
  ConstraintMap g;
  g.out_dim = static_cast<int>(A.rows());
  auto Ap = std::make_shared<Mat>(std::move(A));
  auto cp = std::make_shared<Vec>(std::move(c));
  g.value = [Ap, cp](const Vec& x) -> Vec { return *Ap * x + *cp; };
  g.jacobian = [Ap](const Vec&) -> Mat { return *Ap; };
  return g;
}

inline Vec relu(const Vec& v) { return v.cwiseMax(0.0); }

// ---------------------------------------------------------------------------
// Gradient flows.

// x |-> -Q(x) grad(x). Q acts as the flow multiplier; with Q = (hess Phi)^-1
// this is the Newton flow.
inline VectorField gradient_field(const ScalarField& phi, const Metric& metric = Metric::identity()) {
  return [phi, metric](double, const Vec& x) -> Vec {
    Vec g = phi.gradient(x);
    if (metric.is_identity()) return -g;
    return -(metric.eval(x) * g);
  };
}

// Metric Q(x) = (hess Phi(x))^{-1}; throws SingularHessian when the Hessian is
// not SPD at the queried point.
inline Metric newton_metric(const ScalarField& phi) {
  require(phi.has_hessian(), "newton_metric: scalar field lacks a Hessian evaluator");
  auto hess = phi.hessian;
  return Metric::varying([hess](const Vec& x) -> Mat {
    Mat H = hess(x);
    Eigen::LLT<Mat> llt(H);
    if (llt.info() != Eigen::Success)
      throw SingularHessian("newton_metric: Hessian not SPD at queried point");
    return llt.solve(Mat::Identity(H.rows(), H.cols()));
  });
}

// phi(x) = (rho/2) ||max{g(x), 0}||^2. The max is componentwise; at g_i = 0
// the one-sided gradient 0 is used.
inline ScalarField penalty_term(const ConstraintMap& g, double rho) {
  require(rho > 0, "penalty_term: rho must be positive");
  ScalarField phi;
  phi.value = [g, rho](const Vec& x) { return 0.5 * rho * relu(g.value(x)).squaredNorm(); };
  phi.gradient = [g, rho](const Vec& x) -> Vec {
    return rho * g.jacobian(x).transpose() * relu(g.value(x));
  };
  return phi;
}

// psi(x) = -(1/mu) sum_i log(-g_i(x)); OutOfDomain unless g(x) < 0 strictly.
inline ScalarField barrier_term(const ConstraintMap& g, double mu) {
  require(mu > 0, "barrier_term: mu must be positive");
  auto check = [g](const Vec& x) -> Vec {
    Vec gv = g.value(x);
    if (gv.maxCoeff() >= 0.0) throw OutOfDomain("barrier_term: point not strictly feasible");
    return gv;
  };
  ScalarField psi;
  psi.value = [check, mu](const Vec& x) {
    Vec gv = check(x);
    double s = 0.0;
    for (int i = 0; i < gv.size(); ++i) s += std::log(-gv[i]);
    return -s / mu;
  };
  psi.gradient = [g, check, mu](const Vec& x) -> Vec {
    Vec gv = check(x);
    Mat J = g.jacobian(x);
    Vec out = Vec::Zero(x.size());
    for (int i = 0; i < gv.size(); ++i) out += J.row(i).transpose() / (-gv[i]);
    return out / mu;
  };
  return psi;
}

// x |-> Pi_set[-Q(x) grad(x)](x), the projection taken in the Q(x)^{-1} norm
// so that equilibria coincide with the KKT points and <grad, field> <= 0.
inline VectorField projected_gradient_field(const ScalarField& phi, const ConvexSet& set,
                                            const Metric& metric = Metric::identity()) {
  Metric norm = metric.inverse();
  return [phi, set, metric, norm](double, const Vec& x) -> Vec {
    Vec v = metric.is_identity() ? Vec(-phi.gradient(x)) : Vec(-(metric.eval(x) * phi.gradient(x)));
    return convex::project_tangent(set, x, v, norm);
  };
}

// ---------------------------------------------------------------------------
// Saddle-point flows.

// State layout for saddle_field: z = [x; mu; nu] with mu >= 0 the inequality
// duals and nu the free equality duals.
struct SaddleSystem {
  int n = 0;  // primal dimension
  ScalarField objective;
  std::optional<ConstraintMap> ineq;  // g(x) <= 0
  std::optional<ConstraintMap> eq;    // e(x) =  0
  std::optional<ConvexSet> primal_set;
  double rho_primal = 0.0;  // quadratic penalty weight on the Lagrangian
  double rho_dual = 0.0;    // dual damping; shifts equilibria off KKT
  Metric primal_metric = Metric::identity();
  Metric dual_metric = Metric::identity();

  int m_ineq() const { return ineq ? ineq->out_dim : 0; }
  int m_eq() const { return eq ? eq->out_dim : 0; }
  int state_dim() const { return n + m_ineq() + m_eq(); }

  Vec pack(const Vec& x, const Vec& mu, const Vec& nu) const {
    Vec z(state_dim());
    z.head(n) = x;
    z.segment(n, m_ineq()) = mu;
    z.tail(m_eq()) = nu;
    return z;
  }
  Vec x_of(const Vec& z) const { return z.head(n); }
  Vec mu_of(const Vec& z) const { return z.segment(n, m_ineq()); }
  Vec nu_of(const Vec& z) const { return z.tail(m_eq()); }
};

//   xdot  = Pi_primal_set[-Qp (grad Phi + Jg^T (mu + rho max{g,0}) + Je^T (nu + rho e))](x)
//   mudot = Pi_{>=0}[Qd (g(x) - rho_dual mu)](mu)
//   nudot = Qd e(x)
inline VectorField saddle_field(const SaddleSystem& sys) {
  require(sys.rho_primal >= 0 && sys.rho_dual >= 0, "saddle_field: rho must be >= 0");
  std::optional<Metric> norm;
  if (sys.primal_set && !sys.primal_metric.is_identity()) norm = sys.primal_metric.inverse();
  return [sys, norm](double, const Vec& z) -> Vec {
    require_dims(z.size() == sys.state_dim(), "saddle_field: state dim");
    Vec x = sys.x_of(z), mu = sys.mu_of(z), nu = sys.nu_of(z);
    Vec force = sys.objective.gradient(x);
    Vec gv, ev;
    if (sys.ineq) {
      gv = sys.ineq->value(x);
      force += sys.ineq->jacobian(x).transpose() * (mu + sys.rho_primal * relu(gv));
    }
    if (sys.eq) {
      ev = sys.eq->value(x);
      force += sys.eq->jacobian(x).transpose() * (nu + sys.rho_primal * ev);
    }
    Vec xdot = sys.primal_metric.is_identity() ? Vec(-force) : Vec(-(sys.primal_metric.eval(x) * force));
    if (sys.primal_set) {
      if (!sys.primal_set->contains(x))
        throw NotInSet("saddle_field: primal state left the feasible set");
      xdot = convex::project_tangent(*sys.primal_set, x, xdot,
                                     norm ? *norm : Metric::identity());
    }
    Vec out(z.size());
    out.head(sys.n) = xdot;
    if (sys.ineq) {
      Vec drift = gv - sys.rho_dual * mu;
      if (!sys.dual_metric.is_identity()) drift = sys.dual_metric.eval(mu) * drift;
      out.segment(sys.n, sys.m_ineq()) = convex::project_orthant_tangent(mu, drift);
    }
    if (sys.eq) {
      Vec drift = ev;
      if (!sys.dual_metric.is_identity()) drift = sys.dual_metric.eval(nu) * drift;
      out.tail(sys.m_eq()) = drift;
    }
    return out;
  };
}

}  // namespace fbopt::flows
