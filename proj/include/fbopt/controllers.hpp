#pragma once

// Feedback-based optimization controllers: gradient feedback, extremum
// seeking, modifier adaptation, anti-windup projection, projected augmented
// saddle-point feedback, linearized output projection, and time-varying
// variants. Continuous controllers are vector fields composed with the plant
// into one stacked system; discrete controllers (MA, LOP, Euler saddle) run on
// a sampling grid.

#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fbopt/convex.hpp"
#include "fbopt/core.hpp"
#include "fbopt/flows.hpp"
#include "fbopt/plants.hpp"
#include "fbopt/sim.hpp"

namespace fbopt::control {

using convex::ConvexSet;
using convex::Metric;
using flows::ConstraintMap;
using flows::ScalarField;
using flows::VectorField;
using plants::DynamicPlant;
using plants::SteadyStateMap;

// ---------------------------------------------------------------------------

enum class SensitivityKind { UserMatrix, ExactMap, FiniteDifference };

// Steady-state sensitivity with precedence: user matrix > exact map > settled
// finite differences on the plant.
struct SensitivityProvider {
  std::optional<Mat> user;
  std::function<Mat(const Vec&)> exact;
  std::optional<DynamicPlant> fd_plant;
  plants::SettleOptions fd_options;

  static SensitivityProvider matrix(Mat H) {
    SensitivityProvider s;
    s.user = std::move(H);
    return s;
  }
  static SensitivityProvider from_map(const SteadyStateMap& m) {
    SensitivityProvider s;
    s.exact = m.sensitivity;
    return s;
  }
  static SensitivityProvider finite_difference(DynamicPlant plant, plants::SettleOptions opt = {}) {
    SensitivityProvider s;
    s.fd_plant = std::move(plant);
    s.fd_options = opt;
    return s;
  }

  SensitivityKind kind() const {
    if (user) return SensitivityKind::UserMatrix;
    if (exact) return SensitivityKind::ExactMap;
    return SensitivityKind::FiniteDifference;
  }

  Mat eval(const Vec& u) const {
    if (user) return *user;
    if (exact) return exact(u);
    if (fd_plant) return plants::estimate_sensitivity(*fd_plant, u, 0.0, fd_options);
    throw SensitivityUnavailable("SensitivityProvider: no source configured");
  }
};

// Steady-state optimization problem seen by a controller:
//   minimize Phi(u, y)  s.t.  y = h(u, d),  u in U,  g(u, y) <= 0.
// Cost and constraints act on the stacked vector (u; y).
struct FeedbackProblem {
  int input_dim = 0;
  int output_dim = 0;
  ScalarField cost;                          // on (u; y)
  std::optional<ConstraintMap> constraints;  // g(u, y) <= 0, on (u; y)
  ConvexSet input_set = ConvexSet::whole_space(0);
  SensitivityProvider sensitivity;

  Vec stacked(const Vec& u, const Vec& y) const {
    Vec z(input_dim + output_dim);
    z.head(input_dim) = u;
    z.tail(output_dim) = y;
    return z;
  }
};

struct ControllerState {
  Vec u;
  Vec mu;   // dual variables, >= 0 (empty when unused)
  Vec aux;  // controller-specific scalars (ES phase, MA modifier, ...)
};

// Algebraic plant y = h(u) + d(t) with an arbitrary (not necessarily
// piecewise-constant) disturbance.
struct AlgebraicPlant {
  SteadyStateMap map;
  std::function<Vec(double)> disturbance;  // may be empty

  Vec measure(const Vec& u, double t) const {
    Vec y = map.h(u);
    if (disturbance) y += disturbance(t);
    return y;
  }
};

// Lifts a cost on y alone to the stacked (u; y) space.
inline ScalarField output_cost(const ScalarField& phi_y, int input_dim, int output_dim) {
  ScalarField phi;
  phi.value = [phi_y, input_dim, output_dim](const Vec& z) {
    return phi_y.value(z.tail(output_dim));
  };
  phi.gradient = [phi_y, input_dim, output_dim](const Vec& z) -> Vec {
    Vec g = Vec::Zero(z.size());
    g.tail(output_dim) = phi_y.gradient(z.tail(output_dim));
    return g;
  };
  if (phi_y.has_hessian()) {
    phi.hessian = [phi_y, input_dim, output_dim](const Vec& z) -> Mat {
      Mat H = Mat::Zero(z.size(), z.size());
      H.bottomRightCorner(output_dim, output_dim) = phi_y.hessian(z.tail(output_dim));
      return H;
    };
  }
  phi.convex = phi_y.convex;
  return phi;
}

namespace detail {

// Splits the cost gradient on (u; y) and folds it through H(u) = [I; grad h]:
// reduced gradient = grad_u Phi + grad h^T grad_y Phi.
inline Vec reduced_gradient(const FeedbackProblem& prob, const Vec& u, const Vec& y, const Mat& sens) {
  Vec g = prob.cost.gradient(prob.stacked(u, y));
  return g.head(prob.input_dim) + sens.transpose() * g.tail(prob.output_dim);
}

// Same fold for the dual force grad_u g^T w + grad h^T grad_y g^T w.
inline Vec reduced_constraint_force(const FeedbackProblem& prob, const Vec& u, const Vec& y,
                                    const Mat& sens, const Vec& weights) {
  const Mat J = prob.constraints->jacobian(prob.stacked(u, y));
  const Mat Ju = J.leftCols(prob.input_dim);
  const Mat Jy = J.rightCols(prob.output_dim);
  return Ju.transpose() * weights + sens.transpose() * (Jy.transpose() * weights);
}

}  // namespace detail

// Implicit metric tensor M(u) = H(u)^T H(u) + sigma I with H(u) = [I; grad h].
// Controllers use M^{-1} as the flow multiplier and M as the projection norm.
// Optional per-output weights rescale badly conditioned channels (e.g.
// squared-current rows measured in current-margin units) before the fold.
inline Mat implicit_metric_tensor(const Mat& sens, double sigma = 1e-6,
                                  const Vec& output_weights = Vec(),
                                  const Vec& input_scaling = Vec()) {
  const int p = static_cast<int>(sens.cols());
  Mat M;
  if (output_weights.size() == 0) {
    M = Mat::Identity(p, p) * (1.0 + sigma) + sens.transpose() * sens;
  } else {
    require_dims(output_weights.size() == sens.rows(), "implicit_metric_tensor: weight dim");
    Mat ws = output_weights.asDiagonal() * sens;
    M = Mat::Identity(p, p) * (1.0 + sigma) + ws.transpose() * ws;
  }
  if (input_scaling.size() > 0) {
    require_dims(input_scaling.size() == p, "implicit_metric_tensor: scaling dim");
    M = input_scaling.asDiagonal() * M * input_scaling.asDiagonal();
  }
  return M;
}

// ---------------------------------------------------------------------------
// Gradient feedback:  udot = -eps grad h(u)^T grad Phi(y)^T.

struct ClosedLoop {
  VectorField field;
  int plant_dim = 0;
  int input_dim = 0;
  int dual_dim = 0;
  std::vector<std::string> labels;

  Vec initial(const Vec& zeta0, const Vec& u0, const Vec& mu0 = Vec()) const {
    Vec z(plant_dim + input_dim + dual_dim);
    z.head(plant_dim) = zeta0;
    z.segment(plant_dim, input_dim) = u0;
    if (dual_dim > 0) z.tail(dual_dim) = mu0;
    return z;
  }
  Vec input_of(const Vec& z) const { return z.segment(plant_dim, input_dim); }
  Vec plant_of(const Vec& z) const { return z.head(plant_dim); }
  Vec dual_of(const Vec& z) const { return z.tail(dual_dim); }
};

inline std::vector<std::string> default_labels(int plant_dim, int input_dim, int dual_dim) {
  std::vector<std::string> lab;
  for (int i = 0; i < plant_dim; ++i) lab.push_back("zeta" + std::to_string(i + 1));
  for (int i = 0; i < input_dim; ++i) lab.push_back("u" + std::to_string(i + 1));
  for (int i = 0; i < dual_dim; ++i) lab.push_back("mu" + std::to_string(i + 1));
  return lab;
}

inline ClosedLoop gradient_feedback(const DynamicPlant& plant, const FeedbackProblem& prob,
                                    double eps) {
  require(eps > 0, "gradient_feedback: eps must be positive");
  ClosedLoop cl;
  cl.plant_dim = plant.state_dim;
  cl.input_dim = plant.input_dim;
  cl.labels = default_labels(cl.plant_dim, cl.input_dim, 0);
  cl.field = [plant, prob, eps](double t, const Vec& z) -> Vec {
    Vec zeta = z.head(plant.state_dim);
    Vec u = z.tail(plant.input_dim);
    Vec y = plant.measure(zeta, t);
    Mat sens = prob.sensitivity.eval(u);
    Vec out(z.size());
    out.head(plant.state_dim) = plant.dynamics(zeta, u);
    out.tail(plant.input_dim) = -eps * detail::reduced_gradient(prob, u, y, sens);
    return out;
  };
  return cl;
}

// Reduced loop on u alone for an algebraic plant.
inline VectorField gradient_feedback(const AlgebraicPlant& plant, const FeedbackProblem& prob,
                                     double eps) {
  require(eps > 0, "gradient_feedback: eps must be positive");
  return [plant, prob, eps](double t, const Vec& u) -> Vec {
    Vec y = plant.measure(u, t);
    Mat sens = prob.sensitivity.eval(u);
    return -eps * detail::reduced_gradient(prob, u, y, sens);
  };
}

// ---------------------------------------------------------------------------
// Extremum seeking (scalar input):
//   utilde = u + 2 a sin(w t),   udot = -(eps/a) Phi(y) sin(w t).

inline ClosedLoop extremum_seeking(const DynamicPlant& plant, const ScalarField& cost_on_y,
                                   double a, double omega, double eps) {
  if (plant.input_dim != 1) throw NonScalarInput("extremum_seeking: plant input must be scalar");
  require(a > 0 && omega > 0 && eps > 0, "extremum_seeking: a, omega, eps must be positive");
  ClosedLoop cl;
  cl.plant_dim = plant.state_dim;
  cl.input_dim = 1;
  cl.labels = default_labels(cl.plant_dim, 1, 0);
  cl.field = [plant, cost_on_y, a, omega, eps](double t, const Vec& z) -> Vec {
    Vec zeta = z.head(plant.state_dim);
    Vec u = z.tail(1);
    Vec ut = u;
    ut[0] += 2.0 * a * std::sin(omega * t);
    Vec y = plant.measure(zeta, t);
    Vec out(z.size());
    out.head(plant.state_dim) = plant.dynamics(zeta, ut);
    out[plant.state_dim] = -(eps / a) * cost_on_y.value(y) * std::sin(omega * t);
    return out;
  };
  return cl;
}

inline VectorField extremum_seeking(const AlgebraicPlant& plant, const ScalarField& cost_on_y,
                                    double a, double omega, double eps) {
  if (plant.map.input_dim != 1) throw NonScalarInput("extremum_seeking: plant input must be scalar");
  require(a > 0 && omega > 0 && eps > 0, "extremum_seeking: a, omega, eps must be positive");
  return [plant, cost_on_y, a, omega, eps](double t, const Vec& u) -> Vec {
    Vec ut = u;
    ut[0] += 2.0 * a * std::sin(omega * t);
    Vec y = plant.measure(ut, t);
    Vec out(1);
    out[0] = -(eps / a) * cost_on_y.value(y) * std::sin(omega * t);
    return out;
  };
}

// ---------------------------------------------------------------------------
// Modifier adaptation:
//   u*_k = argmin Phi(h_model(u) + d_model) + lambda_k^T u
//   lambda_{k+1} = (1 - kappa) lambda_k + kappa (grad Phi_true(u*_k) - grad Phi_model(u*_k)).
// kappa = 1 recovers the plain update, which diverges under large model
// mismatch; the convex filter is the documented extension.

struct MaIterate {
  Vec u;
  Vec lambda;
  Vec y;
};

struct MaResult {
  std::vector<MaIterate> history;
  bool diverged = false;
  Vec u_final;
  Vec lambda_final;
};

class ModifierAdaptation {
 public:
  ModifierAdaptation(SteadyStateMap model, Vec d_model, AlgebraicPlant truth,
                     ScalarField cost_on_y, double kappa,
                     SensitivityProvider true_sensitivity)
      : model_(std::move(model)),
        d_model_(std::move(d_model)),
        truth_(std::move(truth)),
        cost_(std::move(cost_on_y)),
        kappa_(kappa),
        sens_(std::move(true_sensitivity)) {
    require(kappa_ > 0 && kappa_ <= 1.0, "ModifierAdaptation: kappa in (0, 1]");
    lambda_ = Vec::Zero(model_.input_dim);
  }

  const Vec& lambda() const { return lambda_; }

  // Solves the modified model problem by a small damped Newton iteration with
  // finite-difference curvature.
  Vec inner_solve(Vec u) const {
    auto grad = [&](const Vec& v) -> Vec {
      Vec ym = model_.h(v) + d_model_;
      return model_.sensitivity(v).transpose() * cost_.gradient(ym) + lambda_;
    };
    const int n = static_cast<int>(u.size());
    for (int it = 0; it < 100; ++it) {
      Vec g = grad(u);
      if (g.norm() <= 1e-12) return u;
      Mat H(n, n);
      const double h = 1e-6 * (1.0 + u.norm());
      for (int j = 0; j < n; ++j) {
        Vec up = u, um = u;
        up[j] += h;
        um[j] -= h;
        H.col(j) = (grad(up) - grad(um)) / (2.0 * h);
      }
      H = 0.5 * (H + H.transpose());
      Eigen::LDLT<Mat> ldlt(H + 1e-12 * Mat::Identity(n, n));
      Vec step = ldlt.solve(-g);
      if (!step.allFinite() || step.dot(g) > 0) step = -g;  // fall back to descent
      double a = 1.0;
      Vec u_new = u + step;
      for (int ls = 0; ls < 60 && grad(u_new).norm() >= g.norm(); ++ls) {
        a *= 0.5;
        u_new = u + a * step;
      }
      if ((u_new - u).norm() <= 1e-14 * (1.0 + u.norm()) && g.norm() > 1e-9)
        throw InnerSolveFailed("ModifierAdaptation: inner solve stalled");
      u = u_new;
    }
    throw InnerSolveFailed("ModifierAdaptation: inner solve did not converge");
  }

  MaResult run(int iterations, double divergence_radius = 1e6) {
    MaResult res;
    Vec u = Vec::Zero(model_.input_dim);
    for (int k = 0; k < iterations; ++k) {
      u = inner_solve(u);
      Vec y = truth_.measure(u, 0.0);
      Vec grad_true = sens_.eval(u).transpose() * cost_.gradient(y);
      Vec ym = model_.h(u) + d_model_;
      Vec grad_model = model_.sensitivity(u).transpose() * cost_.gradient(ym);
      lambda_ = (1.0 - kappa_) * lambda_ + kappa_ * (grad_true - grad_model);
      res.history.push_back({u, lambda_, y});
      if (!lambda_.allFinite() || lambda_.norm() > divergence_radius) {
        res.diverged = true;
        break;
      }
    }
    res.u_final = u;
    res.lambda_final = lambda_;
    return res;
  }

 private:
  SteadyStateMap model_;
  Vec d_model_;
  AlgebraicPlant truth_;
  ScalarField cost_;
  double kappa_;
  SensitivityProvider sens_;
  Vec lambda_;
};

// ---------------------------------------------------------------------------
// Anti-windup gradient on a saturated plant:
//   udot = -eps grad h(P_U(u))^T grad Phi(y)^T - (1/K)(u - P_U(u)).

inline VectorField anti_windup_gradient(const AlgebraicPlant& plant, const FeedbackProblem& prob,
                                        double eps, double K) {
  require(eps > 0 && K > 0, "anti_windup_gradient: eps, K must be positive");
  return [plant, prob, eps, K](double t, const Vec& u) -> Vec {
    Vec ubar = convex::project_point(prob.input_set, u);
    Vec y = plant.measure(ubar, t);
    Mat sens = prob.sensitivity.eval(ubar);
    return -eps * detail::reduced_gradient(prob, ubar, y, sens) - (u - ubar) / K;
  };
}

inline ClosedLoop anti_windup_gradient(const DynamicPlant& plant, const FeedbackProblem& prob,
                                       double eps, double K) {
  require(eps > 0 && K > 0, "anti_windup_gradient: eps, K must be positive");
  ClosedLoop cl;
  cl.plant_dim = plant.state_dim;
  cl.input_dim = plant.input_dim;
  cl.labels = default_labels(cl.plant_dim, cl.input_dim, 0);
  cl.field = [plant, prob, eps, K](double t, const Vec& z) -> Vec {
    Vec zeta = z.head(plant.state_dim);
    Vec u = z.tail(plant.input_dim);
    Vec ubar = convex::project_point(prob.input_set, u);
    Vec y = plant.measure(zeta, t);
    Mat sens = prob.sensitivity.eval(ubar);
    Vec out(z.size());
    out.head(plant.state_dim) = plant.dynamics(zeta, ubar);
    out.tail(plant.input_dim) =
        -eps * detail::reduced_gradient(prob, ubar, y, sens) - (u - ubar) / K;
    return out;
  };
  return cl;
}

// ---------------------------------------------------------------------------
// Projected augmented saddle-point feedback:
//   udot  = Pi^Q_U[-eps Q(u) (grad_u + grad h^T grad_y)(Phi + (mu + rho max{g,0})^T g)](u)
//   mudot = Pi_{>=0}[dual_gain g(u, y)](mu)
// Q(u) is the inverse of the metric tensor; the tangent projection is taken in
// the tensor norm so stationary points are exact KKT points.

struct SaddleFeedbackOptions {
  double eps = 1.0;
  double rho = 0.0;        // primal augmentation weight
  double dual_gain = 1.0;  // gain on mudot (the printed controller uses 1)
  bool implicit_metric = false;
  double sigma = 1e-6;   // ridge making H^T H positive definite
  Vec output_weights;    // optional channel weights for the implicit metric
  Vec input_scaling;     // optional per-input scaling of the metric tensor
};

namespace detail {

inline Vec saddle_primal_force(const FeedbackProblem& prob, const Vec& u, const Vec& y,
                               const Mat& sens, const Vec& mu, double rho) {
  Vec force = reduced_gradient(prob, u, y, sens);
  if (prob.constraints) {
    Vec gv = prob.constraints->value(prob.stacked(u, y));
    force += reduced_constraint_force(prob, u, y, sens, Vec(mu + rho * flows::relu(gv)));
  }
  return force;
}

inline Vec saddle_primal_rate(const FeedbackProblem& prob, const Vec& u, const Vec& y,
                              const Mat& sens, const Vec& mu, const SaddleFeedbackOptions& opt) {
  Vec force = saddle_primal_force(prob, u, y, sens, mu, opt.rho);
  Vec v;
  std::optional<Metric> norm;
  if (opt.implicit_metric) {
    Mat M = implicit_metric_tensor(sens, opt.sigma, opt.output_weights, opt.input_scaling);
    Eigen::LLT<Mat> llt(M);
    v = -opt.eps * llt.solve(force);
    norm = Metric::constant(M);
  } else {
    v = -opt.eps * force;
  }
  if (prob.input_set.rows_A().rows() == 0) return v;
  return convex::project_tangent(prob.input_set, u, v, norm ? *norm : Metric::identity());
}

}  // namespace detail

// Closed loop with an algebraic plant; state (u; mu).
inline ClosedLoop saddle_feedback(const AlgebraicPlant& plant, const FeedbackProblem& prob,
                                  const SaddleFeedbackOptions& opt) {
  require(prob.constraints.has_value(), "saddle_feedback: problem has no output constraints");
  ClosedLoop cl;
  cl.plant_dim = 0;
  cl.input_dim = prob.input_dim;
  cl.dual_dim = prob.constraints->out_dim;
  cl.labels = default_labels(0, cl.input_dim, cl.dual_dim);
  cl.field = [plant, prob, opt](double t, const Vec& z) -> Vec {
    Vec u = z.head(prob.input_dim);
    Vec mu = z.tail(prob.constraints->out_dim);
    Vec y = plant.measure(u, t);
    Mat sens = prob.sensitivity.eval(u);
    Vec gv = prob.constraints->value(prob.stacked(u, y));
    Vec out(z.size());
    out.head(prob.input_dim) = detail::saddle_primal_rate(prob, u, y, sens, mu, opt);
    out.tail(mu.size()) = convex::project_orthant_tangent(mu, Vec(opt.dual_gain * gv));
    return out;
  };
  return cl;
}

// Closed loop with a dynamic plant; state (zeta; u; mu).
inline ClosedLoop saddle_feedback(const DynamicPlant& plant, const FeedbackProblem& prob,
                                  const SaddleFeedbackOptions& opt) {
  require(prob.constraints.has_value(), "saddle_feedback: problem has no output constraints");
  ClosedLoop cl;
  cl.plant_dim = plant.state_dim;
  cl.input_dim = plant.input_dim;
  cl.dual_dim = prob.constraints->out_dim;
  cl.labels = default_labels(cl.plant_dim, cl.input_dim, cl.dual_dim);
  cl.field = [plant, prob, opt](double t, const Vec& z) -> Vec {
    Vec zeta = z.head(plant.state_dim);
    Vec u = z.segment(plant.state_dim, plant.input_dim);
    Vec mu = z.tail(prob.constraints->out_dim);
    Vec y = plant.measure(zeta, t);
    Mat sens = prob.sensitivity.eval(u);
    Vec gv = prob.constraints->value(prob.stacked(u, y));
    Vec out(z.size());
    out.head(plant.state_dim) = plant.dynamics(zeta, u);
    out.segment(plant.state_dim, plant.input_dim) =
        detail::saddle_primal_rate(prob, u, y, sens, mu, opt);
    out.tail(mu.size()) = convex::project_orthant_tangent(mu, Vec(opt.dual_gain * gv));
    return out;
  };
  return cl;
}

// Explicit-Euler discretization of the saddle controller for sampled-data use.
// The input set may be swapped between samples (time-varying capacity limits);
// the current input is re-projected into the new set.
class EulerSaddleController {
 public:
  EulerSaddleController(FeedbackProblem prob, SaddleFeedbackOptions opt, double dt)
      : prob_(std::move(prob)), opt_(opt), dt_(dt) {
    require(dt_ > 0, "EulerSaddleController: dt must be positive");
    mu_ = Vec::Zero(prob_.constraints ? prob_.constraints->out_dim : 0);
  }

  const Vec& mu() const { return mu_; }
  void set_mu(Vec mu) { mu_ = std::move(mu); }
  void set_input_set(ConvexSet set) { prob_.input_set = std::move(set); }
  const FeedbackProblem& problem() const { return prob_; }

  Vec step(const Vec& u, const Vec& y, const Mat& sens) {
    Vec rate = detail::saddle_primal_rate(prob_, u, y, sens, mu_, opt_);
    Vec u_next = convex::project_point(prob_.input_set, Vec(u + dt_ * rate));
    if (prob_.constraints) {
      Vec gv = prob_.constraints->value(prob_.stacked(u, y));
      mu_ = (mu_ + dt_ * opt_.dual_gain * gv).cwiseMax(0.0);
    }
    return u_next;
  }

  Vec step(const Vec& u, const Vec& y) { return step(u, y, prob_.sensitivity.eval(u)); }

 private:
  FeedbackProblem prob_;
  SaddleFeedbackOptions opt_;
  double dt_;
  Vec mu_;
};

// ---------------------------------------------------------------------------
// Linearized output projection:  u+ = u + alpha Sigma_alpha(u, y) with
// Sigma_alpha the solution of
//   min_w  || w + Q(u) (grad_u Phi + grad h^T grad_y Phi) ||^2_{M(u)}
//   s.t.   u + alpha w in U
//          g(u, y) + alpha (grad_u g + grad_y g grad h) w <= 0,
// where M(u) is the metric tensor and Q(u) = M(u)^{-1}. Infeasible
// linearizations fall back to an elastic QP with slack on the output rows.

struct LopOptions {
  double alpha = 0.1;
  bool implicit_metric = false;
  double sigma = 1e-6;
  double elastic_weight = 1e4;
  Vec output_weights;  // optional channel weights for the implicit metric
  Vec input_scaling;   // optional per-input scaling of the metric tensor
};

struct LopStep {
  Vec u_next;
  Vec direction;  // Sigma_alpha
  Vec slack;      // elastic slack on output rows (zero when the QP is feasible)
  bool used_elastic = false;
  std::vector<int> active_set;
};

class LopController {
 public:
  LopController(FeedbackProblem prob, LopOptions opt) : prob_(std::move(prob)), opt_(opt) {
    require(opt_.alpha > 0, "LopController: alpha must be positive");
  }

  void set_input_set(ConvexSet set) { prob_.input_set = std::move(set); }
  const FeedbackProblem& problem() const { return prob_; }

  LopStep step(const Vec& u, const Vec& y, const Mat& sens) const {
    const int p = prob_.input_dim;
    Mat M = opt_.implicit_metric
                ? implicit_metric_tensor(sens, opt_.sigma, opt_.output_weights, opt_.input_scaling)
                : Mat::Identity(p, p);
    Vec grad_hat = detail::reduced_gradient(prob_, u, y, sens);
    // (w + M^{-1} g)^T M (w + M^{-1} g) = w^T M w + 2 g^T w + const
    convex::QpProblem qp = convex::QpProblem::unconstrained(M, grad_hat);

    // input rows: A_U (u + alpha w) <= b_U
    const Mat& Au = prob_.input_set.rows_A();
    const Vec& bu = prob_.input_set.rows_b();
    int m_in = static_cast<int>(Au.rows());
    int m_out = 0;
    Vec gv;
    Mat G;  // reduced constraint Jacobian rows
    if (prob_.constraints) {
      Vec z = prob_.stacked(u, y);
      gv = prob_.constraints->value(z);
      Mat J = prob_.constraints->jacobian(z);
      G = J.leftCols(p) + J.rightCols(prob_.output_dim) * sens;
      m_out = static_cast<int>(gv.size());
    }
    qp.A_ineq = Mat::Zero(m_in + m_out, p);
    qp.b_ineq = Vec::Zero(m_in + m_out);
    if (m_in > 0) {
      qp.A_ineq.topRows(m_in) = opt_.alpha * Au;
      qp.b_ineq.head(m_in) = bu - Au * u;
    }
    if (m_out > 0) {
      qp.A_ineq.bottomRows(m_out) = opt_.alpha * G;
      qp.b_ineq.tail(m_out) = -gv;
    }

    LopStep out;
    out.slack = Vec::Zero(m_out);
    try {
      convex::QpSolution sol = convex::qp_solve(qp);
      out.direction = sol.w;
      out.active_set = sol.active_set;
    } catch (const Infeasible&) {
      out = elastic_step(qp, M, grad_hat, m_in, m_out);
    }
    out.u_next = convex::project_point(prob_.input_set, Vec(u + opt_.alpha * out.direction));
    return out;
  }

  LopStep step(const Vec& u, const Vec& y) const { return step(u, y, prob_.sensitivity.eval(u)); }

 private:
  LopStep elastic_step(const convex::QpProblem& qp, const Mat& M, const Vec& grad_hat, int m_in,
                       int m_out) const {
    const int p = static_cast<int>(M.rows());
    convex::QpProblem el;
    el.H = Mat::Zero(p + m_out, p + m_out);
    el.H.topLeftCorner(p, p) = M;
    el.H.bottomRightCorner(m_out, m_out) = opt_.elastic_weight * Mat::Identity(m_out, m_out);
    el.f = Vec::Zero(p + m_out);
    el.f.head(p) = grad_hat;
    el.A_ineq = Mat::Zero(m_in + 2 * m_out, p + m_out);
    el.b_ineq = Vec::Zero(m_in + 2 * m_out);
    el.A_ineq.topLeftCorner(m_in, p) = qp.A_ineq.topRows(m_in);
    el.b_ineq.head(m_in) = qp.b_ineq.head(m_in);
    el.A_ineq.block(m_in, 0, m_out, p) = qp.A_ineq.bottomRows(m_out);
    el.A_ineq.block(m_in, p, m_out, m_out) = -Mat::Identity(m_out, m_out);
    el.b_ineq.segment(m_in, m_out) = qp.b_ineq.tail(m_out);
    el.A_ineq.bottomRightCorner(m_out, m_out) = -Mat::Identity(m_out, m_out);
    el.A_eq = Mat::Zero(0, p + m_out);
    el.b_eq = Vec::Zero(0);
    convex::QpSolution sol = convex::qp_solve(el);
    LopStep out;
    out.direction = sol.w.head(p);
    out.slack = sol.w.tail(m_out);
    out.used_elastic = true;
    return out;
  }

  FeedbackProblem prob_;
  LopOptions opt_;
};

// ---------------------------------------------------------------------------
// Time-varying controllers (algebraic plant, time-varying disturbance).

// Running scheme: the gradient controller applied verbatim while d(t) drifts.
inline VectorField running_tv_controller(const AlgebraicPlant& plant, const FeedbackProblem& prob,
                                         double eps) {
  return gradient_feedback(plant, prob, eps);
}

// Predictive scheme:
//   udot = -eps grad h^T grad Phi(y)^T - grad h^T hess_yy Phi(y) ddot(t).
inline VectorField predictive_tv_controller(const AlgebraicPlant& plant,
                                            const FeedbackProblem& prob, double eps,
                                            std::function<Vec(double)> d_rate) {
  require(prob.cost.has_hessian(), "predictive_tv_controller: cost needs a Hessian");
  require(static_cast<bool>(d_rate), "predictive_tv_controller: d_rate source missing");
  return [plant, prob, eps, d_rate](double t, const Vec& u) -> Vec {
    Vec y = plant.measure(u, t);
    Mat sens = prob.sensitivity.eval(u);
    Vec z = prob.stacked(u, y);
    Mat Hyy = prob.cost.hessian(z).bottomRightCorner(prob.output_dim, prob.output_dim);
    return -eps * detail::reduced_gradient(prob, u, y, sens) -
           sens.transpose() * (Hyy * d_rate(t));
  };
}

// Finite-difference rate of a measured disturbance signal.
inline std::function<Vec(double)> fd_rate(std::function<Vec(double)> d, double delta = 1e-4) {
  return [d, delta](double t) -> Vec { return (d(t) - d(t - delta)) / delta; };
}

// ---------------------------------------------------------------------------
// KKT residual of the reduced problem min Phi_hat(u) s.t. u in U, g_hat(u) <= 0
// at a measured pair (u, y). Multipliers on active rows are recovered by a
// nonnegative least-squares solve.

struct KktReport {
  double stationarity = 0.0;
  double feasibility = 0.0;
  Vec multipliers;  // one per active row, order: active U rows then active g rows
};

inline KktReport kkt_residual(const FeedbackProblem& prob, const Vec& u, const Vec& y,
                              const Mat& sens, double activity_tol = 1e-6) {
  const int p = prob.input_dim;
  Vec grad_hat = detail::reduced_gradient(prob, u, y, sens);

  std::vector<Vec> rows;
  double feas = 0.0;
  const Mat& Au = prob.input_set.rows_A();
  const Vec& bu = prob.input_set.rows_b();
  for (int i = 0; i < Au.rows(); ++i) {
    double r = Au.row(i).dot(u) - bu[i];
    feas = std::max(feas, r);
    if (r >= -activity_tol * (1.0 + std::abs(bu[i]))) rows.push_back(Au.row(i).transpose());
  }
  if (prob.constraints) {
    Vec z = prob.stacked(u, y);
    Vec gv = prob.constraints->value(z);
    Mat J = prob.constraints->jacobian(z);
    Mat G = J.leftCols(p) + J.rightCols(prob.output_dim) * sens;
    for (int i = 0; i < gv.size(); ++i) {
      feas = std::max(feas, gv[i]);
      if (gv[i] >= -activity_tol * (1.0 + std::abs(gv[i]))) rows.push_back(G.row(i).transpose());
    }
  }

  KktReport rep;
  rep.feasibility = feas;
  if (rows.empty()) {
    rep.stationarity = grad_hat.norm();
    rep.multipliers = Vec::Zero(0);
    return rep;
  }
  Mat A(static_cast<int>(rows.size()), p);
  for (size_t k = 0; k < rows.size(); ++k) A.row(static_cast<int>(k)) = rows[k].transpose();
  // min_{lambda >= 0} || grad_hat + A^T lambda ||^2
  const int m = static_cast<int>(rows.size());
  convex::QpProblem qp = convex::QpProblem::unconstrained(
      Mat(A * A.transpose() + 1e-12 * Mat::Identity(m, m)), Vec(A * grad_hat));
  qp.A_ineq = -Mat::Identity(m, m);
  qp.b_ineq = Vec::Zero(m);
  convex::QpSolution sol = convex::qp_solve(qp, Vec::Zero(m));
  rep.multipliers = sol.w;
  rep.stationarity = (grad_hat + A.transpose() * sol.w).norm();
  return rep;
}

}  // namespace fbopt::control
