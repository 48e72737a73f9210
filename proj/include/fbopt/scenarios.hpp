#pragma once

// End-to-end scenario assembly: congestion control, optimal frequency
// control, reserve dispatch on the AC network, and the tutorial figure
// reproductions, with CSV traces and JSON summaries.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fbopt/controllers.hpp"
#include "fbopt/convex.hpp"
#include "fbopt/core.hpp"
#include "fbopt/flows.hpp"
#include "fbopt/powerflow.hpp"
#include "fbopt/sim.hpp"
#include "fbopt/stability.hpp"
#include "json.hpp"

namespace fbopt::scenarios {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Run summary and trace output.

struct RunSummary {
  std::string status = "time_limit";
  Vec final_state;
  double kkt_residual = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::string> violation_labels;
  Vec max_violation;
  Vec final_violation;
  Vec violation_duration;
  double cost_final = std::numeric_limits<double>::quiet_NaN();
  double cost_mean = std::numeric_limits<double>::quiet_NaN();
  double cost_min = std::numeric_limits<double>::quiet_NaN();
  double cost_max = std::numeric_limits<double>::quiet_NaN();
  double cost_gap = std::numeric_limits<double>::quiet_NaN();

  json to_json() const {
    json j;
    j["status"] = status;
    j["final_state"] = std::vector<double>(final_state.data(), final_state.data() + final_state.size());
    auto put = [&j](const char* key, double v) {
      if (std::isfinite(v))
        j[key] = v;
      else
        j[key] = nullptr;
    };
    put("kkt_residual", kkt_residual);
    put("cost_final", cost_final);
    put("cost_mean", cost_mean);
    put("cost_min", cost_min);
    put("cost_max", cost_max);
    put("cost_gap", cost_gap);
    if (max_violation.size() > 0) {
      j["violation_labels"] = violation_labels;
      j["max_violation"] = std::vector<double>(max_violation.data(),
                                               max_violation.data() + max_violation.size());
      j["final_violation"] = std::vector<double>(final_violation.data(),
                                                 final_violation.data() + final_violation.size());
      j["violation_duration"] = std::vector<double>(
          violation_duration.data(), violation_duration.data() + violation_duration.size());
    }
    return j;
  }
};

namespace detail {

inline std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

inline std::string fmt_full(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

inline void write_csv(const std::string& path, const sim::Trajectory& traj, int every = 1) {
  require(every >= 1, "write_csv: --every must be >= 1");
  std::ofstream out(path);
  if (!out) throw ConfigError("write_csv: cannot open '" + path + "'");
  out << "t";
  for (size_t k = 0; k < traj.labels.size(); ++k) out << "," << detail::csv_quote(traj.labels[k]);
  out << "\r\n";
  for (size_t k = 0; k < traj.size(); k += static_cast<size_t>(every)) {
    out << detail::fmt_full(traj.times[k]);
    const Vec& x = traj.states[k];
    for (int i = 0; i < x.size(); ++i) out << "," << detail::fmt_full(x[i]);
    out << "\r\n";
  }
  // always include the final sample
  if ((traj.size() - 1) % static_cast<size_t>(every) != 0 && traj.size() > 1) {
    out << detail::fmt_full(traj.times.back());
    const Vec& x = traj.states.back();
    for (int i = 0; i < x.size(); ++i) out << "," << detail::fmt_full(x[i]);
    out << "\r\n";
  }
}

struct ScenarioResult {
  sim::Trajectory trace;
  RunSummary summary;
  int exit_code = 0;
};

// Per-row violation bookkeeping over a recorded trajectory.
inline void accumulate_violations(const std::vector<std::string>& labels,
                                  const std::function<Vec(double, const Vec&)>& rows,
                                  const sim::Trajectory& traj, double dt, RunSummary* out) {
  const int m = static_cast<int>(labels.size());
  out->violation_labels = labels;
  out->max_violation = Vec::Zero(m);
  out->final_violation = Vec::Zero(m);
  out->violation_duration = Vec::Zero(m);
  for (size_t k = 0; k < traj.size(); ++k) {
    Vec g = rows(traj.times[k], traj.states[k]);
    for (int i = 0; i < m; ++i) {
      double v = std::max(g[i], 0.0);
      out->max_violation[i] = std::max(out->max_violation[i], v);
      if (v > 1e-9) out->violation_duration[i] += dt;
      if (k + 1 == traj.size()) out->final_violation[i] = v;
    }
  }
}

// ---------------------------------------------------------------------------
// Network congestion control (primal-dual rate control).
//
//   xdot_i = -grad Phi_i(x_i) - (R^T mu)_i     (log utilities by default)
//   mudot_j = Pi_{>=0}[ (R x)_j - c_j ](mu_j)

struct CongestionScenario {
  Mat routing;  // links x sources, 0/1 entries
  Vec capacity;
  Vec weights;  // Phi_i(x) = -w_i log x_i
  Vec x0;
  double dt = 2e-3;
  double t_end = 300.0;

  int sources() const { return static_cast<int>(routing.cols()); }
  int links() const { return static_cast<int>(routing.rows()); }

  void validate() const {
    require_dims(capacity.size() == routing.rows() && weights.size() == routing.cols(),
                 "CongestionScenario: dims");
    require(capacity.minCoeff() > 0, "CongestionScenario: capacities must be positive");
    for (int i = 0; i < routing.size(); ++i) {
      double v = routing(i / routing.cols(), i % routing.cols());
      require(v == 0.0 || v == 1.0, "CongestionScenario: routing must be 0/1");
    }
  }

  flows::VectorField field() const {
    Mat R = routing;
    Vec w = weights, c = capacity;
    int n = sources(), m = links();
    return [R, w, c, n, m](double, const Vec& z) -> Vec {
      Vec x = z.head(n), mu = z.tail(m);
      if (x.minCoeff() <= 0.0)
        throw OutOfDomain("congestion: source rate left the positive domain");
      Vec p = R.transpose() * mu;
      Vec out(n + m);
      out.head(n) = w.cwiseQuotient(x) - p;  // -grad Phi - price
      out.tail(m) = convex::project_orthant_tangent(mu, Vec(R * x - c));
      return out;
    };
  }

  std::vector<std::string> labels() const {
    std::vector<std::string> lab;
    for (int i = 0; i < sources(); ++i) lab.push_back("x" + std::to_string(i + 1));
    for (int j = 0; j < links(); ++j) lab.push_back("mu" + std::to_string(j + 1));
    return lab;
  }
};

inline ScenarioResult run_congestion(const CongestionScenario& sc) {
  sc.validate();
  ScenarioResult res;
  sim::IntegratorConfig cfg;
  cfg.method = sim::Method::Euler;
  cfg.dt = sc.dt;
  cfg.t_end = sc.t_end;
  cfg.convergence_tol = 1e-10;
  Vec lo = Vec::Zero(sc.sources() + sc.links());
  lo.head(sc.sources()).setConstant(-kInf);  // x guarded by the domain check
  cfg.projection_set = convex::ConvexSet::box(lo, Vec::Constant(lo.size(), kInf));
  Vec z0(sc.sources() + sc.links());
  z0.head(sc.sources()) = sc.x0;
  z0.tail(sc.links()).setZero();
  try {
    auto r = sim::integrate(sc.field(), z0, cfg, sc.labels());
    res.trace = r.trajectory;
    res.summary.status = sim::to_string(r.status);
    res.summary.final_state = r.trajectory.back();
    res.exit_code = (r.status == sim::Status::Diverged) ? 2 : 0;
  } catch (const sim::FieldDomainError& e) {
    res.summary.status = "aborted";
    res.exit_code = 3;
    throw;
  }
  std::vector<std::string> vlabels;
  for (int j = 0; j < sc.links(); ++j) vlabels.push_back("link" + std::to_string(j + 1));
  Mat R = sc.routing;
  Vec c = sc.capacity;
  int n = sc.sources();
  accumulate_violations(
      vlabels, [R, c, n](double, const Vec& z) -> Vec { return R * z.head(n) - c; }, res.trace,
      sc.dt, &res.summary);
  return res;
}

// KKT system of min -sum w_i log x_i s.t. Rx <= c for the congestion oracle:
// solved directly by Newton on the complementarity-free active-set guess.
inline std::pair<Vec, Vec> congestion_kkt(const CongestionScenario& sc,
                                           const std::vector<int>& active) {
  // stationarity: w_i / x_i = (R^T mu)_i, active links tight, others mu = 0
  const int n = sc.sources();
  const int m = static_cast<int>(active.size());
  Vec mu_a = Vec::Ones(m);
  for (int it = 0; it < 200; ++it) {
    // x(mu) from stationarity
    Mat Ra(m, n);
    for (int k = 0; k < m; ++k) Ra.row(k) = sc.routing.row(active[k]);
    Vec p = Ra.transpose() * mu_a;
    Vec x = sc.weights.cwiseQuotient(p);
    Vec r(m);
    for (int k = 0; k < m; ++k) r[k] = sc.routing.row(active[k]).dot(x) - sc.capacity[active[k]];
    if (r.norm() <= 1e-14) break;
    Mat J(m, m);
    for (int k = 0; k < m; ++k)
      for (int l = 0; l < m; ++l) {
        double s = 0.0;
        for (int i = 0; i < n; ++i)
          s += Ra(k, i) * Ra(l, i) * sc.weights[i] / (p[i] * p[i]);
        J(k, l) = s;
      }
    mu_a += J.fullPivLu().solve(r);
  }
  Mat Ra(m, n);
  for (int k = 0; k < m; ++k) Ra.row(k) = sc.routing.row(active[k]);
  Vec x = sc.weights.cwiseQuotient(Vec(Ra.transpose() * mu_a));
  Vec mu = Vec::Zero(sc.links());
  for (int k = 0; k < m; ++k) mu[active[k]] = mu_a[k];
  return {x, mu};
}

// ---------------------------------------------------------------------------
// Optimal frequency control.
//
// Physical automatic generation control per bus j and line e = (from, to):
//   M_j wdot_j   = pm_j - D_j w_j - pl_j(t) - sum_e inc p_e
//   T_j pmdot_j  = -(pm_j - pc_j + w_j / R_j)
//   pcdot_j      = -K_j (B_j w_j + sum_e inc p_e)
//   pdot_e       = b_e (w_from - w_to)
//
// Mode AceGradient takes B_j = D_j + 1/R_j (the ACE output makes h(u) = u - d
// and the controller is the feedback gradient flow). Mode SaddleEquivalent
// takes B_j = D_j, for which the loop coincides with a partial primal-dual
// flow under the gain identifications implemented in saddle_field().

enum class FrequencyMode { SaddleEquivalent, AceGradient };

struct FrequencyParams {
  std::vector<std::array<int, 2>> edges;
  Vec susceptance;  // per edge, > 0
  Vec inertia, damping, turbine, droop, ace_gain;  // M, D, T, R, K per bus
  plants::Signal load;                             // pl(t), per bus
  FrequencyMode mode = FrequencyMode::AceGradient;
  double dt = 1e-3;
  double t_end = 120.0;

  int buses() const { return static_cast<int>(inertia.size()); }
  int lines() const { return static_cast<int>(edges.size()); }

  void validate() const {
    require(inertia.minCoeff() > 0 && damping.minCoeff() > 0 && turbine.minCoeff() > 0 &&
                droop.minCoeff() > 0 && ace_gain.minCoeff() > 0,
            "FrequencyParams: parameters must be positive");
    require_dims(susceptance.size() == lines(), "FrequencyParams: susceptance per edge");
    require(susceptance.minCoeff() > 0, "FrequencyParams: susceptances must be positive");
  }

  Vec ace_bias() const {
    return mode == FrequencyMode::AceGradient
               ? Vec(damping + droop.cwiseInverse())
               : damping;
  }

  // state [w (n); pm (n); pc (n); p (E)]
  flows::VectorField physical_field() const {
    validate();
    auto self = *this;
    Vec B = ace_bias();
    return [self, B](double t, const Vec& z) -> Vec {
      const int n = self.buses(), E = self.lines();
      Vec w = z.segment(0, n), pm = z.segment(n, n), pc = z.segment(2 * n, n),
          p = z.tail(E);
      Vec pl = self.load.value(t);
      Vec flow_sum = Vec::Zero(n);
      for (int e = 0; e < E; ++e) {
        flow_sum[self.edges[e][0]] += p[e];
        flow_sum[self.edges[e][1]] -= p[e];
      }
      Vec out(z.size());
      for (int j = 0; j < n; ++j) {
        out[j] = (pm[j] - self.damping[j] * w[j] - pl[j] - flow_sum[j]) / self.inertia[j];
        out[n + j] = -(pm[j] - pc[j] + w[j] / self.droop[j]) / self.turbine[j];
        out[2 * n + j] = -self.ace_gain[j] * (B[j] * w[j] + flow_sum[j]);
      }
      for (int e = 0; e < E; ++e)
        out[3 * n + e] = self.susceptance[e] * (w[self.edges[e][0]] - w[self.edges[e][1]]);
      return out;
    };
  }

  // Gain identifications mapping the AGC loop (with B_j = D_j) onto the
  // partial saddle flow: beta_j = 1/(K_j M_j - 1/R_j), eps_pm = 1/(T_j b_j),
  // eps_mu = K_j beta_j, eps_w = 1/M_j, eps_line = b_e, with the dual related
  // to the adjustment by pc_j = K_j (M_j w_j + mu_j / eps_mu_j).
  Vec saddle_beta() const {
    Vec beta(buses());
    for (int j = 0; j < buses(); ++j) {
      double denom = ace_gain[j] * inertia[j] - 1.0 / droop[j];
      require(denom > 0, "FrequencyParams: gain mapping needs K M > 1/R");
      beta[j] = 1.0 / denom;
    }
    return beta;
  }

  // state [w (n); pm (n); mu (n); p (E)]
  flows::VectorField saddle_form_field() const {
    validate();
    auto self = *this;
    Vec beta = saddle_beta();
    return [self, beta](double t, const Vec& z) -> Vec {
      const int n = self.buses(), E = self.lines();
      Vec w = z.segment(0, n), pm = z.segment(n, n), mu = z.segment(2 * n, n), p = z.tail(E);
      Vec pl = self.load.value(t);
      Vec flow_sum = Vec::Zero(n);
      for (int e = 0; e < E; ++e) {
        flow_sum[self.edges[e][0]] += p[e];
        flow_sum[self.edges[e][1]] -= p[e];
      }
      Vec out(z.size());
      for (int j = 0; j < n; ++j) {
        double eps_pm = 1.0 / (self.turbine[j] * beta[j]);
        double eps_mu = self.ace_gain[j] * beta[j];
        out[j] = (pm[j] - self.damping[j] * w[j] - pl[j] - flow_sum[j]) / self.inertia[j];
        out[n + j] = -eps_pm * (beta[j] * pm[j] - mu[j] - w[j]);
        out[2 * n + j] = -eps_mu * (pm[j] - pl[j]);
      }
      for (int e = 0; e < E; ++e)
        out[3 * n + e] = self.susceptance[e] * (w[self.edges[e][0]] - w[self.edges[e][1]]);
      return out;
    };
  }

  // Maps a saddle-form state to the physical coordinates (w, pm, pc, p).
  Vec saddle_to_physical(const Vec& z) const {
    const int n = buses(), E = lines();
    Vec beta = saddle_beta();
    Vec out(z.size());
    out.head(2 * n) = z.head(2 * n);
    for (int j = 0; j < n; ++j) {
      double eps_mu = ace_gain[j] * beta[j];
      out[2 * n + j] = ace_gain[j] * (inertia[j] * z[j] + z[2 * n + j] / eps_mu);
    }
    out.tail(E) = z.tail(E);
    return out;
  }

  std::vector<std::string> labels() const {
    std::vector<std::string> lab;
    for (int j = 0; j < buses(); ++j) lab.push_back("omega" + std::to_string(j + 1));
    for (int j = 0; j < buses(); ++j) lab.push_back("pm" + std::to_string(j + 1));
    for (int j = 0; j < buses(); ++j) lab.push_back("pc" + std::to_string(j + 1));
    for (int e = 0; e < lines(); ++e) lab.push_back("flow" + std::to_string(e + 1));
  return lab;
  }
};

// Three buses in a line with well-damped AGC gains; K M > 1/R keeps the
// saddle-form gain mapping valid.
inline FrequencyParams three_bus_line_graph(FrequencyMode mode) {
  FrequencyParams fp;
  fp.edges = {{0, 1}, {1, 2}};
  fp.susceptance = Vec::Ones(2);
  fp.inertia = Vec::Constant(3, 2.0);
  fp.damping = Vec::Ones(3);
  fp.turbine = Vec::Constant(3, 0.5);
  fp.droop = Vec::Constant(3, 2.0);
  fp.ace_gain = Vec::Constant(3, 0.4);
  Vec step = Vec::Zero(3);
  step[1] = 0.1;
  fp.load = plants::Signal::steps({0.0, 1.0}, {Vec::Zero(3), step});
  fp.mode = mode;
  fp.t_end = 160.0;
  return fp;
}

inline ScenarioResult run_frequency(const FrequencyParams& fp) {
  ScenarioResult res;
  sim::IntegratorConfig cfg;
  cfg.dt = fp.dt;
  cfg.t_end = fp.t_end;
  auto r = sim::integrate(fp.physical_field(), Vec::Zero(3 * fp.buses() + fp.lines()), cfg,
                          fp.labels());
  res.trace = r.trajectory;
  res.summary.status = sim::to_string(r.status);
  res.summary.final_state = r.trajectory.back();
  res.exit_code = (r.status == sim::Status::Diverged) ? 2 : 0;
  return res;
}

// ---------------------------------------------------------------------------
// Reserve dispatch on the AC network (algebraic power-flow plant, sampled
// controllers at 1-minute steps).

enum class DispatchController { Saddle, Lop };

struct DispatchProfiles {
  plants::Signal loads_p;  // per bus
  plants::Signal loads_q;
  plants::Signal gen_caps;  // per dispatchable unit (pg upper bounds)
};

struct DispatchScenario {
  pf::OpfProblem opf;
  DispatchProfiles profiles;
  DispatchController controller = DispatchController::Lop;
  double dt = 1.0;  // minutes
  double t_end = 270.0;
  double saddle_eps = 1.0;
  double saddle_rho = 1.0;
  double saddle_dual_gain = 0.1;
  std::vector<double> checkpoints;  // times at which the oracle gap is taken
  int oracle_starts = 20;
  unsigned seed = 1;
};

struct DispatchRun {
  ScenarioResult result;
  std::vector<double> checkpoint_kkt;
  std::vector<double> checkpoint_gap;
  std::vector<std::string> row_labels;
};

// Multi-start projected-gradient solve of the reduced dispatch problem at
// fixed loads/caps; the independent cost oracle for RunSummary.cost_gap.
inline double dispatch_oracle_cost(const pf::DispatchProblem& dp, const pf::GridState& base,
                                   const Vec& lo, const Vec& hi, int starts,
                                   std::mt19937_64& rng) {
  auto box = convex::ConvexSet::box(lo, hi);
  auto solve_y = [&](const Vec& u, pf::GridState* out) -> bool {
    pf::GridState s = base;
    dp.model.apply_input(u, &s);
    try {
      *out = dp.model.solve(s);
      return true;
    } catch (const Error&) {
      return false;
    }
  };
  auto eval = [&](const Vec& u, double rho, double* cost_out, double* viol_out, Vec* grad) -> bool {
    pf::GridState s;
    if (!solve_y(u, &s)) return false;
    Vec y = dp.model.measure(s);
    Vec z = dp.feedback.stacked(u, y);
    Vec gv = dp.feedback.constraints->value(z);
    Vec gplus = gv.cwiseMax(0.0);
    double cost = dp.feedback.cost.value(z);
    if (cost_out) *cost_out = cost;
    if (viol_out) *viol_out = gplus.maxCoeff();
    if (grad) {
      Mat S = dp.model.sensitivity(s);
      Vec gc = control::detail::reduced_gradient(dp.feedback, u, y, S);
      Mat J = dp.feedback.constraints->jacobian(z);
      Mat G = J.leftCols(dp.feedback.input_dim) +
              J.rightCols(dp.feedback.output_dim) * S;
      *grad = gc + rho * (G.transpose() * gplus);
    }
    return true;
  };

  std::uniform_real_distribution<double> unif(0.0, 1.0);
  double best = kInf;
  for (int s0 = 0; s0 < starts; ++s0) {
    Vec u(lo.size());
    for (int i = 0; i < u.size(); ++i)
      u[i] = std::isfinite(lo[i]) && std::isfinite(hi[i])
                 ? lo[i] + unif(rng) * (hi[i] - lo[i])
                 : 0.0;
    bool ok = true;
    for (double rho : {1e2, 1e4, 1e6}) {
      double step = 0.5;
      for (int it = 0; it < 120 && ok; ++it) {
        double cost, viol;
        Vec grad;
        if (!eval(u, rho, &cost, &viol, &grad)) {
          ok = false;
          break;
        }
        double merit0 = cost;  // recompute merit with penalty below
        {
          pf::GridState s;
          solve_y(u, &s);
          Vec y = dp.model.measure(s);
          Vec z = dp.feedback.stacked(u, y);
          merit0 = dp.feedback.cost.value(z) +
                   0.5 * rho * dp.feedback.constraints->value(z).cwiseMax(0.0).squaredNorm();
        }
        Vec u_new;
        bool improved = false;
        for (int ls = 0; ls < 20; ++ls) {
          u_new = convex::project_point(box, Vec(u - step * grad));
          pf::GridState s;
          if (!solve_y(u_new, &s)) {
            step *= 0.5;
            continue;
          }
          Vec y = dp.model.measure(s);
          Vec z = dp.feedback.stacked(u_new, y);
          double merit = dp.feedback.cost.value(z) +
                         0.5 * rho *
                             dp.feedback.constraints->value(z).cwiseMax(0.0).squaredNorm();
          if (merit <= merit0 - 1e-12) {
            improved = true;
            break;
          }
          step *= 0.5;
        }
        if (!improved) break;
        if ((u_new - u).norm() <= 1e-10 * (1.0 + u.norm())) {
          u = u_new;
          break;
        }
        u = u_new;
        step = std::min(step * 2.0, 0.5);
      }
    }
    if (!ok) continue;
    double cost, viol;
    if (eval(u, 0.0, &cost, &viol, nullptr) && viol <= 1e-5) best = std::min(best, cost);
  }
  return best;
}

inline DispatchRun run_dispatch(const DispatchScenario& sc) {
  DispatchRun run;
  auto dp = pf::assemble_feedback_problem(sc.opf);
  run.row_labels = dp.row_labels;
  const int ng = static_cast<int>(dp.model.gen_buses.size());
  RunSummary& summary = run.result.summary;

  // initial state: profiles at t = 0, generators at mid box
  pf::GridState state = sc.opf.base;
  auto apply_profiles = [&](double t, pf::GridState* s, Vec* lo, Vec* hi) {
    Vec pl = sc.profiles.loads_p.value(t);
    Vec ql = sc.profiles.loads_q.value(t);
    s->pl = pl;
    s->ql = ql;
    *lo = dp.input_lower;
    *hi = dp.input_upper;
    Vec caps = sc.profiles.gen_caps.value(t);
    for (int k = 0; k < ng; ++k) (*hi)[k] = std::min((*hi)[k], caps[k]);
  };
  Vec lo, hi;
  apply_profiles(0.0, &state, &lo, &hi);
  for (int k = 0; k < ng; ++k) state.pg[dp.model.gen_buses[k]] = 0.5 * (lo[k] + hi[k]);
  pf::GridState solved = dp.model.solve(state);
  Vec u = dp.model.pack_input(solved);
  Mat S0 = dp.model.sensitivity(solved);
  Vec weights = dp.metric_output_weights(S0);

  control::LopOptions lop_opt;
  lop_opt.alpha = sc.dt;
  lop_opt.implicit_metric = true;
  lop_opt.output_weights = weights;
  control::LopController lop(dp.feedback, lop_opt);

  control::SaddleFeedbackOptions sad_opt;
  sad_opt.eps = sc.saddle_eps;
  sad_opt.rho = sc.saddle_rho;
  sad_opt.dual_gain = sc.saddle_dual_gain;
  sad_opt.implicit_metric = true;
  sad_opt.output_weights = weights;
  control::EulerSaddleController saddle(dp.feedback, sad_opt, sc.dt);

  // trace: u, y, cost, max violation
  std::vector<std::string> labels;
  for (int k = 0; k < ng; ++k)
    labels.push_back("pg_" + dp.model.net.buses[dp.model.gen_buses[k]].id);
  for (int k = 0; k < ng; ++k)
    labels.push_back("qg_" + dp.model.net.buses[dp.model.gen_buses[k]].id);
  labels.push_back("pg_slack");
  labels.push_back("qg_slack");
  for (int i : dp.model.nonslack_buses) labels.push_back("v_" + dp.model.net.buses[i].id);
  for (const auto& br : dp.model.net.branches)
    labels.push_back("i2_" + dp.model.net.buses[br.from].id + "_" +
                     dp.model.net.buses[br.to].id);
  labels.push_back("cost");
  labels.push_back("max_violation");

  sim::Trajectory trace;
  trace.labels = labels;
  const int m_rows = dp.feedback.constraints->out_dim;
  summary.violation_labels = dp.row_labels;
  summary.max_violation = Vec::Zero(m_rows);
  summary.final_violation = Vec::Zero(m_rows);
  summary.violation_duration = Vec::Zero(m_rows);
  double cost_sum = 0.0, cost_min = kInf, cost_max = -kInf, cost_final = 0.0;
  std::mt19937_64 rng(sc.seed);
  size_t next_checkpoint = 0;
  std::vector<double> cps = sc.checkpoints;
  std::sort(cps.begin(), cps.end());

  const long steps = static_cast<long>(std::llround(sc.t_end / sc.dt));
  int exit_code = 0;
  try {
    for (long k = 0; k <= steps; ++k) {
      double t = k * sc.dt;
      apply_profiles(t, &state, &lo, &hi);
      auto box = convex::ConvexSet::box(lo, hi);
      u = convex::project_point(box, u);  // caps may have tightened (outage)
      dp.model.apply_input(u, &state);
      solved = dp.model.solve(state);
      Vec y = dp.model.measure(solved);
      Mat S = dp.model.sensitivity(solved);
      Vec z = dp.feedback.stacked(u, y);
      double cost = dp.feedback.cost.value(z);
      Vec gv = dp.feedback.constraints->value(z);
      cost_sum += cost;
      cost_min = std::min(cost_min, cost);
      cost_max = std::max(cost_max, cost);
      cost_final = cost;
      for (int i = 0; i < m_rows; ++i) {
        double v = std::max(gv[i], 0.0);
        summary.max_violation[i] = std::max(summary.max_violation[i], v);
        if (v > 1e-9) summary.violation_duration[i] += sc.dt;
        summary.final_violation[i] = v;
      }
      Vec row(static_cast<int>(labels.size()));
      row << u, y, cost, gv.maxCoeff();
      trace.times.push_back(t);
      trace.states.push_back(row);

      if (next_checkpoint < cps.size() && t >= cps[next_checkpoint] - 1e-9) {
        control::FeedbackProblem fb_t = dp.feedback;
        fb_t.input_set = box;  // KKT against the caps in force at time t
        auto rep = control::kkt_residual(fb_t, u, y, S, 1e-5);
        run.checkpoint_kkt.push_back(rep.stationarity);
        double oracle = dispatch_oracle_cost(dp, state, lo, hi, sc.oracle_starts, rng);
        run.checkpoint_gap.push_back(std::isfinite(oracle)
                                         ? (cost - oracle) / std::max(std::abs(oracle), 1e-9)
                                         : kInf);
        ++next_checkpoint;
      }
      if (k == steps) break;

      // controller step on the measured pair
      if (sc.controller == DispatchController::Lop) {
        lop.set_input_set(box);
        u = lop.step(u, y, S).u_next;
      } else {
        saddle.set_input_set(box);
        u = saddle.step(u, y, S);
      }
    }
  } catch (const NoConvergence&) {
    summary.status = "no_convergence";
    exit_code = 3;
  }
  if (exit_code == 0) summary.status = "time_limit";
  summary.final_state = trace.states.empty() ? Vec() : trace.states.back();
  const long n_rec = static_cast<long>(trace.size());
  summary.cost_mean = n_rec > 0 ? cost_sum / static_cast<double>(n_rec) : kInf;
  summary.cost_min = cost_min;
  summary.cost_max = cost_max;
  summary.cost_final = cost_final;
  if (!run.checkpoint_kkt.empty()) summary.kkt_residual = run.checkpoint_kkt.back();
  if (!run.checkpoint_gap.empty())
    summary.cost_gap = *std::max_element(run.checkpoint_gap.begin(), run.checkpoint_gap.end());
  run.result.trace = std::move(trace);
  run.result.exit_code = exit_code;
  return run;
}

// Baseline dispatch scenario on the versioned 6-bus network: a moderate-wind
// segment, a high-wind segment that congests the wind corridor, and a
// conventional-unit outage, at 1-minute sampling.
inline DispatchScenario default_dispatch_scenario(const std::string& network_path,
                                                  DispatchController controller) {
  DispatchScenario sc;
  sc.opf.network = pf::PowerNetwork::load(network_path);
  sc.opf.cost["g1"] = {0.5, 0.4};
  sc.opf.cost["g2"] = {0.4, 0.3};
  sc.opf.cost["w3"] = {0.01, 0.0};
  sc.opf.base = pf::GridState::flat(sc.opf.network.size());
  sc.controller = controller;
  Vec pl = Vec::Zero(6), ql = Vec::Zero(6);
  pl[3] = 0.5;
  pl[4] = 0.6;
  pl[5] = 0.1;
  ql[3] = 0.1;
  ql[4] = 0.12;
  ql[5] = 0.03;
  sc.profiles.loads_p = plants::Signal::constant(pl);
  sc.profiles.loads_q = plants::Signal::constant(ql);
  // caps per dispatchable unit (g2, w3): high wind from t=90, g2 outage at 180
  Vec caps0(2), caps1(2), caps2(2);
  caps0 << 1.5, 0.4;
  caps1 << 1.5, 1.2;
  caps2 << 0.0, 1.2;
  sc.profiles.gen_caps = plants::Signal::steps({0.0, 90.0, 180.0}, {caps0, caps1, caps2});
  sc.t_end = 270.0;
  sc.checkpoints = {89.0, 179.0, 269.0};
  return sc;
}

}  // namespace fbopt::scenarios
