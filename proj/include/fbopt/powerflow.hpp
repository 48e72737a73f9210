#pragma once

// AC power network model, branch-flow functions, Newton-Raphson power flow,
// steady-state sensitivities via the implicit function theorem, and assembly
// of the reserve-dispatch feedback problem.

#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fbopt/controllers.hpp"
#include "fbopt/convex.hpp"
#include "fbopt/core.hpp"
#include "json.hpp"

namespace fbopt::pf {

enum class BusType { Slack, PV, PQ };

struct Bus {
  std::string id;
  BusType type = BusType::PQ;
  double v_min = 0.9, v_max = 1.1;
  double p_min = 0.0, p_max = 0.0;
  double q_min = 0.0, q_max = 0.0;
};

struct Branch {
  int from = 0, to = 0;  // bus indices
  double g = 0.0, b = 0.0;  // series conductance / susceptance, p.u.
  double i_max = kInf;      // current magnitude limit, p.u.
};

// Directed branch quantities from l toward k (standard pi-model, no shunts):
//   p_lk = g v_l^2 - v_l v_k (g cos D + b sin D)
//   q_lk = -b v_l^2 - v_l v_k (g sin D - b cos D)
//   i2_lk = (g^2 + b^2)(v_l^2 + v_k^2 - 2 v_l v_k cos D),  D = th_l - th_k
struct BranchFlow {
  double p = 0.0, q = 0.0, i2 = 0.0;
};

inline BranchFlow branch_flows(double v_l, double v_k, double th_l, double th_k, double g,
                               double b) {
  const double D = th_l - th_k;
  const double c = std::cos(D), s = std::sin(D);
  BranchFlow f;
  f.p = g * v_l * v_l - v_l * v_k * (g * c + b * s);
  f.q = -b * v_l * v_l - v_l * v_k * (g * s - b * c);
  f.i2 = (g * g + b * b) * (v_l * v_l + v_k * v_k - 2.0 * v_l * v_k * c);
  return f;
}

// Partials of (p_lk, q_lk, i2_lk) with respect to (v_l, v_k, th_l, th_k).
struct BranchFlowJac {
  double dp[4], dq[4], di2[4];
};

inline BranchFlowJac branch_flow_jacobian(double v_l, double v_k, double th_l, double th_k,
                                          double g, double b) {
  const double D = th_l - th_k;
  const double c = std::cos(D), s = std::sin(D);
  BranchFlowJac J;
  J.dp[0] = 2.0 * g * v_l - v_k * (g * c + b * s);
  J.dp[1] = -v_l * (g * c + b * s);
  J.dp[2] = v_l * v_k * (g * s - b * c);
  J.dp[3] = -J.dp[2];
  J.dq[0] = -2.0 * b * v_l - v_k * (g * s - b * c);
  J.dq[1] = -v_l * (g * s - b * c);
  J.dq[2] = -v_l * v_k * (g * c + b * s);
  J.dq[3] = -J.dq[2];
  const double y2 = g * g + b * b;
  J.di2[0] = y2 * (2.0 * v_l - 2.0 * v_k * c);
  J.di2[1] = y2 * (2.0 * v_k - 2.0 * v_l * c);
  J.di2[2] = y2 * 2.0 * v_l * v_k * s;
  J.di2[3] = -J.di2[2];
  return J;
}

class PowerNetwork {
 public:
  std::vector<Bus> buses;
  std::vector<Branch> branches;

  int size() const { return static_cast<int>(buses.size()); }

  int slack_index() const {
    for (int i = 0; i < size(); ++i)
      if (buses[i].type == BusType::Slack) return i;
    throw Error("PowerNetwork: no slack bus");
  }

  int index_of(const std::string& id) const {
    for (int i = 0; i < size(); ++i)
      if (buses[i].id == id) return i;
    throw Error("PowerNetwork: unknown bus id '" + id + "'");
  }

  void validate() const {
    int slacks = 0;
    for (const auto& bus : buses) {
      if (bus.type == BusType::Slack) ++slacks;
      require(bus.v_min <= bus.v_max && bus.p_min <= bus.p_max && bus.q_min <= bus.q_max,
              "PowerNetwork: bounds out of order at bus " + bus.id);
    }
    require(slacks == 1, "PowerNetwork: exactly one slack bus required");
    // connectivity
    std::vector<int> comp(size(), -1);
    std::vector<int> stack = {0};
    comp[0] = 0;
    while (!stack.empty()) {
      int i = stack.back();
      stack.pop_back();
      for (const auto& br : branches) {
        int nb = -1;
        if (br.from == i) nb = br.to;
        if (br.to == i) nb = br.from;
        if (nb >= 0 && comp[nb] < 0) {
          comp[nb] = 0;
          stack.push_back(nb);
        }
      }
    }
    for (int i = 0; i < size(); ++i)
      require(comp[i] == 0, "PowerNetwork: graph is not connected");
  }

  // Per-bus list of (branch index, true if the bus is the 'from' endpoint).
  std::vector<std::vector<std::pair<int, bool>>> incidence() const {
    std::vector<std::vector<std::pair<int, bool>>> inc(size());
    for (int e = 0; e < static_cast<int>(branches.size()); ++e) {
      inc[branches[e].from].push_back({e, true});
      inc[branches[e].to].push_back({e, false});
    }
    return inc;
  }

  static PowerNetwork from_json(const nlohmann::json& j) {
    PowerNetwork net;
    for (const auto& jb : j.at("buses")) {
      Bus bus;
      bus.id = jb.at("id").get<std::string>();
      std::string type = jb.at("type").get<std::string>();
      if (type == "slack")
        bus.type = BusType::Slack;
      else if (type == "pv")
        bus.type = BusType::PV;
      else if (type == "pq")
        bus.type = BusType::PQ;
      else
        throw ConfigError("PowerNetwork: unknown bus type '" + type + "'");
      bus.v_min = jb.at("v_min").get<double>();
      bus.v_max = jb.at("v_max").get<double>();
      bus.p_min = jb.at("p_min").get<double>();
      bus.p_max = jb.at("p_max").get<double>();
      bus.q_min = jb.at("q_min").get<double>();
      bus.q_max = jb.at("q_max").get<double>();
      net.buses.push_back(bus);
    }
    for (const auto& je : j.at("branches")) {
      Branch br;
      br.from = net.index_of(je.at("from").get<std::string>());
      br.to = net.index_of(je.at("to").get<std::string>());
      br.g = je.at("g").get<double>();
      br.b = je.at("b").get<double>();
      br.i_max = je.contains("i_max") ? je.at("i_max").get<double>() : kInf;
      net.branches.push_back(br);
    }
    net.validate();
    return net;
  }

  static PowerNetwork load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("PowerNetwork: cannot open '" + path + "'");
    nlohmann::json j;
    in >> j;
    return from_json(j);
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["buses"] = nlohmann::json::array();
    for (const auto& bus : buses) {
      const char* type = bus.type == BusType::Slack ? "slack" : bus.type == BusType::PV ? "pv" : "pq";
      j["buses"].push_back({{"id", bus.id},
                            {"type", type},
                            {"v_min", bus.v_min},
                            {"v_max", bus.v_max},
                            {"p_min", bus.p_min},
                            {"p_max", bus.p_max},
                            {"q_min", bus.q_min},
                            {"q_max", bus.q_max}});
    }
    j["branches"] = nlohmann::json::array();
    for (const auto& br : branches) {
      j["branches"].push_back({{"from", buses[br.from].id},
                               {"to", buses[br.to].id},
                               {"g", br.g},
                               {"b", br.b},
                               {"i_max", br.i_max}});
    }
    return j;
  }
};

// Per-bus electrical state plus injections. v/theta serve as both the initial
// guess (PQ) and the fixed setpoints (PV magnitude, slack magnitude+angle).
struct GridState {
  Vec v, theta, pg, qg, pl, ql;

  static GridState flat(int n) {
    GridState s;
    s.v = Vec::Ones(n);
    s.theta = Vec::Zero(n);
    s.pg = Vec::Zero(n);
    s.qg = Vec::Zero(n);
    s.pl = Vec::Zero(n);
    s.ql = Vec::Zero(n);
    return s;
  }
};

// Sum of directed branch flows leaving each bus.
inline void bus_flow_sums(const PowerNetwork& net, const Vec& v, const Vec& theta, Vec* psum,
                          Vec* qsum) {
  const int n = net.size();
  *psum = Vec::Zero(n);
  *qsum = Vec::Zero(n);
  for (const auto& br : net.branches) {
    auto f_lk = branch_flows(v[br.from], v[br.to], theta[br.from], theta[br.to], br.g, br.b);
    auto f_kl = branch_flows(v[br.to], v[br.from], theta[br.to], theta[br.from], br.g, br.b);
    (*psum)[br.from] += f_lk.p;
    (*qsum)[br.from] += f_lk.q;
    (*psum)[br.to] += f_kl.p;
    (*qsum)[br.to] += f_kl.q;
  }
}

namespace detail {

struct NewtonIndex {
  std::vector<int> theta_of;  // bus -> unknown index or -1
  std::vector<int> v_of;
  std::vector<int> prow_of;  // bus -> P-mismatch row or -1
  std::vector<int> qrow_of;
  int n_unknowns = 0;

  static NewtonIndex build(const PowerNetwork& net) {
    NewtonIndex ix;
    const int n = net.size();
    ix.theta_of.assign(n, -1);
    ix.v_of.assign(n, -1);
    ix.prow_of.assign(n, -1);
    ix.qrow_of.assign(n, -1);
    int at = 0;
    for (int i = 0; i < n; ++i)
      if (net.buses[i].type != BusType::Slack) {
        ix.theta_of[i] = at++;
      }
    for (int i = 0; i < n; ++i)
      if (net.buses[i].type == BusType::PQ) {
        ix.v_of[i] = at++;
      }
    int row = 0;
    for (int i = 0; i < n; ++i)
      if (net.buses[i].type != BusType::Slack) ix.prow_of[i] = row++;
    for (int i = 0; i < n; ++i)
      if (net.buses[i].type == BusType::PQ) ix.qrow_of[i] = row++;
    ix.n_unknowns = at;
    return ix;
  }
};

inline Vec mismatch(const PowerNetwork& net, const NewtonIndex& ix, const GridState& s) {
  Vec psum, qsum;
  bus_flow_sums(net, s.v, s.theta, &psum, &qsum);
  Vec F = Vec::Zero(ix.n_unknowns);
  for (int i = 0; i < net.size(); ++i) {
    if (ix.prow_of[i] >= 0) F[ix.prow_of[i]] = s.pg[i] - s.pl[i] - psum[i];
    if (ix.qrow_of[i] >= 0) F[ix.qrow_of[i]] = s.qg[i] - s.ql[i] - qsum[i];
  }
  return F;
}

// dF/dx over the unknowns (theta at non-slack, v at PQ).
inline Mat mismatch_jacobian(const PowerNetwork& net, const NewtonIndex& ix, const GridState& s) {
  Mat J = Mat::Zero(ix.n_unknowns, ix.n_unknowns);
  auto add = [&](int row, int bus, double dp_dv, double dp_dth) {
    if (row < 0) return;
    if (ix.v_of[bus] >= 0) J(row, ix.v_of[bus]) -= dp_dv;
    if (ix.theta_of[bus] >= 0) J(row, ix.theta_of[bus]) -= dp_dth;
  };
  for (const auto& br : net.branches) {
    const int l = br.from, k = br.to;
    auto Jlk = branch_flow_jacobian(s.v[l], s.v[k], s.theta[l], s.theta[k], br.g, br.b);
    auto Jkl = branch_flow_jacobian(s.v[k], s.v[l], s.theta[k], s.theta[l], br.g, br.b);
    // F_P[l] -= p_lk, so d/dx picks up -dp
    add(ix.prow_of[l], l, Jlk.dp[0], Jlk.dp[2]);
    add(ix.prow_of[l], k, Jlk.dp[1], Jlk.dp[3]);
    add(ix.qrow_of[l], l, Jlk.dq[0], Jlk.dq[2]);
    add(ix.qrow_of[l], k, Jlk.dq[1], Jlk.dq[3]);
    add(ix.prow_of[k], k, Jkl.dp[0], Jkl.dp[2]);
    add(ix.prow_of[k], l, Jkl.dp[1], Jkl.dp[3]);
    add(ix.qrow_of[k], k, Jkl.dq[0], Jkl.dq[2]);
    add(ix.qrow_of[k], l, Jkl.dq[1], Jkl.dq[3]);
  }
  return J;
}

}  // namespace detail

struct PowerFlowOptions {
  double tol = 1e-8;  // infinity norm of the mismatch
  int max_iter = 50;
  int max_halvings = 5;
};

// Newton-Raphson solve. The initial state carries the injections (pg, qg at
// generators; pl, ql everywhere), the PV/slack voltage setpoints, and the
// starting guess. Returns the solved state with slack pg/qg and PV qg filled.
inline GridState solve_power_flow(const PowerNetwork& net, GridState state,
                                  const PowerFlowOptions& opt = {}) {
  const auto ix = detail::NewtonIndex::build(net);
  state.theta[net.slack_index()] = 0.0;
  Vec F = detail::mismatch(net, ix, state);
  double err = F.lpNorm<Eigen::Infinity>();
  int it = 0;
  for (; it < opt.max_iter && err > opt.tol; ++it) {
    Mat J = detail::mismatch_jacobian(net, ix, state);
    Eigen::FullPivLU<Mat> lu(J);
    if (!lu.isInvertible())
      throw SingularMatrix("solve_power_flow: Jacobian singular (solvability boundary)");
    Vec dx = lu.solve(-F);
    double step = 1.0;
    GridState trial = state;
    for (int h = 0; h <= opt.max_halvings; ++h) {
      trial = state;
      for (int i = 0; i < net.size(); ++i) {
        if (ix.theta_of[i] >= 0) trial.theta[i] += step * dx[ix.theta_of[i]];
        if (ix.v_of[i] >= 0) trial.v[i] += step * dx[ix.v_of[i]];
      }
      Vec Ft = detail::mismatch(net, ix, trial);
      double errt = Ft.lpNorm<Eigen::Infinity>();
      if (errt < err || h == opt.max_halvings) {
        state = trial;
        F = Ft;
        err = errt;
        break;
      }
      step *= 0.5;
    }
  }
  if (err > opt.tol)
    throw NoConvergence("solve_power_flow: mismatch " + std::to_string(err) + " after " +
                        std::to_string(it) + " iterations");
  // fill dependent injections
  Vec psum, qsum;
  bus_flow_sums(net, state.v, state.theta, &psum, &qsum);
  const int slack = net.slack_index();
  state.pg[slack] = state.pl[slack] + psum[slack];
  state.qg[slack] = state.ql[slack] + qsum[slack];
  for (int i = 0; i < net.size(); ++i)
    if (net.buses[i].type == BusType::PV) state.qg[i] = state.ql[i] + qsum[i];
  return state;
}

// Active-power balance: total generation - total load - total branch losses.
inline double power_balance_residual(const PowerNetwork& net, const GridState& s) {
  double gen = s.pg.sum(), load = s.pl.sum(), losses = 0.0;
  for (const auto& br : net.branches) {
    auto f_lk = branch_flows(s.v[br.from], s.v[br.to], s.theta[br.from], s.theta[br.to], br.g, br.b);
    auto f_kl = branch_flows(s.v[br.to], s.v[br.from], s.theta[br.to], s.theta[br.from], br.g, br.b);
    losses += f_lk.p + f_kl.p;
  }
  return gen - load - losses;
}

// ---------------------------------------------------------------------------
// Reserve-dispatch model: input/output partition and sensitivities.
//
// Per generation unit the active power and the reactive power are the
// controls; the slack provides the voltage/angle reference and absorbs the
// residuals. Generator buses are solved with specified (p, q), so:
//
//   u = [ pg at gen buses ; qg at gen buses ]          (gen = non-slack units)
//   d = loads (pl, ql)
//   y = [ pg slack ; qg slack ; v at non-slack buses ; i2 on all branches ]

struct DispatchModel {
  PowerNetwork net;        // as loaded (generator buses typed "pv")
  PowerNetwork solve_net;  // generator buses re-typed PQ for specified (p, q)
  std::vector<int> gen_buses;
  std::vector<int> nonslack_buses;

  static DispatchModel build(const PowerNetwork& net_in) {
    DispatchModel m;
    m.net = net_in;
    m.net.validate();
    m.solve_net = net_in;
    for (int i = 0; i < m.net.size(); ++i) {
      if (m.net.buses[i].type == BusType::PV) {
        m.gen_buses.push_back(i);
        m.solve_net.buses[i].type = BusType::PQ;
      }
      if (m.net.buses[i].type != BusType::Slack) m.nonslack_buses.push_back(i);
    }
    return m;
  }

  int input_dim() const { return 2 * static_cast<int>(gen_buses.size()); }
  int output_dim() const {
    return 2 + static_cast<int>(nonslack_buses.size() + net.branches.size());
  }

  void apply_input(const Vec& u, GridState* s) const {
    require_dims(u.size() == input_dim(), "DispatchModel: input dim");
    const int ng = static_cast<int>(gen_buses.size());
    for (int k = 0; k < ng; ++k) {
      s->pg[gen_buses[k]] = u[k];
      s->qg[gen_buses[k]] = u[ng + k];
    }
  }

  Vec pack_input(const GridState& s) const {
    const int ng = static_cast<int>(gen_buses.size());
    Vec u(input_dim());
    for (int k = 0; k < ng; ++k) {
      u[k] = s.pg[gen_buses[k]];
      u[ng + k] = s.qg[gen_buses[k]];
    }
    return u;
  }

  GridState solve(const GridState& injections, const PowerFlowOptions& opt = {}) const {
    return solve_power_flow(solve_net, injections, opt);
  }

  Vec measure(const GridState& s) const {
    Vec y(output_dim());
    int at = 0;
    const int slack = net.slack_index();
    y[at++] = s.pg[slack];
    y[at++] = s.qg[slack];
    for (int i : nonslack_buses) y[at++] = s.v[i];
    for (const auto& br : net.branches)
      y[at++] = branch_flows(s.v[br.from], s.v[br.to], s.theta[br.from], s.theta[br.to], br.g,
                             br.b)
                    .i2;
    return y;
  }

  // grad_u y at a solved state via the implicit function theorem:
  // solve (dF/dx) S = -dF/du, then chain through the output selection.
  Mat sensitivity(const GridState& s) const {
    const auto ix = detail::NewtonIndex::build(solve_net);
    Mat J = detail::mismatch_jacobian(solve_net, ix, s);
    const int ng = static_cast<int>(gen_buses.size());
    Mat dFdu = Mat::Zero(ix.n_unknowns, input_dim());
    for (int k = 0; k < ng; ++k) {
      dFdu(ix.prow_of[gen_buses[k]], k) = 1.0;       // pg enters its own P row
      dFdu(ix.qrow_of[gen_buses[k]], ng + k) = 1.0;  // qg enters its own Q row
    }
    Eigen::FullPivLU<Mat> lu(J);
    if (!lu.isInvertible())
      throw SingularMatrix("DispatchModel::sensitivity: power-flow Jacobian singular");
    Mat S = lu.solve(-dFdu);  // d(state unknowns)/du

    Mat dV = Mat::Zero(net.size(), input_dim());
    Mat dTh = Mat::Zero(net.size(), input_dim());
    for (int i = 0; i < net.size(); ++i) {
      if (ix.v_of[i] >= 0) dV.row(i) = S.row(ix.v_of[i]);
      if (ix.theta_of[i] >= 0) dTh.row(i) = S.row(ix.theta_of[i]);
    }

    Mat dy = Mat::Zero(output_dim(), input_dim());
    int at = 0;
    const int slack = net.slack_index();
    // slack pg = pl + sum p_lk and qg = ql + sum q_lk over incident branches
    Vec prow = Vec::Zero(input_dim()), qrow = Vec::Zero(input_dim());
    for (const auto& br : net.branches) {
      if (br.from != slack && br.to != slack) continue;
      const int l = (br.from == slack) ? br.from : br.to;
      const int kk = (br.from == slack) ? br.to : br.from;
      auto Jf = branch_flow_jacobian(s.v[l], s.v[kk], s.theta[l], s.theta[kk], br.g, br.b);
      prow += Jf.dp[0] * dV.row(l).transpose() + Jf.dp[1] * dV.row(kk).transpose() +
              Jf.dp[2] * dTh.row(l).transpose() + Jf.dp[3] * dTh.row(kk).transpose();
      qrow += Jf.dq[0] * dV.row(l).transpose() + Jf.dq[1] * dV.row(kk).transpose() +
              Jf.dq[2] * dTh.row(l).transpose() + Jf.dq[3] * dTh.row(kk).transpose();
    }
    dy.row(at++) = prow.transpose();
    dy.row(at++) = qrow.transpose();
    for (int bus : nonslack_buses) dy.row(at++) = dV.row(bus);
    for (const auto& br : net.branches) {
      auto Jf = branch_flow_jacobian(s.v[br.from], s.v[br.to], s.theta[br.from], s.theta[br.to],
                                     br.g, br.b);
      dy.row(at++) = (Jf.di2[0] * dV.row(br.from).transpose() +
                      Jf.di2[1] * dV.row(br.to).transpose() +
                      Jf.di2[2] * dTh.row(br.from).transpose() +
                      Jf.di2[3] * dTh.row(br.to).transpose())
                         .transpose();
    }
    return dy;
  }
};

// Quadratic generation cost a p^2 + b p for each generator bus.
struct GenCost {
  double a = 0.0;
  double b = 0.0;
};

struct OpfProblem {
  PowerNetwork network;
  std::map<std::string, GenCost> cost;  // by bus id, gen buses only
  GridState base;                       // loads, voltage setpoints, initial guess

  double total_cost(const GridState& s) const {
    double c = 0.0;
    for (const auto& [id, gc] : cost) {
      int i = network.index_of(id);
      c += gc.a * s.pg[i] * s.pg[i] + gc.b * s.pg[i];
    }
    return c;
  }
};

// Everything a feedback controller needs for the dispatch problem. The rows
// of g are affine selections of y: slack pg bounds, gen qg bounds, PQ voltage
// bounds, squared-current limits.
struct DispatchProblem {
  DispatchModel model;
  OpfProblem opf;
  control::FeedbackProblem feedback;
  std::vector<std::string> row_labels;

  Vec input_lower, input_upper;  // box data, so caps can be re-tightened

  // Channel weights for the implicit controller metric: rows of the reference
  // sensitivity are equilibrated so that no output channel (squared current,
  // reactive power) dominates the fold.
  Vec metric_output_weights(const Mat& sens_ref) const {
    require_dims(sens_ref.rows() == model.output_dim(), "metric_output_weights: dims");
    Vec w = Vec::Ones(model.output_dim());
    for (int i = 0; i < sens_ref.rows(); ++i)
      w[i] = 1.0 / std::max(1.0, 2.0 * sens_ref.row(i).norm());
    return w;
  }
};

inline DispatchProblem assemble_feedback_problem(const OpfProblem& opf) {
  DispatchProblem dp;
  dp.opf = opf;
  dp.model = DispatchModel::build(opf.network);
  const auto& m = dp.model;
  const int p = m.input_dim();
  const int q = m.output_dim();
  const int ng = static_cast<int>(m.gen_buses.size());
  const int n_ns = static_cast<int>(m.nonslack_buses.size());
  const int n_br = static_cast<int>(m.net.branches.size());

  dp.feedback.input_dim = p;
  dp.feedback.output_dim = q;

  // input box: (pg, qg) bounds at the dispatchable units
  dp.input_lower = Vec::Zero(p);
  dp.input_upper = Vec::Zero(p);
  for (int k = 0; k < ng; ++k) {
    const auto& bus = m.net.buses[m.gen_buses[k]];
    dp.input_lower[k] = bus.p_min;
    dp.input_upper[k] = bus.p_max;
    dp.input_lower[ng + k] = bus.q_min;
    dp.input_upper[ng + k] = bus.q_max;
  }
  dp.feedback.input_set = convex::ConvexSet::box(dp.input_lower, dp.input_upper);

  // cost: quadratics on pg; unit pg sits in u, slack pg is y[0]
  std::vector<GenCost> gen_cost;
  for (int bus : m.gen_buses) gen_cost.push_back(opf.cost.at(m.net.buses[bus].id));
  GenCost slack_cost = opf.cost.at(m.net.buses[m.net.slack_index()].id);
  flows::ScalarField cost;
  cost.value = [gen_cost, slack_cost, ng, p](const Vec& z) {
    double c = 0.0;
    for (int k = 0; k < ng; ++k) c += gen_cost[k].a * z[k] * z[k] + gen_cost[k].b * z[k];
    double ps = z[p];
    return c + slack_cost.a * ps * ps + slack_cost.b * ps;
  };
  cost.gradient = [gen_cost, slack_cost, ng, p](const Vec& z) -> Vec {
    Vec g = Vec::Zero(z.size());
    for (int k = 0; k < ng; ++k) g[k] = 2.0 * gen_cost[k].a * z[k] + gen_cost[k].b;
    g[p] = 2.0 * slack_cost.a * z[p] + slack_cost.b;
    return g;
  };
  cost.hessian = [gen_cost, slack_cost, ng, p](const Vec& z) -> Mat {
    Mat H = Mat::Zero(z.size(), z.size());
    for (int k = 0; k < ng; ++k) H(k, k) = 2.0 * gen_cost[k].a;
    H(p, p) = 2.0 * slack_cost.a;
    return H;
  };
  cost.convex = true;
  dp.feedback.cost = cost;

  // constraint rows on y (affine): slack p/q bounds, voltage bands at the
  // non-slack buses, squared-current limits
  int rows = 4 + 2 * n_ns;
  for (const auto& br : m.net.branches)
    if (std::isfinite(br.i_max)) ++rows;
  Mat Ay = Mat::Zero(rows, q);
  Vec c0 = Vec::Zero(rows);
  int r = 0;
  const auto& slack_bus = m.net.buses[m.net.slack_index()];
  Ay(r, 0) = 1.0;
  c0[r] = -slack_bus.p_max;
  dp.row_labels.push_back("pg_slack_upper");
  ++r;
  Ay(r, 0) = -1.0;
  c0[r] = slack_bus.p_min;
  dp.row_labels.push_back("pg_slack_lower");
  ++r;
  Ay(r, 1) = 1.0;
  c0[r] = -slack_bus.q_max;
  dp.row_labels.push_back("qg_slack_upper");
  ++r;
  Ay(r, 1) = -1.0;
  c0[r] = slack_bus.q_min;
  dp.row_labels.push_back("qg_slack_lower");
  ++r;
  for (int k = 0; k < n_ns; ++k) {
    const auto& bus = m.net.buses[m.nonslack_buses[k]];
    const int col = 2 + k;
    Ay(r, col) = 1.0;
    c0[r] = -bus.v_max;
    dp.row_labels.push_back("v_" + bus.id + "_upper");
    ++r;
    Ay(r, col) = -1.0;
    c0[r] = bus.v_min;
    dp.row_labels.push_back("v_" + bus.id + "_lower");
    ++r;
  }
  for (int e = 0; e < n_br; ++e) {
    const auto& br = m.net.branches[e];
    if (!std::isfinite(br.i_max)) continue;
    Ay(r, 2 + n_ns + e) = 1.0;
    c0[r] = -br.i_max * br.i_max;
    dp.row_labels.push_back("i2_" + m.net.buses[br.from].id + "_" + m.net.buses[br.to].id);
    ++r;
  }
  flows::ConstraintMap g;
  g.out_dim = rows;
  auto Ayp = std::make_shared<Mat>(std::move(Ay));
  auto c0p = std::make_shared<Vec>(std::move(c0));
  g.value = [Ayp, c0p, q](const Vec& z) -> Vec { return *Ayp * z.tail(q) + *c0p; };
  g.jacobian = [Ayp, q](const Vec& z) -> Mat {
    Mat J = Mat::Zero(Ayp->rows(), z.size());
    J.rightCols(q) = *Ayp;
    return J;
  };
  dp.feedback.constraints = g;
  return dp;
}

}  // namespace fbopt::pf
