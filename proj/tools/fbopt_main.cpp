// fbopt - scenario runner for feedback-based optimization studies.
//
//   fbopt run <config.json> --out <dir> [--every N] [--seed S]
//   fbopt list
//   fbopt check
//
// Configs are JSON with top-level keys: scenario, plant, controller,
// disturbances, sim {dt, t_end}, outputs. Each run emits <out>/trace.csv and
// <out>/summary.json. Exit codes: 0 success, 2 diverged, 3 infeasible or
// no-convergence, 4 config error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include "CLI11.hpp"
#include "fbopt/figures.hpp"
#include "fbopt/scenarios.hpp"

namespace fs = std::filesystem;
using namespace fbopt;
using nlohmann::json;

namespace {

Vec to_vec(const json& j) {
  Vec v(j.size());
  int at = 0;
  for (const auto& x : j) v[at++] = x.get<double>();
  return v;
}

Mat to_mat(const json& j) {
  const int rows = static_cast<int>(j.size());
  const int cols = rows > 0 ? static_cast<int>(j.front().size()) : 0;
  Mat m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
  return m;
}

plants::Signal signal_from_steps(const json& steps, const char* key, const Vec& initial) {
  std::vector<double> times = {0.0};
  std::vector<Vec> values = {initial};
  if (steps.is_array()) {
    for (const auto& ev : steps) {
      if (!ev.contains(key)) continue;
      times.push_back(ev.at("t").get<double>());
      values.push_back(to_vec(ev.at(key)));
    }
  }
  return plants::Signal::steps(times, values);
}

struct RunOutput {
  sim::Trajectory trace;
  scenarios::RunSummary summary;
  int exit_code = 0;
  json extra;  // scenario-specific summary fields
  std::vector<std::pair<std::string, sim::Trajectory>> side_traces;
};

RunOutput run_congestion_cfg(const json& cfg, std::mt19937_64&) {
  scenarios::CongestionScenario sc;
  const json plant = cfg.value("plant", json::object());
  if (plant.contains("routing")) {
    sc.routing = to_mat(plant.at("routing"));
    sc.capacity = to_vec(plant.at("capacity"));
    sc.weights = plant.contains("weights") ? to_vec(plant.at("weights"))
                                           : Vec::Ones(sc.routing.cols());
  } else {
    // classic two-link chain shared by a through flow
    sc.routing = Mat::Zero(2, 3);
    sc.routing(0, 0) = 1;
    sc.routing(0, 2) = 1;
    sc.routing(1, 1) = 1;
    sc.routing(1, 2) = 1;
    sc.capacity = Vec::Ones(2);
    sc.weights = Vec::Ones(3);
  }
  sc.x0 = plant.contains("x0") ? to_vec(plant.at("x0")) : Vec::Constant(sc.sources(), 0.2);
  const json simj = cfg.value("sim", json::object());
  sc.dt = simj.value("dt", 2e-3);
  sc.t_end = simj.value("t_end", 400.0);
  auto res = scenarios::run_congestion(sc);
  return {res.trace, res.summary, res.exit_code, json::object(), {}};
}

RunOutput run_frequency_cfg(const json& cfg, std::mt19937_64&) {
  const json ctrl = cfg.value("controller", json::object());
  std::string mode = ctrl.value("mode", "ace-gradient");
  auto fp = scenarios::three_bus_line_graph(mode == "saddle-equivalent"
                                                ? scenarios::FrequencyMode::SaddleEquivalent
                                                : scenarios::FrequencyMode::AceGradient);
  const json plant = cfg.value("plant", json::object());
  if (plant.contains("edges")) {
    fp.edges.clear();
    for (const auto& e : plant.at("edges"))
      fp.edges.push_back({e[0].get<int>(), e[1].get<int>()});
    fp.susceptance = to_vec(plant.at("susceptance"));
    fp.inertia = to_vec(plant.at("inertia"));
    fp.damping = to_vec(plant.at("damping"));
    fp.turbine = to_vec(plant.at("turbine"));
    fp.droop = to_vec(plant.at("droop"));
    fp.ace_gain = to_vec(plant.at("ace_gain"));
  }
  if (cfg.contains("disturbances"))
    fp.load = signal_from_steps(cfg.at("disturbances"), "load", Vec::Zero(fp.buses()));
  const json simj = cfg.value("sim", json::object());
  fp.dt = simj.value("dt", fp.dt);
  fp.t_end = simj.value("t_end", fp.t_end);
  auto res = scenarios::run_frequency(fp);
  json extra;
  Vec zf = res.summary.final_state;
  extra["final_max_abs_omega"] = zf.head(fp.buses()).lpNorm<Eigen::Infinity>();
  extra["final_max_abs_flow"] = zf.tail(fp.lines()).lpNorm<Eigen::Infinity>();
  return {res.trace, res.summary, res.exit_code, extra, {}};
}

RunOutput run_dispatch_cfg(const json& cfg, std::mt19937_64& rng) {
  const json ctrl = cfg.value("controller", json::object());
  std::string type = ctrl.value("type", "lop");
  const json plant = cfg.value("plant", json::object());
  std::string network = plant.value("network", std::string("data/network_6bus.json"));
  auto sc = scenarios::default_dispatch_scenario(
      network, type == "saddle" ? scenarios::DispatchController::Saddle
                                : scenarios::DispatchController::Lop);
  sc.saddle_eps = ctrl.value("eps", sc.saddle_eps);
  sc.saddle_rho = ctrl.value("rho", sc.saddle_rho);
  sc.saddle_dual_gain = ctrl.value("dual_gain", sc.saddle_dual_gain);
  const json simj = cfg.value("sim", json::object());
  sc.dt = simj.value("dt", sc.dt);
  sc.t_end = simj.value("t_end", sc.t_end);
  if (cfg.contains("checkpoints")) {
    sc.checkpoints.clear();
    for (const auto& c : cfg.at("checkpoints")) sc.checkpoints.push_back(c.get<double>());
  }
  sc.oracle_starts = cfg.value("oracle_starts", sc.oracle_starts);
  sc.seed = std::uniform_int_distribution<unsigned>()(rng);
  if (cfg.contains("disturbances")) {
    const auto& dist = cfg.at("disturbances");
    sc.profiles.loads_p = signal_from_steps(dist, "loads_p", sc.profiles.loads_p.value(0.0));
    sc.profiles.loads_q = signal_from_steps(dist, "loads_q", sc.profiles.loads_q.value(0.0));
    sc.profiles.gen_caps = signal_from_steps(dist, "gen_caps", sc.profiles.gen_caps.value(0.0));
  }
  auto run = scenarios::run_dispatch(sc);
  json extra;
  extra["checkpoint_kkt"] = run.checkpoint_kkt;
  extra["checkpoint_cost_gap"] = run.checkpoint_gap;
  return {run.result.trace, run.result.summary, run.result.exit_code, extra, {}};
}

RunOutput run_mechanisms_cfg(const json& cfg, std::mt19937_64&) {
  auto mp = scenarios::mechanism_problem();
  RunOutput out;
  json panels;
  auto record = [&](const char* name, const scenarios::PanelResult& r) {
    panels[name] = {{"max_violation", r.max_violation},
                    {"final_violation", r.final_violation},
                    {"distance_to_minimizer", (r.final_state.head(2) - mp.minimizer).norm()}};
    out.side_traces.push_back({std::string("panel_") + name, r.traj});
  };
  for (double rho : {1.0, 10.0, 100.0})
    record(("penalty_rho" + std::to_string(static_cast<int>(rho))).c_str(),
           scenarios::penalty_panel(mp, rho));
  record("barrier", scenarios::barrier_panel(mp));
  record("saddle", scenarios::saddle_panel(mp, 0.0));
  record("saddle_augmented", scenarios::saddle_panel(mp, 10.0));
  auto projected = scenarios::projected_panel(mp);
  record("projected", projected);
  record("mixed", scenarios::mixed_panel(mp));
  out.trace = projected.traj;
  out.summary.status = "time_limit";
  out.summary.final_state = projected.final_state;
  out.extra = {{"panels", panels}};
  return out;
}

RunOutput run_gain_sweep_cfg(const json& cfg, std::mt19937_64&) {
  RunOutput out;
  double eps_hat = scenarios::two_well_gain_threshold();
  json sweeps = json::array();
  sim::Trajectory main_trace;
  for (double factor : {0.25, 0.5, 1.0, 2.0}) {
    auto run = scenarios::run_two_well_loop(factor * eps_hat);
    sweeps.push_back({{"eps", factor * eps_hat},
                      {"status", sim::to_string(run.result.status)},
                      {"final_u", run.loop.input_of(run.result.trajectory.back())[0]}});
    out.side_traces.push_back(
        {"gain_" + std::to_string(factor).substr(0, 4), run.result.trajectory});
    if (factor == 0.5) main_trace = run.result.trajectory;
  }
  out.trace = main_trace;
  out.summary.status = "time_limit";
  out.summary.final_state = main_trace.back();
  out.extra = {{"gain_threshold", eps_hat}, {"sweep", sweeps}};
  return out;
}

RunOutput run_portraits_cfg(const json& cfg, std::mt19937_64&) {
  RunOutput out;
  auto metric = scenarios::metric_portrait();
  auto newton = scenarios::newton_portrait();
  int idx = 0;
  for (const auto& t : metric.euclidean)
    out.side_traces.push_back({"metric_euclidean_" + std::to_string(idx++), t});
  idx = 0;
  for (const auto& t : metric.warped)
    out.side_traces.push_back({"metric_warped_" + std::to_string(idx++), t});
  idx = 0;
  for (const auto& t : newton.euclidean)
    out.side_traces.push_back({"newton_euclidean_" + std::to_string(idx++), t});
  idx = 0;
  for (const auto& t : newton.warped)
    out.side_traces.push_back({"newton_flow_" + std::to_string(idx++), t});
  out.trace = newton.warped.front();
  out.summary.status = "time_limit";
  out.summary.final_state = out.trace.back();
  return out;
}

struct ScenarioEntry {
  const char* name;
  const char* blurb;
  RunOutput (*runner)(const json&, std::mt19937_64&);
};

const ScenarioEntry kScenarios[] = {
    {"congestion", "primal-dual congestion control on a routed network", run_congestion_cfg},
    {"frequency", "automatic generation control on a 3-bus grid", run_frequency_cfg},
    {"dispatch", "reserve dispatch on the 6-bus AC network (lop or saddle)", run_dispatch_cfg},
    {"mechanisms", "six constraint-enforcement mechanisms on a 2-d quadratic",
     run_mechanisms_cfg},
    {"gain-sweep", "two-well benchmark gain sweep around the stability threshold",
     run_gain_sweep_cfg},
    {"portraits", "variable-metric and Newton-flow phase portraits", run_portraits_cfg},
};

int cmd_run(const std::string& config_path, const std::string& out_dir, int every,
            unsigned seed) {
  json cfg;
  try {
    std::ifstream in(config_path);
    if (!in) throw ConfigError("cannot open config '" + config_path + "'");
    in >> cfg;
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 4;
  }
  std::string name;
  RunOutput out;
  try {
    name = cfg.at("scenario").get<std::string>();
    const ScenarioEntry* entry = nullptr;
    for (const auto& s : kScenarios)
      if (name == s.name) entry = &s;
    if (!entry) throw ConfigError("unknown scenario '" + name + "'");
    std::mt19937_64 rng(seed);
    out = entry->runner(cfg, rng);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 4;
  } catch (const json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 4;
  } catch (const NoConvergence& e) {
    std::cerr << "no convergence: " << e.what() << "\n";
    return 3;
  } catch (const Infeasible& e) {
    std::cerr << "infeasible: " << e.what() << "\n";
    return 3;
  } catch (const sim::FieldDomainError& e) {
    std::cerr << "aborted: " << e.what() << "\n";
    return 3;
  }
  try {
    fs::create_directories(out_dir);
    scenarios::write_csv(out_dir + "/trace.csv", out.trace, every);
    for (const auto& [tag, traj] : out.side_traces)
      scenarios::write_csv(out_dir + "/" + tag + ".csv", traj, every);
    json summary = out.summary.to_json();
    for (auto& [k, v] : out.extra.items()) summary[k] = v;
    std::ofstream sf(out_dir + "/summary.json");
    sf << summary.dump(2) << "\n";
  } catch (const std::exception& e) {
    std::cerr << "output error: " << e.what() << "\n";
    return 4;
  }
  std::cout << name << ": " << out.summary.status << ", " << out.trace.size()
            << " samples -> " << out_dir << "\n";
  return out.exit_code;
}

int cmd_check();

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"feedback-based optimization scenario runner"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "run a scenario config");
  std::string config_path, out_dir = "out";
  int every = 1;
  unsigned seed = 1;
  run->add_option("config", config_path, "JSON config file")->required();
  run->add_option("--out", out_dir, "output directory");
  run->add_option("--every", every, "record every N-th sample");
  run->add_option("--seed", seed, "random seed (dispatch oracle multi-start)");

  auto* list = app.add_subcommand("list", "list built-in scenarios");
  auto* check = app.add_subcommand("check", "run the invariant self-checks");

  CLI11_PARSE(app, argc, argv);

  if (*list) {
    for (const auto& s : kScenarios) std::printf("%-12s %s\n", s.name, s.blurb);
    return 0;
  }
  if (*check) return cmd_check();
  return cmd_run(config_path, out_dir, every, seed);
}

// ---------------------------------------------------------------------------
// Invariant self-checks (`fbopt check`).

namespace {

int cmd_check() {
  int failures = 0;
  auto report = [&](const char* name, bool ok, const std::string& detail = "") {
    std::printf("[%s] %s%s%s\n", ok ? "PASS" : "FAIL", name, detail.empty() ? "" : ": ",
                detail.c_str());
    if (!ok) ++failures;
  };

  // finite-difference checks of every scenario's cost and constraint maps
  {
    auto mp = scenarios::mechanism_problem();
    double e1 = sim::check_gradient(mp.cost, mp.x0);
    double e2 = sim::check_jacobian(mp.g, mp.x0);
    report("mechanism gradients vs finite differences", e1 <= 1e-5 && e2 <= 1e-5);
  }
  {
    bool ok = true;
    std::string detail;
    try {
      pf::OpfProblem opf;
      opf.network = pf::PowerNetwork::load("data/network_6bus.json");
      opf.cost["g1"] = {0.5, 0.4};
      opf.cost["g2"] = {0.4, 0.3};
      opf.cost["w3"] = {0.01, 0.0};
      opf.base = pf::GridState::flat(6);
      opf.base.pl[3] = 0.4;
      opf.base.pl[4] = 0.5;
      opf.base.pl[5] = 0.2;
      opf.base.ql[3] = 0.1;
      opf.base.ql[4] = 0.1;
      opf.base.ql[5] = 0.05;
      auto dp = pf::assemble_feedback_problem(opf);
      Vec z = Vec::Constant(dp.feedback.input_dim + dp.feedback.output_dim, 0.7);
      ok = sim::check_gradient(dp.feedback.cost, z) <= 1e-5 &&
           sim::check_jacobian(*dp.feedback.constraints, z) <= 1e-5;
      // sensitivity vs re-solved finite differences at the base point
      pf::GridState st = opf.base;
      st.pg[1] = 0.4;
      st.pg[2] = 0.2;
      auto solved = dp.model.solve(st);
      Mat S = dp.model.sensitivity(solved);
      Vec u = dp.model.pack_input(solved);
      const double h = 1e-6;
      for (int j = 0; j < u.size() && ok; ++j) {
        Vec up = u, um = u;
        up[j] += h;
        um[j] -= h;
        pf::GridState sp = st, sm = st;
        dp.model.apply_input(up, &sp);
        dp.model.apply_input(um, &sm);
        Vec fd = (dp.model.measure(dp.model.solve(sp)) - dp.model.measure(dp.model.solve(sm))) /
                 (2.0 * h);
        if ((S.col(j) - fd).lpNorm<Eigen::Infinity>() > 1e-5 * (1.0 + fd.norm())) ok = false;
      }
      // power balance at the solved state
      if (std::abs(pf::power_balance_residual(opf.network, solved)) > 1e-7) ok = false;
    } catch (const std::exception& e) {
      ok = false;
      detail = e.what();
    }
    report("dispatch model derivatives and power balance", ok, detail);
  }
  {
    // qp KKT residuals on random problems
    std::mt19937 rng(77);
    std::normal_distribution<double> gauss(0.0, 1.0);
    bool ok = true;
    for (int trial = 0; trial < 50 && ok; ++trial) {
      int n = 1 + trial % 3, m = trial % 4;
      Mat R(n, n);
      for (int i = 0; i < n * n; ++i) R(i / n, i % n) = gauss(rng);
      convex::QpProblem p = convex::QpProblem::unconstrained(
          Mat(R * R.transpose() + 0.4 * Mat::Identity(n, n)), Vec::Zero(n));
      for (int i = 0; i < n; ++i) p.f[i] = gauss(rng);
      p.A_ineq = Mat(m, n);
      p.b_ineq = Vec(m);
      for (int i = 0; i < m * n; ++i) p.A_ineq(i / n, i % n) = gauss(rng);
      for (int i = 0; i < m; ++i) p.b_ineq[i] = gauss(rng);
      try {
        auto sol = convex::qp_solve(p);
        Vec r = p.H * sol.w + p.f;
        if (m > 0) r += p.A_ineq.transpose() * sol.ineq_multipliers;
        if (r.norm() > 1e-8 * (1.0 + p.f.norm())) ok = false;
        for (int i = 0; i < m; ++i) {
          double slack = p.b_ineq[i] - p.A_ineq.row(i).dot(sol.w);
          if (slack < -1e-8 || sol.ineq_multipliers[i] < 0 ||
              std::abs(sol.ineq_multipliers[i] * slack) > 1e-8)
            ok = false;
        }
      } catch (const Infeasible&) {
      }
    }
    report("qp solutions satisfy the KKT conditions", ok);
  }
  {
    // projection idempotence on random polyhedra
    std::mt19937 rng(5);
    std::normal_distribution<double> gauss(0.0, 1.5);
    bool ok = true;
    Mat A(3, 2);
    A << 1, 1, -1, 0, 0, -1;
    auto set = convex::ConvexSet::polyhedron(A, Vec::Constant(3, 1.0));
    for (int k = 0; k < 100 && ok; ++k) {
      Vec y(2);
      y << gauss(rng), gauss(rng);
      Vec p1 = convex::project_point(set, y);
      if ((convex::project_point(set, p1) - p1).norm() > 1e-10) ok = false;
    }
    report("projection idempotence", ok);
  }
  {
    // determinism: two identical congestion runs produce identical traces
    scenarios::CongestionScenario sc;
    sc.routing = Mat::Ones(1, 2);
    sc.capacity = Vec::Constant(1, 1.0);
    sc.weights = Vec::Ones(2);
    sc.x0 = Vec::Constant(2, 0.4);
    sc.t_end = 5.0;
    auto r1 = scenarios::run_congestion(sc);
    auto r2 = scenarios::run_congestion(sc);
    bool ok = r1.trace.size() == r2.trace.size();
    for (size_t k = 0; ok && k < r1.trace.size(); ++k)
      if (!(r1.trace.states[k] == r2.trace.states[k])) ok = false;
    report("scenario determinism (bitwise)", ok);
  }
  std::printf("%s\n", failures == 0 ? "all checks passed" : "CHECKS FAILED");
  return failures == 0 ? 0 : 1;
}

}  // namespace
