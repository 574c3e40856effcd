/*
 Copyright 2026 The driftcpp Authors

 Licensed under the Apache License, Version 2.0 (the "License");
 you may not use this file except in compliance with the License.
 You may obtain a copy of the License at

      https://www.apache.org/licenses/LICENSE-2.0

 Unless required by applicable law or agreed to in writing, software
 distributed under the License is distributed on an "AS IS" BASIS,
 WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 See the License for the specific language governing permissions and
 limitations under the License.
*/
#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "driftcpp/admm.hpp"
#include "driftcpp/equilibrium.hpp"
#include "driftcpp/gp.hpp"
#include "driftcpp/json_io.hpp"
#include "driftcpp/path.hpp"
#include "driftcpp/plant.hpp"
#include "driftcpp/vehicle.hpp"

namespace driftcpp {

struct SimConfig {
  VehicleParams vehicle{};          // nominal model parameters
  PlantConfig plant{};              // truth plant
  ControllerConfig controller{};
  PidConfig pid{};
  PathSpec path{};
  int laps = 6;
  double Ts = 0.1;
  double initial_speed = 12.0;
  double delta_eq = -20.0 * M_PI / 180.0;
  int gp_capacity = 50;
  unsigned seed = 1;

  bool valid() const { return laps >= 1 && Ts > 0.0; }
};

// Default truth-plant mismatch: same model family with perturbed Pacejka
// shape, a 50 ms steering lag and a fine RK4 integrator. mu_f is scenario
// dependent and left at nominal here.
inline SimConfig default_sim_config() {
  SimConfig cfg;
  cfg.plant.params_true = cfg.vehicle;
  cfg.plant.params_true.B *= 0.95;
  cfg.plant.params_true.C *= 1.03;
  cfg.plant.actuator_lag_tau = 0.05;
  cfg.plant.integrator_step = 1e-3;
  return cfg;
}

inline json to_json(const SimConfig& c) {
  return {{"vehicle", to_json(c.vehicle)},
          {"plant", to_json(c.plant)},
          {"controller", to_json(c.controller)},
          {"pid", to_json(c.pid)},
          {"path", to_json(c.path)},
          {"laps", c.laps},
          {"Ts", c.Ts},
          {"initial_speed", c.initial_speed},
          {"delta_eq", c.delta_eq},
          {"gp_capacity", c.gp_capacity},
          {"seed", c.seed}};
}

inline SimConfig sim_config_from_json(const json& j, SimConfig d) {
  if (j.contains("vehicle"))
    d.vehicle = vehicle_params_from_json(j["vehicle"], d.vehicle);
  if (j.contains("plant")) d.plant = plant_config_from_json(j["plant"], d.plant);
  if (j.contains("controller"))
    d.controller = controller_config_from_json(j["controller"], d.controller);
  if (j.contains("pid")) d.pid = pid_config_from_json(j["pid"], d.pid);
  if (j.contains("path")) d.path = path_spec_from_json(j["path"], d.path);
  d.laps = j.value("laps", d.laps);
  d.Ts = j.value("Ts", d.Ts);
  d.initial_speed = j.value("initial_speed", d.initial_speed);
  d.delta_eq = j.value("delta_eq", d.delta_eq);
  d.gp_capacity = j.value("gp_capacity", d.gp_capacity);
  d.seed = j.value("seed", d.seed);
  if (!d.valid()) throw std::invalid_argument("sim config: invalid");
  return d;
}

struct LapMetrics {
  int lap = 0;
  double rmse_lateral = 0.0;
  double max_lateral = 0.0;
  double avg_cost = 0.0;
  double avg_prediction_error = 0.0;
  double avg_solve_time = 0.0;  // ms
  bool failed = false;
};

struct TraceRecord {
  double t = 0.0;
  // plant state
  double X = 0.0, Y = 0.0, phi = 0.0;
  double V = 0.0, beta = 0.0, r = 0.0;
  // applied control
  double delta = 0.0, Fxr = 0.0;
  // references
  double V_ref = 0.0, beta_ref = 0.0, r_ref = 0.0;
  double delta_ref = 0.0, Fxr_ref = 0.0;
  // tracking error
  double e = 0.0, delta_phi = 0.0, s_proj = 0.0, k_p = 0.0;
  // GP residual prediction at (x, u)
  double gp_mu_V = 0.0, gp_mu_beta = 0.0, gp_mu_r = 0.0;
  double gp_std_V = 0.0, gp_std_beta = 0.0, gp_std_r = 0.0;
  // per-step metrics
  double step_cost = 0.0;
  double pred_err = 0.0;
  // solver diagnostics
  double admm_iters = 0, ilqr_iters = 0;
  double primal_res = 0.0, dual_res = 0.0;
  double solve_us = 0.0;
};

inline const std::vector<std::string>& trace_columns() {
  static const std::vector<std::string> cols = {
      "t",         "X",          "Y",        "phi",       "V",
      "beta",      "r",          "delta",    "Fxr",       "V_ref",
      "beta_ref",  "r_ref",      "delta_ref", "Fxr_ref",  "e",
      "delta_phi", "s_proj",     "k_p",      "gp_mu_V",   "gp_mu_beta",
      "gp_mu_r",   "gp_std_V",   "gp_std_beta", "gp_std_r", "step_cost",
      "pred_err",  "admm_iters", "ilqr_iters", "primal_res", "dual_res",
      "solve_us"};
  return cols;
}

inline std::vector<double> trace_row(const TraceRecord& x) {
  return {x.t,          x.X,         x.Y,        x.phi,       x.V,
          x.beta,       x.r,         x.delta,    x.Fxr,       x.V_ref,
          x.beta_ref,   x.r_ref,     x.delta_ref, x.Fxr_ref,  x.e,
          x.delta_phi,  x.s_proj,    x.k_p,      x.gp_mu_V,   x.gp_mu_beta,
          x.gp_mu_r,    x.gp_std_V,  x.gp_std_beta, x.gp_std_r, x.step_cost,
          x.pred_err,   x.admm_iters, x.ilqr_iters, x.primal_res, x.dual_res,
          x.solve_us};
}

inline LapMetrics compute_metrics(const std::vector<TraceRecord>& trace,
                                  int lap_index) {
  LapMetrics m;
  m.lap = lap_index;
  if (trace.empty()) return m;
  double sum_e2 = 0.0, sum_cost = 0.0, sum_pred = 0.0, sum_solve = 0.0;
  for (const auto& x : trace) {
    sum_e2 += x.e * x.e;
    m.max_lateral = std::max(m.max_lateral, std::abs(x.e));
    sum_cost += x.step_cost;
    sum_pred += x.pred_err;
    sum_solve += x.solve_us;
  }
  const double n = double(trace.size());
  m.rmse_lateral = std::sqrt(sum_e2 / n);
  m.avg_cost = sum_cost / n;
  m.avg_prediction_error = sum_pred / n;
  m.avg_solve_time = sum_solve / n / 1000.0;
  return m;
}

struct SimResult {
  std::vector<std::vector<TraceRecord>> traces;  // per lap
  std::vector<LapMetrics> metrics;
  std::vector<json> gp_dumps;  // dictionary snapshot after each lap boundary
  SimConfig config;            // resolved
};

// Closed-loop protocol: lap 1 runs the nominal controller with an empty GP;
// at each lap boundary the dictionary is updated from the recorded
// transitions and the hyperparameters refit, and the GP-augmented
// controller is used from lap 2 on. Laps run continuously unless a failure
// forces a reset to the initial condition.
inline SimResult run_closed_loop(const SimConfig& cfg) {
  if (!cfg.valid()) throw std::invalid_argument("run_closed_loop: bad config");
  SimResult result;
  result.config = cfg;

  const ClothoidPath path = build_path(cfg.path);
  const PathSample start = path.at(0.0);

  GPModel gp(cfg.gp_capacity);
  DriftController controller(cfg.controller, cfg.vehicle, cfg.Ts);
  ReferenceGenerator refgen(cfg.vehicle, cfg.delta_eq, cfg.Ts);
  LookaheadPid pid(cfg.pid);
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  auto initial_state = [&]() {
    PlantState s;
    s.X = start.X;
    s.Y = start.Y;
    s.phi = start.phi;
    s.x = State{cfg.initial_speed, 0.0, cfg.initial_speed * start.kappa};
    s.delta_act = cfg.delta_eq;
    return s;
  };

  PlantState plant = initial_state();
  std::optional<AdmmIterate> warm;
  bool gp_active = false;
  double t = 0.0;
  double s_prev = 0.0;
  const long max_lap_steps =
      std::lround(path.total_length / 0.5 / cfg.Ts) + 1000;

  for (int lap = 1; lap <= cfg.laps; ++lap) {
    std::vector<TraceRecord> trace;
    bool failed = false;
    for (long step = 0;; ++step) {
      if (step >= max_lap_steps) {
        failed = true;
        break;
      }
      const State x = plant.x;
      if (!state_within_guard(x)) {
        failed = true;
        break;
      }
      const TrackingError err = project_to_path(
          plant.X, plant.Y, plant.phi, x.beta, path, step == 0 && lap == 1
                                                         ? 0.0
                                                         : s_prev);
      if (err.off_path) {
        failed = true;
        break;
      }
      // lap boundary: arc length wrapped past the start
      if (step > 0 && err.s_proj < s_prev - path.total_length / 2.0) {
        s_prev = err.s_proj;
        break;
      }
      s_prev = err.s_proj;

      const double k_eq = pid.update(err, cfg.Ts);
      const GPModel* gp_ptr = gp_active ? &gp : nullptr;
      const auto ref = refgen.make_references(k_eq, gp_ptr);
      // Stage-varying references: preview the path curvature along the
      // horizon at the current speed and carry the PID correction with it,
      // so the controller anticipates curvature ramps (it cannot shed the
      // R=45 -> R=20 speed difference inside a ramp without preview).
      const double dk = k_eq - err.k_p;
      std::vector<StageRef> refs(cfg.controller.N + 1);
      for (int i = 0; i <= cfg.controller.N; ++i) {
        const double s_i = err.s_proj + i * cfg.Ts * x.V;
        const double k_i = std::clamp(path.at(s_i).kappa + dk,
                                      cfg.pid.k_eq_min, cfg.pid.k_eq_max);
        const auto ref_i = refgen.make_references(k_i, gp_ptr);
        refs[i] = StageRef{ref_i.x_ref, ref_i.u_ref};
      }

      const BeliefState b0{x.vec(), Vec3::Zero()};
      const AdmmResult sol = controller.solve(b0, refs, gp_ptr, warm);
      warm = shift_warm_start(sol.iterate);
      const Control u = sol.u_apply;

      const State f_n_out = step_nominal(x, u, cfg.vehicle, cfg.Ts);
      const ResidualPrediction pred =
          gp_active ? gp.predict_residual(x, u) : ResidualPrediction{};

      Vec3 noise;
      for (int i = 0; i < 3; ++i) noise[i] = normal(rng);
      const PlantState next = step_plant(plant, u, cfg.plant, cfg.Ts, noise);
      gp.record_transition(x, u, next.x, f_n_out);

      TraceRecord rec;
      rec.t = t;
      rec.X = plant.X;
      rec.Y = plant.Y;
      rec.phi = plant.phi;
      rec.V = x.V;
      rec.beta = x.beta;
      rec.r = x.r;
      rec.delta = u.delta;
      rec.Fxr = u.Fxr;
      rec.V_ref = ref.x_ref.V;
      rec.beta_ref = ref.x_ref.beta;
      rec.r_ref = ref.x_ref.r;
      rec.delta_ref = ref.u_ref.delta;
      rec.Fxr_ref = ref.u_ref.Fxr;
      rec.e = err.e;
      rec.delta_phi = err.delta_phi;
      rec.s_proj = err.s_proj;
      rec.k_p = err.k_p;
      rec.gp_mu_V = pred.mean[0];
      rec.gp_mu_beta = pred.mean[1];
      rec.gp_mu_r = pred.mean[2];
      rec.gp_std_V = std::sqrt(pred.var[0]);
      rec.gp_std_beta = std::sqrt(pred.var[1]);
      rec.gp_std_r = std::sqrt(pred.var[2]);
      {
        const Vec3 dx = x.vec() - ref.x_ref.vec();
        const Vec2 du = u.vec() - ref.u_ref.vec();
        rec.step_cost = dx.dot(cfg.controller.Q.cwiseProduct(dx)) +
                        du.dot(cfg.controller.R.cwiseProduct(du));
      }
      rec.pred_err = (next.x.vec() - f_n_out.vec() - pred.mean).norm();
      rec.admm_iters = sol.diag.admm_iters;
      rec.ilqr_iters = sol.diag.ilqr_iters;
      rec.primal_res = sol.diag.primal_res;
      rec.dual_res = sol.diag.dual_res;
      rec.solve_us = sol.diag.wall_us;
      trace.push_back(rec);

      plant = next;
      t += cfg.Ts;
    }

    LapMetrics m = compute_metrics(trace, lap);
    m.failed = failed;
    result.metrics.push_back(m);
    result.traces.push_back(std::move(trace));

    // lap boundary learning update
    gp.update_from_candidates();
    gp.fit_all(cfg.seed + unsigned(lap));
    gp_active = true;
    result.gp_dumps.push_back(gp.to_json());

    if (failed) {
      plant = initial_state();
      pid.reset();
      warm.reset();
      s_prev = 0.0;
    }
  }
  return result;
}

struct SweepRow {
  double mu = 0.0;
  std::vector<LapMetrics> metrics;
};

// Table-I-style robustness study: the plant friction varies, the nominal
// controller model is unchanged. Scenarios are independent.
inline std::vector<SweepRow> friction_sweep(const SimConfig& cfg,
                                            const std::vector<double>& mus) {
  if (mus.empty()) throw std::invalid_argument("friction_sweep: no mu values");
  std::vector<SweepRow> rows;
  for (double mu : mus) {
    SimConfig c = cfg;
    c.plant.params_true.mu_f = mu;
    SweepRow row;
    row.mu = mu;
    row.metrics = run_closed_loop(c).metrics;
    rows.push_back(std::move(row));
  }
  return rows;
}

inline json metrics_to_json(const std::vector<LapMetrics>& metrics) {
  json j = json::array();
  for (const auto& m : metrics)
    j.push_back({{"lap", m.lap},
                 {"rmse_lateral", m.rmse_lateral},
                 {"max_lateral", m.max_lateral},
                 {"avg_cost", m.avg_cost},
                 {"avg_prediction_error", m.avg_prediction_error},
                 {"failed", m.failed}});
  return j;
}

// Writes trace_lap<k>.csv, metrics.json, config_resolved.json and
// gp_dict_lap<k>.json. Solve times are kept out of metrics.json (they are
// not reproducible across runs) and written to timings.json instead.
inline void export_results(const SimResult& result, const std::string& outdir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(outdir, ec);

  auto open = [&](const std::string& name) {
    std::ofstream f(outdir + "/" + name);
    if (!f) throw std::runtime_error("export: cannot write " + outdir + "/" + name);
    return f;
  };

  for (size_t lap = 0; lap < result.traces.size(); ++lap) {
    auto f = open("trace_lap" + std::to_string(lap + 1) + ".csv");
    const auto& cols = trace_columns();
    for (size_t i = 0; i < cols.size(); ++i)
      f << cols[i] << (i + 1 < cols.size() ? "," : "\n");
    f.precision(17);
    for (const auto& rec : result.traces[lap]) {
      const auto row = trace_row(rec);
      for (size_t i = 0; i < row.size(); ++i)
        f << row[i] << (i + 1 < row.size() ? "," : "\n");
    }
  }

  open("metrics.json") << metrics_to_json(result.metrics).dump(2) << "\n";

  {
    json t = json::array();
    for (const auto& m : result.metrics)
      t.push_back({{"lap", m.lap}, {"avg_solve_time_ms", m.avg_solve_time}});
    open("timings.json") << t.dump(2) << "\n";
  }

  open("config_resolved.json") << to_json(result.config).dump(2) << "\n";

  for (size_t lap = 0; lap < result.gp_dumps.size(); ++lap)
    open("gp_dict_lap" + std::to_string(lap + 1) + ".json")
        << result.gp_dumps[lap].dump(2) << "\n";
}

}  // namespace driftcpp
