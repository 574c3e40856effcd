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

#include <string>
#include <vector>

#include "json.hpp"

#include "driftcpp/admm.hpp"
#include "driftcpp/path.hpp"
#include "driftcpp/plant.hpp"
#include "driftcpp/vehicle.hpp"

// JSON (de)serialization of the configuration types. Loading merges over
// the supplied defaults, so partial config files are fine.

namespace driftcpp {

using nlohmann::json;

namespace json_detail {

inline json vec_to_json(const Eigen::Ref<const Eigen::VectorXd>& v) {
  json j = json::array();
  for (int i = 0; i < v.size(); ++i) j.push_back(v[i]);
  return j;
}

template <typename VecT>
inline VecT vec_from_json(const json& j, const VecT& fallback) {
  VecT v = fallback;
  for (int i = 0; i < v.size() && i < int(j.size()); ++i)
    v[i] = j.at(i).get<double>();
  return v;
}

}  // namespace json_detail

inline json to_json(const VehicleParams& p) {
  return {{"m", p.m},       {"Iz", p.Iz}, {"a", p.a}, {"b", p.b},
          {"mu_f", p.mu_f}, {"B", p.B},   {"C", p.C}, {"g", p.g}};
}

inline VehicleParams vehicle_params_from_json(const json& j,
                                              VehicleParams d = {}) {
  d.m = j.value("m", d.m);
  d.Iz = j.value("Iz", d.Iz);
  d.a = j.value("a", d.a);
  d.b = j.value("b", d.b);
  d.mu_f = j.value("mu_f", d.mu_f);
  d.B = j.value("B", d.B);
  d.C = j.value("C", d.C);
  d.g = j.value("g", d.g);
  return d;
}

inline json to_json(const PlantConfig& c) {
  return {{"params_true", to_json(c.params_true)},
          {"integrator_step", c.integrator_step},
          {"actuator_lag_tau", c.actuator_lag_tau},
          {"process_noise_std", json_detail::vec_to_json(c.process_noise_std)},
          {"integrator",
           c.integrator == PlantIntegrator::kRk4 ? "rk4" : "euler"}};
}

inline PlantConfig plant_config_from_json(const json& j, PlantConfig d = {}) {
  if (j.contains("params_true"))
    d.params_true = vehicle_params_from_json(j["params_true"], d.params_true);
  d.integrator_step = j.value("integrator_step", d.integrator_step);
  d.actuator_lag_tau = j.value("actuator_lag_tau", d.actuator_lag_tau);
  if (j.contains("process_noise_std"))
    d.process_noise_std = json_detail::vec_from_json<Vec3>(
        j["process_noise_std"], d.process_noise_std);
  const std::string integ = j.value(
      "integrator", d.integrator == PlantIntegrator::kRk4 ? "rk4" : "euler");
  d.integrator =
      integ == "euler" ? PlantIntegrator::kEuler : PlantIntegrator::kRk4;
  return d;
}

inline json to_json(const ControllerConfig& c) {
  return {{"N", c.N},
          {"Q", json_detail::vec_to_json(c.Q)},
          {"Qf", json_detail::vec_to_json(c.Qf)},
          {"R", json_detail::vec_to_json(c.R)},
          {"P", json_detail::vec_to_json(c.P)},
          {"u_min", json_detail::vec_to_json(c.u_min)},
          {"u_max", json_detail::vec_to_json(c.u_max)},
          {"rho", c.rho},
          {"admm_max_iters", c.admm_max_iters},
          {"eps_primal", c.eps_primal},
          {"eps_dual", c.eps_dual},
          {"ilqr_first_iters", c.ilqr_first_iters},
          {"ilqr_inner_iters", c.ilqr_inner_iters}};
}

inline ControllerConfig controller_config_from_json(const json& j,
                                                    ControllerConfig d = {}) {
  d.N = j.value("N", d.N);
  if (j.contains("Q")) d.Q = json_detail::vec_from_json<Vec3>(j["Q"], d.Q);
  if (j.contains("Qf")) d.Qf = json_detail::vec_from_json<Vec3>(j["Qf"], d.Qf);
  if (j.contains("R")) d.R = json_detail::vec_from_json<Vec2>(j["R"], d.R);
  if (j.contains("P")) d.P = json_detail::vec_from_json<Vec2>(j["P"], d.P);
  if (j.contains("u_min"))
    d.u_min = json_detail::vec_from_json<Vec2>(j["u_min"], d.u_min);
  if (j.contains("u_max"))
    d.u_max = json_detail::vec_from_json<Vec2>(j["u_max"], d.u_max);
  d.rho = j.value("rho", d.rho);
  d.admm_max_iters = j.value("admm_max_iters", d.admm_max_iters);
  d.eps_primal = j.value("eps_primal", d.eps_primal);
  d.eps_dual = j.value("eps_dual", d.eps_dual);
  d.ilqr_first_iters = j.value("ilqr_first_iters", d.ilqr_first_iters);
  d.ilqr_inner_iters = j.value("ilqr_inner_iters", d.ilqr_inner_iters);
  if (!d.valid())
    throw std::invalid_argument("controller config: invalid (check bounds)");
  return d;
}

inline json to_json(const PidConfig& c) {
  return {{"kp", c.kp},
          {"ki", c.ki},
          {"kd", c.kd},
          {"x_la", c.x_la},
          {"integral_limit", c.integral_limit},
          {"output_limit", c.output_limit}};
}

inline PidConfig pid_config_from_json(const json& j, PidConfig d = {}) {
  d.kp = j.value("kp", d.kp);
  d.ki = j.value("ki", d.ki);
  d.kd = j.value("kd", d.kd);
  d.x_la = j.value("x_la", d.x_la);
  d.integral_limit = j.value("integral_limit", d.integral_limit);
  d.output_limit = j.value("output_limit", d.output_limit);
  return d;
}

struct PathSpec {
  std::string name = "clothoid-loop-20-45";  // built-in default
  std::vector<ClothoidSegment> segments;     // used when name is empty
  bool closed = true;
};

inline json to_json(const PathSpec& p) {
  json j;
  if (!p.name.empty()) {
    j["name"] = p.name;
  } else {
    j["closed"] = p.closed;
    j["segments"] = json::array();
    for (const auto& s : p.segments)
      j["segments"].push_back({{"length", s.length},
                               {"kappa0", s.kappa0},
                               {"kappa_rate", s.kappa_rate}});
  }
  return j;
}

inline PathSpec path_spec_from_json(const json& j, PathSpec d = {}) {
  if (j.contains("segments")) {
    d.name.clear();
    d.segments.clear();
    d.closed = j.value("closed", true);
    for (const auto& js : j["segments"])
      d.segments.push_back({js.at("length").get<double>(),
                            js.at("kappa0").get<double>(),
                            js.value("kappa_rate", 0.0)});
  } else if (j.contains("name")) {
    d.name = j["name"].get<std::string>();
  }
  return d;
}

inline ClothoidPath build_path(const PathSpec& spec) {
  if (!spec.name.empty()) {
    if (spec.name == "clothoid-loop-20-45") return default_drift_loop();
    throw std::invalid_argument("unknown built-in path: " + spec.name);
  }
  return build_clothoid_path(spec.segments, spec.closed);
}

}  // namespace driftcpp
