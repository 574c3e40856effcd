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

#include <cmath>
#include <stdexcept>

#include "driftcpp/vehicle.hpp"

namespace driftcpp {

enum class PlantIntegrator { kRk4, kEuler };

// Truth-plant configuration. The plant runs the same model family as the
// nominal dynamics but with its own (perturbed) parameters, a finer
// integrator, optional first-order steering-actuator lag and additive
// process noise.
struct PlantConfig {
  VehicleParams params_true{};
  double integrator_step = 1e-3;   // [s], must divide the control period
  double actuator_lag_tau = 0.0;   // [s], 0 disables the steering lag
  Vec3 process_noise_std = Vec3::Zero();  // per-state std, applied per step
  PlantIntegrator integrator = PlantIntegrator::kRk4;

  bool valid() const { return params_true.valid() && integrator_step > 0.0; }
};

// Full plant state: global pose plus the drift states and the lagged
// steering actuator position.
struct PlantState {
  double X = 0.0;
  double Y = 0.0;
  double phi = 0.0;
  State x{};
  double delta_act = 0.0;

  Eigen::Matrix<double, 7, 1> vec() const {
    Eigen::Matrix<double, 7, 1> v;
    v << X, Y, phi, x.V, x.beta, x.r, delta_act;
    return v;
  }
  static PlantState from_vec(const Eigen::Matrix<double, 7, 1>& v) {
    PlantState s;
    s.X = v[0];
    s.Y = v[1];
    s.phi = v[2];
    s.x = State{v[3], v[4], v[5]};
    s.delta_act = v[6];
    return s;
  }
};

namespace detail {

inline Eigen::Matrix<double, 7, 1> plant_ode(
    const Eigen::Matrix<double, 7, 1>& v, const Control& u_cmd,
    const PlantConfig& cfg) {
  PlantState s = PlantState::from_vec(v);
  const double delta_eff =
      cfg.actuator_lag_tau > 0.0 ? s.delta_act : u_cmd.delta;
  const Control u_eff{delta_eff, u_cmd.Fxr};
  const Vec3 dx = continuous_dynamics(s.x, u_eff, cfg.params_true);
  Eigen::Matrix<double, 7, 1> dv;
  dv[0] = s.x.V * std::cos(s.phi + s.x.beta);
  dv[1] = s.x.V * std::sin(s.phi + s.x.beta);
  dv[2] = s.x.r;
  dv[3] = dx[0];
  dv[4] = dx[1];
  dv[5] = dx[2];
  dv[6] = cfg.actuator_lag_tau > 0.0
              ? (u_cmd.delta - s.delta_act) / cfg.actuator_lag_tau
              : 0.0;
  return dv;
}

}  // namespace detail

// Advances the plant by one control period Ts. `noise` is a standard-normal
// sample supplied by the caller (the harness owns the RNG); it is scaled by
// process_noise_std and added to the drift states once per call.
inline PlantState step_plant(const PlantState& s0, const Control& u_cmd,
                             const PlantConfig& cfg, double Ts,
                             const Vec3& noise = Vec3::Zero()) {
  if (!cfg.valid()) throw std::invalid_argument("step_plant: invalid config");
  const double ratio = Ts / cfg.integrator_step;
  const long n_sub = std::lround(ratio);
  if (n_sub < 1 || std::abs(ratio - double(n_sub)) > 1e-9 * ratio)
    throw std::invalid_argument(
        "step_plant: integrator_step must divide the control period");

  const double h = cfg.integrator_step;
  Eigen::Matrix<double, 7, 1> v = s0.vec();
  for (long i = 0; i < n_sub; ++i) {
    if (cfg.integrator == PlantIntegrator::kEuler) {
      v += h * detail::plant_ode(v, u_cmd, cfg);
    } else {
      const auto k1 = detail::plant_ode(v, u_cmd, cfg);
      const auto k2 = detail::plant_ode(v + 0.5 * h * k1, u_cmd, cfg);
      const auto k3 = detail::plant_ode(v + 0.5 * h * k2, u_cmd, cfg);
      const auto k4 = detail::plant_ode(v + h * k3, u_cmd, cfg);
      v += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
  }
  v.segment<3>(3) += cfg.process_noise_std.cwiseProduct(noise);
  return PlantState::from_vec(v);
}

}  // namespace driftcpp
