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

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

namespace driftcpp {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat32 = Eigen::Matrix<double, 3, 2>;

struct VehicleParams {
  double m = 1140.0;     // mass [kg]
  double Iz = 1020.0;    // yaw inertia [kg m^2]
  double a = 1.165;      // CG to front axle [m]
  double b = 1.165;      // CG to rear axle [m]
  double mu_f = 1.0;     // tire-road friction coefficient
  double B = 12.55;      // Pacejka stiffness factor
  double C = 1.494;      // Pacejka shape factor
  double g = 9.81;       // gravity [m/s^2]

  bool valid() const {
    return m > 0 && Iz > 0 && a > 0 && b > 0 && mu_f > 0 && B > 0 && C > 1.0 &&
           C < 2.0;
  }
  // static load split, no longitudinal transfer
  double front_load() const { return m * g * b / (a + b); }
  double rear_load() const { return m * g * a / (a + b); }
};

// Drift states: speed magnitude V, sideslip beta, yaw rate r.
struct State {
  double V = 0.0;
  double beta = 0.0;
  double r = 0.0;

  Vec3 vec() const { return Vec3(V, beta, r); }
  static State from_vec(const Vec3& v) { return State{v[0], v[1], v[2]}; }
};

struct Control {
  double delta = 0.0;  // steering angle [rad]
  double Fxr = 0.0;    // rear longitudinal force [N]

  Vec2 vec() const { return Vec2(delta, Fxr); }
  static Control from_vec(const Vec2& v) { return Control{v[0], v[1]}; }
};

struct TireForces {
  double Fyf = 0.0;
  double Fyr = 0.0;
  double Fzf = 0.0;
  double Fzr = 0.0;
  double alpha_f = 0.0;
  double alpha_r = 0.0;
};

struct SlipAngles {
  double front = 0.0;
  double rear = 0.0;
};

inline SlipAngles slip_angles(const State& x, const Control& u,
                              const VehicleParams& p) {
  (void)p;
  if (x.V <= 0.0) throw std::domain_error("slip_angles: V must be positive");
  if (std::abs(x.beta) >= M_PI / 2.0)
    throw std::domain_error("slip_angles: |beta| >= pi/2");
  const double vx = x.V * std::cos(x.beta);
  const double vy = x.V * std::sin(x.beta);
  SlipAngles s;
  s.front = std::atan((vy + p.a * x.r) / vx) - u.delta;
  s.rear = std::atan((vy - p.b * x.r) / vx);
  return s;
}

// Simplified Pacejka curve, odd in alpha, saturating at mu_f*Fz.
inline double lateral_tire_force(double alpha, double Fz,
                                 const VehicleParams& p) {
  if (Fz <= 0.0) throw std::domain_error("lateral_tire_force: Fz must be > 0");
  return -p.mu_f * Fz * std::sin(p.C * std::atan(p.B * alpha));
}

// Slip angle at which |F_y| peaks at exactly mu_f*Fz.
inline double peak_slip_angle(const VehicleParams& p) {
  return std::tan(M_PI / (2.0 * p.C)) / p.B;
}

inline TireForces tire_forces(const State& x, const Control& u,
                              const VehicleParams& p) {
  const SlipAngles s = slip_angles(x, u, p);
  TireForces f;
  f.alpha_f = s.front;
  f.alpha_r = s.rear;
  f.Fzf = p.front_load();
  f.Fzr = p.rear_load();
  f.Fyf = lateral_tire_force(s.front, f.Fzf, p);
  f.Fyr = lateral_tire_force(s.rear, f.Fzr, p);
  return f;
}

// Single-track drift model, continuous time.
inline Vec3 continuous_dynamics(const State& x, const Control& u,
                                const VehicleParams& p) {
  const TireForces f = tire_forces(x, u, p);
  const double sb = std::sin(x.beta);
  const double cb = std::cos(x.beta);
  const double sdb = std::sin(u.delta - x.beta);
  const double cdb = std::cos(u.delta - x.beta);
  Vec3 dx;
  dx[0] = (-f.Fyf * sdb + f.Fyr * sb + u.Fxr * cb) / p.m;
  dx[1] = (f.Fyf * cdb + f.Fyr * cb - u.Fxr * sb) / (p.m * x.V) - x.r;
  dx[2] = (p.a * f.Fyf * std::cos(u.delta) - p.b * f.Fyr) / p.Iz;
  return dx;
}

// f_n: one forward-Euler step of the nominal model.
inline State step_nominal(const State& x, const Control& u,
                          const VehicleParams& p, double Ts) {
  if (Ts < 0.0) throw std::domain_error("step_nominal: Ts must be >= 0");
  return State::from_vec(x.vec() + Ts * continuous_dynamics(x, u, p));
}

struct DynamicsJacobians {
  Mat3 A;   // d f_n / d x
  Mat32 B;  // d f_n / d u
};

// Analytic Jacobians of step_nominal.
inline DynamicsJacobians jacobians_nominal(const State& x, const Control& u,
                                           const VehicleParams& p, double Ts) {
  const TireForces f = tire_forces(x, u, p);
  const double sb = std::sin(x.beta);
  const double cb = std::cos(x.beta);
  const double sdb = std::sin(u.delta - x.beta);
  const double cdb = std::cos(u.delta - x.beta);
  const double sd = std::sin(u.delta);
  const double cd = std::cos(u.delta);

  // slip angle partials: alpha = atan(n/d) - {delta|0}, n = V sb +- {a|b} r,
  // d = V cb
  const double num_f = x.V * sb + p.a * x.r;
  const double num_r = x.V * sb - p.b * x.r;
  const double den = x.V * cb;
  const double qf = num_f / den;
  const double qr = num_r / den;
  const double wf = 1.0 / (1.0 + qf * qf);
  const double wr = 1.0 / (1.0 + qr * qr);
  const double den2 = den * den;

  const double daf_dV = wf * (sb * den - num_f * cb) / den2;
  const double daf_db = wf * (x.V * cb * den + num_f * x.V * sb) / den2;
  const double daf_dr = wf * p.a / den;
  const double dar_dV = wr * (sb * den - num_r * cb) / den2;
  const double dar_db = wr * (x.V * cb * den + num_r * x.V * sb) / den2;
  const double dar_dr = wr * (-p.b) / den;

  // Pacejka slope dF_y/dalpha
  auto force_slope = [&p](double alpha, double Fz) {
    const double t = p.B * alpha;
    return -p.mu_f * Fz * std::cos(p.C * std::atan(t)) * p.C * p.B /
           (1.0 + t * t);
  };
  const double dFyf = force_slope(f.alpha_f, f.Fzf);
  const double dFyr = force_slope(f.alpha_r, f.Fzr);

  Mat3 Jx;
  Mat32 Ju;

  // dV row
  Jx(0, 0) = (-dFyf * daf_dV * sdb + dFyr * dar_dV * sb) / p.m;
  Jx(0, 1) = (-dFyf * daf_db * sdb + f.Fyf * cdb + dFyr * dar_db * sb +
              f.Fyr * cb - u.Fxr * sb) /
             p.m;
  Jx(0, 2) = (-dFyf * daf_dr * sdb + dFyr * dar_dr * sb) / p.m;
  Ju(0, 0) = (-dFyf * (-1.0) * sdb - f.Fyf * cdb) / p.m;
  Ju(0, 1) = cb / p.m;

  // dbeta row; S = Fyf*cdb + Fyr*cb - Fxr*sb
  const double S = f.Fyf * cdb + f.Fyr * cb - u.Fxr * sb;
  const double mV = p.m * x.V;
  Jx(1, 0) = (dFyf * daf_dV * cdb + dFyr * dar_dV * cb) / mV - S / (mV * x.V);
  Jx(1, 1) = (dFyf * daf_db * cdb + f.Fyf * sdb + dFyr * dar_db * cb -
              f.Fyr * sb - u.Fxr * cb) /
             mV;
  Jx(1, 2) = (dFyf * daf_dr * cdb + dFyr * dar_dr * cb) / mV - 1.0;
  Ju(1, 0) = (dFyf * (-1.0) * cdb - f.Fyf * sdb) / mV;
  Ju(1, 1) = -sb / mV;

  // dr row
  Jx(2, 0) = (p.a * dFyf * daf_dV * cd - p.b * dFyr * dar_dV) / p.Iz;
  Jx(2, 1) = (p.a * dFyf * daf_db * cd - p.b * dFyr * dar_db) / p.Iz;
  Jx(2, 2) = (p.a * dFyf * daf_dr * cd - p.b * dFyr * dar_dr) / p.Iz;
  Ju(2, 0) = (p.a * (dFyf * (-1.0) * cd - f.Fyf * sd)) / p.Iz;
  Ju(2, 1) = 0.0;

  DynamicsJacobians J;
  J.A = Mat3::Identity() + Ts * Jx;
  J.B = Ts * Ju;
  return J;
}

// Clamps a state into the region where the model is well defined. The
// optimizer evaluates predicted trajectories here so that open-loop
// divergence cannot push an evaluation past the V=0 / |beta|=pi/2
// singularities; costs still act on the raw state, which pulls the
// optimizer back into the region.
inline State clamp_to_model_region(const State& x) {
  return State{std::clamp(x.V, 1.0, 100.0), std::clamp(x.beta, -1.48, 1.48),
               std::clamp(x.r, -10.0, 10.0)};
}

// Guard for the closed-loop simulation: the model is singular near V=0 and
// |beta|=pi/2, and states past these bounds count as a failed lap.
inline bool state_within_guard(const State& x) {
  return std::isfinite(x.V) && std::isfinite(x.beta) && std::isfinite(x.r) &&
         x.V >= 0.5 && std::abs(x.beta) < 1.4;
}

}  // namespace driftcpp
