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

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

namespace driftcpp::ilqr {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct CostExpansion {
  double l = 0.0;
  VectorXd lx, lu;
  MatrixXd lxx, lux, luu;
};

struct TerminalExpansion {
  double l = 0.0;
  VectorXd lx;
  MatrixXd lxx;
};

// Discrete-time OCP with user-supplied dynamics and costs. Dimensions are
// fixed across the horizon.
struct OcpDefinition {
  int N = 0;
  int nx = 0;
  int nu = 0;
  std::function<VectorXd(const VectorXd&, const VectorXd&, int)> dynamics;
  std::function<void(const VectorXd&, const VectorXd&, int, MatrixXd&,
                     MatrixXd&)>
      dynamics_jacobians;  // fills A (nx x nx), B (nx x nu)
  std::function<double(const VectorXd&, const VectorXd&, int)> stage_cost;
  std::function<CostExpansion(const VectorXd&, const VectorXd&, int)>
      stage_expansion;
  std::function<double(const VectorXd&)> terminal_cost;
  std::function<TerminalExpansion(const VectorXd&)> terminal_expansion;
};

struct IlqrConfig {
  int max_iters = 100;
  double cost_tol = 1e-6;     // |dJ| threshold, absolute
  double reg_init = 1e-6;
  double reg_min = 1e-8;
  double reg_max = 1e8;
  std::vector<double> alpha_schedule = {1.0,    0.5,    0.25,  0.125,
                                        0.0625, 0.03125, 1.0 / 64.0};
};

struct Gains {
  VectorXd k;
  MatrixXd K;
};

struct IlqrSolution {
  std::vector<VectorXd> states;    // N+1
  std::vector<VectorXd> controls;  // N
  double cost = 0.0;
  std::vector<Gains> gains;
  int iterations = 0;
  bool converged = false;
  double final_reg = 0.0;
};

struct Trajectory {
  std::vector<VectorXd> x;  // N+1
  std::vector<VectorXd> u;  // N
  double cost = 0.0;
};

inline double total_cost(const Trajectory& traj, const OcpDefinition& ocp) {
  double J = 0.0;
  for (int i = 0; i < ocp.N; ++i) J += ocp.stage_cost(traj.x[i], traj.u[i], i);
  return J + ocp.terminal_cost(traj.x[ocp.N]);
}

inline Trajectory rollout(const VectorXd& x0,
                          const std::vector<VectorXd>& controls,
                          const OcpDefinition& ocp) {
  Trajectory t;
  t.x.resize(ocp.N + 1);
  t.u = controls;
  t.x[0] = x0;
  for (int i = 0; i < ocp.N; ++i) t.x[i + 1] = ocp.dynamics(t.x[i], t.u[i], i);
  t.cost = total_cost(t, ocp);
  return t;
}

struct BackwardPassResult {
  std::vector<Gains> gains;
  double dV1 = 0.0;  // expected decrease, linear term
  double dV2 = 0.0;  // expected decrease, quadratic term
  bool ok = false;   // false: Q_uu not PD under this regularization
};

// Riccati-like sweep on the quadratic expansion around the nominal
// trajectory. reg*I is added to Q_uu (Levenberg-Marquardt on the control
// Hessian only).
inline BackwardPassResult backward_pass(const Trajectory& traj,
                                        const OcpDefinition& ocp, double reg) {
  BackwardPassResult out;
  out.gains.resize(ocp.N);

  const TerminalExpansion term = ocp.terminal_expansion(traj.x[ocp.N]);
  VectorXd Vx = term.lx;
  MatrixXd Vxx = term.lxx;

  for (int i = ocp.N - 1; i >= 0; --i) {
    const CostExpansion c = ocp.stage_expansion(traj.x[i], traj.u[i], i);
    MatrixXd A(ocp.nx, ocp.nx), B(ocp.nx, ocp.nu);
    ocp.dynamics_jacobians(traj.x[i], traj.u[i], i, A, B);

    const VectorXd Qx = c.lx + A.transpose() * Vx;
    const VectorXd Qu = c.lu + B.transpose() * Vx;
    const MatrixXd Qxx = c.lxx + A.transpose() * Vxx * A;
    const MatrixXd Qux = c.lux + B.transpose() * Vxx * A;
    MatrixXd Quu = c.luu + B.transpose() * Vxx * B;
    Quu = 0.5 * (Quu + Quu.transpose());

    MatrixXd Quu_reg = Quu;
    Quu_reg.diagonal().array() += reg;
    Eigen::LLT<MatrixXd> llt(Quu_reg);
    if (llt.info() != Eigen::Success) return out;  // caller escalates reg

    Gains& g = out.gains[i];
    g.k = -llt.solve(Qu);
    g.K = -llt.solve(Qux);

    // value recursion; the mixed terms vanish at the exact minimizer but
    // keep the expansion consistent under regularization
    Vx = Qx + g.K.transpose() * Quu * g.k + g.K.transpose() * Qu +
         Qux.transpose() * g.k;
    Vxx = Qxx + g.K.transpose() * Quu * g.K + g.K.transpose() * Qux +
          Qux.transpose() * g.K;
    Vxx = 0.5 * (Vxx + Vxx.transpose());

    out.dV1 += g.k.dot(Qu);
    out.dV2 += 0.5 * g.k.dot(Quu * g.k);
  }
  out.ok = true;
  return out;
}

// Rolls out u+ = u + alpha*k + K(x+ - x). Non-finite states reject the
// candidate (cost +inf).
inline Trajectory forward_pass(const Trajectory& traj,
                               const std::vector<Gains>& gains, double alpha,
                               const OcpDefinition& ocp) {
  Trajectory t;
  t.x.resize(ocp.N + 1);
  t.u.resize(ocp.N);
  t.x[0] = traj.x[0];
  for (int i = 0; i < ocp.N; ++i) {
    t.u[i] = traj.u[i] + alpha * gains[i].k +
             gains[i].K * (t.x[i] - traj.x[i]);
    t.x[i + 1] = ocp.dynamics(t.x[i], t.u[i], i);
    if (!t.x[i + 1].allFinite() || !t.u[i].allFinite()) {
      t.cost = std::numeric_limits<double>::infinity();
      return t;
    }
  }
  t.cost = total_cost(t, ocp);
  return t;
}

inline IlqrSolution solve(const OcpDefinition& ocp, const VectorXd& x0,
                          const std::vector<VectorXd>& initial_controls,
                          const IlqrConfig& cfg = {}) {
  if (int(initial_controls.size()) != ocp.N)
    throw std::invalid_argument("ilqr: initial controls length != N");
  Trajectory traj = rollout(x0, initial_controls, ocp);
  if (!std::isfinite(traj.cost))
    throw std::runtime_error("ilqr: initial rollout is non-finite");

  double reg = cfg.reg_init;
  IlqrSolution sol;
  sol.gains.resize(ocp.N);

  int iter = 0;
  for (; iter < cfg.max_iters; ++iter) {
    BackwardPassResult bp = backward_pass(traj, ocp, reg);
    while (!bp.ok) {
      reg = std::max(reg, cfg.reg_min) * 10.0;
      if (reg > cfg.reg_max) break;
      bp = backward_pass(traj, ocp, reg);
    }
    if (!bp.ok) break;  // cannot regularize further; return best so far
    sol.gains = bp.gains;

    // stationary nominal: nothing left to gain
    if (std::abs(bp.dV1) + std::abs(bp.dV2) < cfg.cost_tol) {
      sol.converged = true;
      break;
    }

    bool accepted = false;
    for (double alpha : cfg.alpha_schedule) {
      const Trajectory cand = forward_pass(traj, bp.gains, alpha, ocp);
      if (!std::isfinite(cand.cost)) continue;
      const double expected = -(alpha * bp.dV1 + alpha * alpha * bp.dV2);
      const double actual = traj.cost - cand.cost;
      if (actual > 1e-4 * std::abs(expected)) {
        const double dJ = traj.cost - cand.cost;
        traj = cand;
        accepted = true;
        if (alpha == cfg.alpha_schedule.front())
          reg = std::max(cfg.reg_min, reg / 2.0);
        if (dJ < cfg.cost_tol) {
          sol.converged = true;
          ++iter;
        }
        break;
      }
    }
    if (sol.converged) break;
    if (!accepted) {
      reg = std::max(reg, cfg.reg_min) * 10.0;
      if (reg > cfg.reg_max) break;
    }
  }

  sol.states = traj.x;
  sol.controls = traj.u;
  sol.cost = traj.cost;
  sol.iterations = iter;
  sol.final_reg = reg;
  return sol;
}

}  // namespace driftcpp::ilqr
