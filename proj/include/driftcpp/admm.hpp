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
#include <chrono>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "driftcpp/gp.hpp"
#include "driftcpp/ilqr.hpp"
#include "driftcpp/vehicle.hpp"

namespace driftcpp {

// Mean plus diagonal covariance of the drift states.
struct BeliefState {
  Vec3 mu = Vec3::Zero();
  Vec3 sigma = Vec3::Zero();  // variances

  Eigen::Matrix<double, 6, 1> vec() const {
    Eigen::Matrix<double, 6, 1> v;
    v << mu, sigma;
    return v;
  }
  static BeliefState from_vec(const Eigen::Matrix<double, 6, 1>& v) {
    return BeliefState{v.head<3>(), v.tail<3>()};
  }
};

struct ControllerConfig {
  int N = 20;
  Vec3 Q = Vec3(0.1, 1.0, 1.0);
  Vec3 Qf = Vec3(0.1, 1.0, 1.0);
  Vec2 R = Vec2(1.0, 1e-7);
  Vec2 P = Vec2(10.0, 1e-7);
  Vec2 u_min = Vec2(-0.6, 0.0);
  Vec2 u_max = Vec2(0.6, 10000.0);
  // rho trades consensus speed against w-update conditioning; 50 keeps the
  // primal residual small within the per-step iteration budget below.
  double rho = 50.0;
  int admm_max_iters = 50;
  double eps_primal = 1e-3;  // on the scaled controls (rad, kN)
  double eps_dual = 1e-3;
  int ilqr_first_iters = 50;    // inner iLQR budget, first ADMM iteration
  int ilqr_inner_iters = 10;    // budget thereafter
  // inner solves must be much tighter than the ADMM tolerances, otherwise
  // the dual residual floors at rho times the iLQR step noise
  double ilqr_cost_tol = 1e-10;
  // The OCP is multimodal (a low-sideslip "grip" solution coexists with the
  // drift solution) and warm starting can trap the solver in the expensive
  // basin after a reference jump or disturbance. When a warm-started solve
  // ends above this cost, the problem is re-solved from the cold-start
  // rollout and the cheaper of the two solutions is kept. <= 0 disables.
  double retry_cost_threshold = 30.0;
  // Weight on the GP variance channel inside the solver (cost trace term
  // and its jacobians). 1 is the full belief formulation; 0 optimizes the
  // GP mean dynamics only.
  double variance_weight = 1.0;
  // Weight on the GP mean correction inside the solver's dynamics model.
  // At 0 the mean enters the loop only through the GP-corrected
  // references and the solver plans over nominal mean dynamics plus the
  // GP variance channel. Damped below 1 because the full correction makes
  // the grip-mode local optimum attractive enough that the solver abandons
  // the drift basin during transients.
  double residual_mean_weight = 0.25;
  // Shrink the GP mean correction toward zero where the posterior variance
  // approaches the prior (confidence gating). Protects the solver from
  // spurious posterior structure outside the dictionary's support.
  bool gate_residual = true;
  // Include the residual's jacobians in the solver's linearized dynamics.
  // When false the residual enters as a stage-wise constant correction and
  // feedback gains come from the nominal model alone.
  bool residual_feedback = true;

  bool valid() const {
    return N >= 1 && rho > 0.0 && (u_min.array() < u_max.array()).all() &&
           eps_primal > 0.0 && eps_dual > 0.0;
  }
};

// Internal control scaling for the optimizer: steering stays in rad, the
// longitudinal force is handled in kN so that a single rho and single
// tolerance are meaningful across both channels.
inline const Vec2 kControlScale(1.0, 1000.0);

// Eq.-style additive belief propagation: the GP mean corrects the state,
// the GP variance accumulates into the diagonal covariance. No propagation
// through linearization.
inline BeliefState propagate_belief(const BeliefState& b, const Control& u,
                                    const GPModel* gp, const VehicleParams& p,
                                    double Ts, double var_weight = 1.0,
                                    bool gated = false,
                                    double mean_weight = 1.0) {
  const State mu_state = clamp_to_model_region(State::from_vec(b.mu));
  BeliefState out;
  out.mu = step_nominal(mu_state, u, p, Ts).vec();
  out.sigma = b.sigma;
  if (gp != nullptr && gp->trained()) {
    const ResidualPrediction pred = gated
                                        ? gp->predict_residual_gated(mu_state, u)
                                        : gp->predict_residual(mu_state, u);
    out.mu += mean_weight * pred.mean;
    out.sigma += var_weight * pred.var;
  }
  return out;
}

struct StageRef {
  State x{};
  Control u{};
};

struct BeliefCostExpansion {
  double L = 0.0;
  Eigen::Matrix<double, 6, 1> lx;
  Vec2 lu;
  Eigen::Matrix<double, 6, 6> lxx;
  Mat2 luu;
};

// L = ||mu - x_ref||_Q^2 + tr(Q Sigma) + ||u - u_ref||_R^2, with gradients
// over the 6-D belief; the trace term is linear in sigma.
inline BeliefCostExpansion belief_stage_cost(const BeliefState& b,
                                             const Control& u,
                                             const StageRef& ref,
                                             const Vec3& Q, const Vec2& R) {
  BeliefCostExpansion c;
  const Vec3 dx = b.mu - ref.x.vec();
  const Vec2 du = u.vec() - ref.u.vec();
  c.L = dx.dot(Q.cwiseProduct(dx)) + Q.dot(b.sigma) +
        du.dot(R.cwiseProduct(du));
  c.lx.head<3>() = 2.0 * Q.cwiseProduct(dx);
  c.lx.tail<3>() = Q;
  c.lu = 2.0 * R.cwiseProduct(du);
  c.lxx.setZero();
  c.lxx.topLeftCorner<3, 3>() = (2.0 * Q).asDiagonal();
  c.luu = (2.0 * R).asDiagonal();
  return c;
}

// Box-constrained QP of the u-update:
//   min_u  sum ||u_{i+1}-u_i||_P^2
//          + sum [lambda_i'(w_i - u_i) + (rho/2)||w_i - u_i||^2]
//   s.t.   lo <= u_i <= hi  componentwise.
// P diagonal makes the channels independent tridiagonal problems; each is
// solved by projected Newton on the free set with a gradient-projection
// fallback. Strictly convex for rho > 0.
inline std::vector<Vec2> qp_box_solve(const std::vector<Vec2>& w_plus,
                                      const std::vector<Vec2>& lambda,
                                      const Vec2& P, double rho,
                                      const Vec2& lo, const Vec2& hi) {
  const int N = int(w_plus.size());
  if (int(lambda.size()) != N)
    throw std::invalid_argument("qp_box_solve: length mismatch");
  std::vector<Vec2> out(N);

  for (int ch = 0; ch < 2; ++ch) {
    // H = rho I + 2 P T,  q_i = -lambda_i - rho w_i
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(N, N);
    Eigen::VectorXd q(N);
    for (int i = 0; i < N; ++i) {
      H(i, i) = rho;
      if (i > 0) {
        H(i, i) += 2.0 * P[ch];
        H(i, i - 1) -= 2.0 * P[ch];
      }
      if (i + 1 < N) {
        H(i, i) += 2.0 * P[ch];
        H(i, i + 1) -= 2.0 * P[ch];
      }
      q[i] = -lambda[i][ch] - rho * w_plus[i][ch];
    }

    auto clamp = [&](Eigen::VectorXd v) {
      return v.cwiseMax(lo[ch]).cwiseMin(hi[ch]);
    };
    auto objective = [&](const Eigen::VectorXd& v) {
      return 0.5 * v.dot(H * v) + q.dot(v);
    };

    Eigen::VectorXd u = clamp(H.ldlt().solve(-q));
    double f = objective(u);
    const double tol = 1e-12;

    for (int iter = 0; iter < 100; ++iter) {
      const Eigen::VectorXd g = H * u + q;
      std::vector<int> free;
      double kkt = 0.0;
      for (int i = 0; i < N; ++i) {
        const bool at_lo = u[i] <= lo[ch] + 1e-12;
        const bool at_hi = u[i] >= hi[ch] - 1e-12;
        if ((at_lo && g[i] > 0.0) || (at_hi && g[i] < 0.0)) {
          continue;  // active with correct multiplier sign
        }
        free.push_back(i);
        kkt = std::max(kkt, std::abs(g[i]));
      }
      if (kkt < tol) break;

      Eigen::VectorXd d = Eigen::VectorXd::Zero(N);
      const int nf = int(free.size());
      Eigen::MatrixXd Hff(nf, nf);
      Eigen::VectorXd gf(nf);
      for (int i = 0; i < nf; ++i) {
        gf[i] = g[free[i]];
        for (int j = 0; j < nf; ++j) Hff(i, j) = H(free[i], free[j]);
      }
      const Eigen::VectorXd df = Hff.ldlt().solve(-gf);
      for (int i = 0; i < nf; ++i) d[free[i]] = df[i];

      double t = 1.0;
      bool moved = false;
      while (t > 1e-12) {
        const Eigen::VectorXd u_new = clamp(u + t * d);
        const double f_new = objective(u_new);
        if (f_new < f - 1e-16) {
          u = u_new;
          f = f_new;
          moved = true;
          break;
        }
        t *= 0.5;
      }
      if (!moved) {
        // gradient-projection fallback
        const Eigen::VectorXd u_new = clamp(u - g / H.diagonal().maxCoeff());
        const double f_new = objective(u_new);
        if (f_new >= f) break;
        u = u_new;
        f = f_new;
      }
    }
    for (int i = 0; i < N; ++i) out[i][ch] = u[i];
  }
  return out;
}

struct AdmmIterate {
  Eigen::MatrixXd w;       // 2 x N, scaled control units
  Eigen::MatrixXd u;       // 2 x N
  Eigen::MatrixXd lambda;  // 2 x N
  double primal_res = 0.0;
  double dual_res = 0.0;
  bool valid() const { return w.cols() > 0; }
};

// Warm start for the next control period: shift one step, duplicate tail.
inline AdmmIterate shift_warm_start(const AdmmIterate& prev) {
  AdmmIterate out = prev;
  const int N = int(prev.w.cols());
  if (N < 1) return out;
  out.w.leftCols(N - 1) = prev.w.rightCols(N - 1);
  out.u.leftCols(N - 1) = prev.u.rightCols(N - 1);
  out.lambda.leftCols(N - 1) = prev.lambda.rightCols(N - 1);
  return out;
}

struct AdmmDiagnostics {
  int admm_iters = 0;
  int ilqr_iters = 0;
  double primal_res = 0.0;
  double dual_res = 0.0;
  double ilqr_cost = 0.0;  // cost of the final w-update
  bool converged = false;
  double wall_us = 0.0;
};

struct AdmmResult {
  Control u_apply{};
  AdmmIterate iterate;
  AdmmDiagnostics diag;
  std::vector<BeliefState> predicted;  // belief trajectory under w
};

// Drift optimal controller: ADMM split of the belief-state OCP into an
// unconstrained iLQR sub-problem (consensus controls w) and a box QP on the
// applied controls u, with dual ascent on lambda.
class DriftController {
 public:
  DriftController(const ControllerConfig& cfg, const VehicleParams& params,
                  double Ts)
      : cfg_(cfg), params_(params), Ts_(Ts) {
    if (!cfg.valid())
      throw std::invalid_argument("DriftController: invalid config");
  }

  const ControllerConfig& config() const { return cfg_; }

  AdmmResult solve(const BeliefState& b0, const std::vector<StageRef>& refs,
                   const GPModel* gp,
                   const std::optional<AdmmIterate>& warm = std::nullopt) {
    AdmmResult res = solve_once(b0, refs, gp, warm);
    // Retry decisions use the state-tracking cost only. The full objective
    // includes the covariance trace, which with a trained GP is a large
    // state-independent floor; folding it in would trip the threshold on
    // every solve and replace warm starting with cold-start churn.
    auto tracking_cost = [&](const AdmmResult& r) {
      double c = 0.0;
      for (int i = 0; i <= cfg_.N; ++i) {
        const Vec3 dx = r.predicted[size_t(i)].mu - refs[size_t(i)].x.vec();
        const Vec3& W = i == cfg_.N ? cfg_.Qf : cfg_.Q;
        c += dx.dot(W.cwiseProduct(dx));
      }
      return c;
    };
    const double res_track = tracking_cost(res);
    // Basin check: a grip-mode solution can be locally cheap, so the cost
    // threshold alone misses it; a terminal sideslip far from the
    // reference is the telltale of the wrong basin.
    auto in_basin = [&](const AdmmResult& r) {
      return std::abs(r.predicted.back().mu[1] - refs[cfg_.N].x.beta) <= 0.25;
    };
    if (warm && cfg_.retry_cost_threshold > 0.0 &&
        (res_track > cfg_.retry_cost_threshold || !in_basin(res))) {
      AdmmResult cold = solve_once(b0, refs, gp, std::nullopt);
      // When the car is already drifting near the reference, prefer the
      // candidate whose terminal sideslip stays in that basin; a grip-mode
      // plan can be locally cheaper but collapses the drift for many steps
      // before the controller recovers. During large transients (initial
      // sideslip far from the reference) a grip phase can be the correct
      // recovery, so selection falls back to predicted cost alone.
      const bool established =
          std::abs(b0.mu[1] - refs[0].x.beta) <= 0.25;
      const bool take_cold = established && in_basin(cold) != in_basin(res)
                                 ? in_basin(cold)
                                 : tracking_cost(cold) < res_track;
      if (take_cold) {
        cold.diag.admm_iters += res.diag.admm_iters;
        cold.diag.ilqr_iters += res.diag.ilqr_iters;
        cold.diag.wall_us += res.diag.wall_us;
        return cold;
      }
      res.diag.admm_iters += cold.diag.admm_iters;
      res.diag.ilqr_iters += cold.diag.ilqr_iters;
      res.diag.wall_us += cold.diag.wall_us;
    }
    return res;
  }

 private:
  AdmmResult solve_once(const BeliefState& b0,
                        const std::vector<StageRef>& refs, const GPModel* gp,
                        const std::optional<AdmmIterate>& warm) {
    const auto t_start = std::chrono::steady_clock::now();
    const int N = cfg_.N;
    if (int(refs.size()) < N + 1)
      throw std::invalid_argument("DriftController: refs length < N+1");

    const Vec2 scale = kControlScale;
    const Vec2 P_s = cfg_.P.cwiseProduct(scale.cwiseProduct(scale));
    const Vec2 lo = cfg_.u_min.cwiseQuotient(scale);
    const Vec2 hi = cfg_.u_max.cwiseQuotient(scale);

    AdmmIterate it;
    if (warm && warm->valid() && warm->w.cols() == N) {
      it = *warm;
      it.u = it.u.cwiseMax(lo.replicate(1, N)).cwiseMin(hi.replicate(1, N));
    } else {
      it.w = cold_start_rollout(b0, refs, lo, hi);
      it.u = it.w.cwiseMax(lo.replicate(1, N)).cwiseMin(hi.replicate(1, N));
      it.lambda = Eigen::MatrixXd::Zero(2, N);
    }

    ilqr::OcpDefinition ocp = make_ocp(refs, gp, it);
    ilqr::IlqrConfig icfg;
    icfg.cost_tol = cfg_.ilqr_cost_tol;

    AdmmDiagnostics diag;
    std::vector<Eigen::VectorXd> w_controls(N);
    for (int i = 0; i < N; ++i) w_controls[i] = it.w.col(i);
    ilqr::IlqrSolution wsol;

    for (int k = 0; k < cfg_.admm_max_iters; ++k) {
      // Relinearize the learned residual along the current consensus
      // trajectory before each w-update. The inner iLQR then optimizes
      // nominal dynamics plus a stage-wise affine residual model, which is
      // smooth; querying the posterior inside iLQR's line-search rollouts
      // makes the inner problem multimodal enough to stall it.
      refresh_gp_lin(b0, it.w, gp);
      icfg.max_iters = k == 0 ? cfg_.ilqr_first_iters : cfg_.ilqr_inner_iters;
      wsol = ilqr::solve(ocp, b0.vec(), w_controls, icfg);
      for (int i = 0; i < N; ++i) it.w.col(i) = wsol.controls[i];
      w_controls = wsol.controls;
      diag.ilqr_iters += wsol.iterations;
      diag.ilqr_cost = wsol.cost;

      std::vector<Vec2> wv(N), lv(N);
      for (int i = 0; i < N; ++i) {
        wv[i] = it.w.col(i);
        lv[i] = it.lambda.col(i);
      }
      const std::vector<Vec2> uv = qp_box_solve(wv, lv, P_s, cfg_.rho, lo, hi);

      double dual = 0.0, primal = 0.0;
      for (int i = 0; i < N; ++i) {
        dual = std::max(dual,
                        cfg_.rho * (uv[i] - Vec2(it.u.col(i))).cwiseAbs()
                            .maxCoeff());
        it.u.col(i) = uv[i];
        it.lambda.col(i) += cfg_.rho * (it.w.col(i) - it.u.col(i));
        primal =
            std::max(primal, (it.w.col(i) - it.u.col(i)).cwiseAbs().maxCoeff());
      }
      it.primal_res = primal;
      it.dual_res = dual;
      diag.admm_iters = k + 1;
      if (primal < cfg_.eps_primal && dual < cfg_.eps_dual) {
        diag.converged = true;
        break;
      }
    }

    diag.primal_res = it.primal_res;
    diag.dual_res = it.dual_res;

    AdmmResult res;
    res.u_apply = Control::from_vec(Vec2(it.u.col(0)).cwiseProduct(scale));
    res.iterate = it;
    res.predicted.reserve(N + 1);
    BeliefState b = b0;
    res.predicted.push_back(b);
    for (int i = 0; i < N; ++i) {
      b = propagate_belief(
          b, Control::from_vec(Vec2(it.w.col(i)).cwiseProduct(scale)), gp,
          params_, Ts_, cfg_.variance_weight, cfg_.gate_residual,
          cfg_.residual_mean_weight);
      res.predicted.push_back(b);
    }
    diag.wall_us = std::chrono::duration<double, std::micro>(
                       std::chrono::steady_clock::now() - t_start)
                       .count();
    res.diag = diag;
    return res;
  }

  // Cold-start control sequence: roll out an infinite-horizon LQR policy
  // linearized at the terminal reference. Holding the reference input is a
  // poor guess far from the reference (the drift equilibrium is a saddle,
  // so an open-loop hold diverges and the first w-update can settle in a
  // low-sideslip local minimum); the feedback rollout steers the guess into
  // the basin that actually approaches the reference.
  Eigen::MatrixXd cold_start_rollout(const BeliefState& b0,
                                     const std::vector<StageRef>& refs,
                                     const Vec2& lo, const Vec2& hi) const {
    const int N = cfg_.N;
    const Vec2 scale = kControlScale;
    const State x_ref = refs[N].x;
    const Vec2 u_ref_s = refs[N].u.vec().cwiseQuotient(scale);
    DynamicsJacobians J =
        jacobians_nominal(clamp_to_model_region(x_ref), refs[N].u, params_, Ts_);
    Mat32 B_s = J.B;
    B_s.col(0) *= scale[0];
    B_s.col(1) *= scale[1];
    const Mat3 Q = cfg_.Q.asDiagonal();
    const Mat2 R_s =
        Vec2(cfg_.R.cwiseProduct(scale.cwiseProduct(scale))).asDiagonal();
    Mat3 P = Q;
    Eigen::Matrix<double, 2, 3> K = Eigen::Matrix<double, 2, 3>::Zero();
    for (int i = 0; i < 200; ++i) {
      const Mat2 H = R_s + B_s.transpose() * P * B_s;
      K = H.ldlt().solve(B_s.transpose() * P * J.A);
      P = Q + J.A.transpose() * P * (J.A - B_s * K);
    }
    Eigen::MatrixXd w(2, N);
    State x = State::from_vec(b0.mu);
    for (int k = 0; k < N; ++k) {
      const Vec2 us = (u_ref_s - K * (x.vec() - x_ref.vec()))
                          .cwiseMax(lo)
                          .cwiseMin(hi);
      w.col(k) = us;
      x = step_nominal(clamp_to_model_region(x),
                       Control::from_vec(us.cwiseProduct(scale)), params_, Ts_);
    }
    return w;
  }

  // Belief-state OCP in scaled control units, with the ADMM penalty terms
  // folded into the stage cost of the w-update.
  ilqr::OcpDefinition make_ocp(const std::vector<StageRef>& refs,
                               const GPModel* /*gp*/, const AdmmIterate& it) {
    const Vec2 scale = kControlScale;
    ilqr::OcpDefinition ocp;
    ocp.N = cfg_.N;
    ocp.nx = 6;
    ocp.nu = 2;
    ocp.dynamics = [this, scale](const Eigen::VectorXd& xb,
                                 const Eigen::VectorXd& c, int i) {
      const BeliefState b = BeliefState::from_vec(xb);
      const Control u = Control::from_vec(Vec2(c).cwiseProduct(scale));
      BeliefState out = propagate_belief(b, u, nullptr, params_, Ts_);
      if (!gp_lin_.empty()) {
        const StageResidualLin& lin = gp_lin_[size_t(i)];
        Eigen::Matrix<double, 5, 1> dz;
        dz << Vec3(b.mu) - lin.z0.head<3>(), u.vec() - lin.z0.tail<2>();
        out.mu += lin.mean + lin.dmean * dz;
        out.sigma += cfg_.variance_weight * (lin.var + lin.dvar * dz);
      }
      return out.vec().eval();
    };
    ocp.dynamics_jacobians = [this, scale](const Eigen::VectorXd& xb,
                                           const Eigen::VectorXd& c, int i,
                                           Eigen::MatrixXd& A,
                                           Eigen::MatrixXd& B) {
      const State mu = clamp_to_model_region(State::from_vec(xb.head<3>()));
      const Control u = Control::from_vec(Vec2(c).cwiseProduct(scale));
      const DynamicsJacobians J = jacobians_nominal(mu, u, params_, Ts_);
      A.setZero(6, 6);
      B.setZero(6, 2);
      A.topLeftCorner<3, 3>() = J.A;
      A.bottomRightCorner<3, 3>().setIdentity();
      B.topRows<3>() = J.B;
      if (!gp_lin_.empty()) {
        const StageResidualLin& lin = gp_lin_[size_t(i)];
        A.topLeftCorner<3, 3>() += lin.dmean.leftCols<3>();
        A.bottomLeftCorner<3, 3>() = cfg_.variance_weight * lin.dvar.leftCols<3>();
        B.topRows<3>() += lin.dmean.rightCols<2>();
        B.bottomRows<3>() = cfg_.variance_weight * lin.dvar.rightCols<2>();
      }
      B.col(0) *= scale[0];
      B.col(1) *= scale[1];
    };
    const Vec2 R_s = cfg_.R.cwiseProduct(scale.cwiseProduct(scale));
    auto stage = [this, &refs, R_s, scale](const Eigen::VectorXd& xb,
                                           const Eigen::VectorXd& c, int i,
                                           const AdmmIterate* iter) {
      const BeliefState b = BeliefState::from_vec(xb);
      const Vec3 dx = b.mu - refs[i].x.vec();
      const Vec2 du = Vec2(c) - refs[i].u.vec().cwiseQuotient(scale);
      double L = dx.dot(cfg_.Q.cwiseProduct(dx)) + cfg_.Q.dot(b.sigma) +
                 du.dot(R_s.cwiseProduct(du));
      if (iter != nullptr) {
        const Vec2 wu = Vec2(c) - Vec2(iter->u.col(i));
        L += Vec2(iter->lambda.col(i)).dot(wu) +
             0.5 * cfg_.rho * wu.squaredNorm();
      }
      return L;
    };
    ocp.stage_cost = [stage, &it](const Eigen::VectorXd& xb,
                                  const Eigen::VectorXd& c, int i) {
      return stage(xb, c, i, &it);
    };
    ocp.stage_expansion = [this, &refs, &it, R_s, scale, stage](
                              const Eigen::VectorXd& xb,
                              const Eigen::VectorXd& c, int i) {
      const BeliefState b = BeliefState::from_vec(xb);
      const Vec3 dx = b.mu - refs[i].x.vec();
      const Vec2 du = Vec2(c) - refs[i].u.vec().cwiseQuotient(scale);
      const Vec2 wu = Vec2(c) - Vec2(it.u.col(i));
      ilqr::CostExpansion e;
      e.l = stage(xb, c, i, &it);
      e.lx.resize(6);
      e.lx.head<3>() = 2.0 * cfg_.Q.cwiseProduct(dx);
      e.lx.tail<3>() = cfg_.Q;
      e.lu = 2.0 * R_s.cwiseProduct(du) + Vec2(it.lambda.col(i)) +
             cfg_.rho * wu;
      e.lxx = Eigen::MatrixXd::Zero(6, 6);
      e.lxx.topLeftCorner<3, 3>() = (2.0 * cfg_.Q).asDiagonal();
      e.luu = (2.0 * R_s).asDiagonal();
      e.luu.diagonal().array() += cfg_.rho;
      e.lux = Eigen::MatrixXd::Zero(2, 6);
      return e;
    };
    ocp.terminal_cost = [this, &refs](const Eigen::VectorXd& xb) {
      const BeliefState b = BeliefState::from_vec(xb);
      const Vec3 dx = b.mu - refs[cfg_.N].x.vec();
      return dx.dot(cfg_.Qf.cwiseProduct(dx)) + cfg_.Qf.dot(b.sigma);
    };
    ocp.terminal_expansion = [this, &refs](const Eigen::VectorXd& xb) {
      const BeliefState b = BeliefState::from_vec(xb);
      const Vec3 dx = b.mu - refs[cfg_.N].x.vec();
      ilqr::TerminalExpansion e;
      e.l = dx.dot(cfg_.Qf.cwiseProduct(dx)) + cfg_.Qf.dot(b.sigma);
      e.lx.resize(6);
      e.lx.head<3>() = 2.0 * cfg_.Qf.cwiseProduct(dx);
      e.lx.tail<3>() = cfg_.Qf;
      e.lxx = Eigen::MatrixXd::Zero(6, 6);
      e.lxx.topLeftCorner<3, 3>() = (2.0 * cfg_.Qf).asDiagonal();
      return e;
    };
    return ocp;
  }

  // Stage-wise affine model of the learned residual, refreshed once per
  // ADMM iteration around the current consensus rollout.
  struct StageResidualLin {
    Eigen::Matrix<double, 5, 1> z0;  // expansion point [x; u] (physical units)
    Vec3 mean = Vec3::Zero();
    Vec3 var = Vec3::Zero();
    Eigen::Matrix<double, 3, 5> dmean = Eigen::Matrix<double, 3, 5>::Zero();
    Eigen::Matrix<double, 3, 5> dvar = Eigen::Matrix<double, 3, 5>::Zero();
  };

  void refresh_gp_lin(const BeliefState& b0, const Eigen::MatrixXd& w,
                      const GPModel* gp) {
    gp_lin_.clear();
    if (gp == nullptr || !gp->trained()) return;
    const Vec2 scale = kControlScale;
    gp_lin_.resize(size_t(cfg_.N));
    BeliefState b = b0;
    for (int i = 0; i < cfg_.N; ++i) {
      const Control u = Control::from_vec(Vec2(w.col(i)).cwiseProduct(scale));
      const State mu = clamp_to_model_region(State::from_vec(b.mu));
      StageResidualLin& lin = gp_lin_[size_t(i)];
      lin.z0 << mu.vec(), u.vec();
      const ResidualPrediction p = cfg_.gate_residual
                                       ? gp->predict_residual_gated(mu, u)
                                       : gp->predict_residual(mu, u);
      const ResidualJacobians G = cfg_.gate_residual
                                      ? gp->residual_jacobians_gated(mu, u)
                                      : gp->residual_jacobians(mu, u);
      lin.mean = cfg_.residual_mean_weight * p.mean;
      lin.var = p.var;
      if (cfg_.residual_feedback) {
        lin.dmean = cfg_.residual_mean_weight * G.dmean;
        lin.dvar = G.dvar;
      }
      b = propagate_belief(b, u, gp, params_, Ts_, cfg_.variance_weight,
                           cfg_.gate_residual, cfg_.residual_mean_weight);
    }
  }

  ControllerConfig cfg_;
  VehicleParams params_;
  double Ts_;
  std::vector<StageResidualLin> gp_lin_;
};

}  // namespace driftcpp
