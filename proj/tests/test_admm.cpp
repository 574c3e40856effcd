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
#include <catch2/catch_amalgamated.hpp>
#include <random>

#include "driftcpp/admm.hpp"
#include "driftcpp/equilibrium.hpp"

using namespace driftcpp;

namespace {

constexpr double kDeltaEq = -20.0 * M_PI / 180.0;

std::vector<StageRef> constant_refs(const EquilibriumPoint& eq, int n) {
  std::vector<StageRef> refs(n);
  for (auto& r : refs) {
    r.x = eq.x_eq;
    r.u = eq.u_eq;
  }
  return refs;
}

// Active-set enumeration oracle for the per-channel box QP:
// min 0.5 u'Hu + q'u s.t. lo <= u <= hi, H PD. Every variable is lo-active,
// hi-active or free; all 3^N patterns are checked for primal and dual
// feasibility. The strictly convex problem has exactly one KKT point.
Eigen::VectorXd qp_oracle(const Eigen::MatrixXd& H, const Eigen::VectorXd& q,
                          double lo, double hi) {
  const int n = int(q.size());
  int patterns = 1;
  for (int i = 0; i < n; ++i) patterns *= 3;

  for (int pat = 0; pat < patterns; ++pat) {
    std::vector<int> code(n);
    int rem = pat;
    for (int i = 0; i < n; ++i) {
      code[i] = rem % 3;  // 0 = lo, 1 = free, 2 = hi
      rem /= 3;
    }
    std::vector<int> free;
    Eigen::VectorXd u(n);
    for (int i = 0; i < n; ++i) {
      if (code[i] == 0)
        u[i] = lo;
      else if (code[i] == 2)
        u[i] = hi;
      else
        free.push_back(i);
    }
    const int nf = int(free.size());
    if (nf > 0) {
      Eigen::MatrixXd Hff(nf, nf);
      Eigen::VectorXd rhs(nf);
      for (int i = 0; i < nf; ++i) {
        rhs[i] = -q[free[i]];
        for (int j = 0; j < n; ++j)
          if (std::find(free.begin(), free.end(), j) == free.end())
            rhs[i] -= H(free[i], j) * u[j];
        for (int j = 0; j < nf; ++j) Hff(i, j) = H(free[i], free[j]);
      }
      const Eigen::VectorXd uf = Hff.ldlt().solve(rhs);
      for (int i = 0; i < nf; ++i) u[free[i]] = uf[i];
    }
    // primal feasibility of the free block
    bool ok = true;
    for (int i : free)
      if (u[i] < lo - 1e-10 || u[i] > hi + 1e-10) ok = false;
    if (!ok) continue;
    // dual feasibility of the active blocks
    const Eigen::VectorXd g = H * u + q;
    for (int i = 0; i < n; ++i) {
      if (code[i] == 0 && g[i] < -1e-10) ok = false;
      if (code[i] == 2 && g[i] > 1e-10) ok = false;
    }
    if (ok) return u;
  }
  throw std::runtime_error("qp_oracle: no KKT point found");
}

}  // namespace

TEST_CASE("belief propagation without a model is the nominal step") {
  VehicleParams p;
  BeliefState b;
  b.mu = Vec3(12.0, -0.4, 0.6);
  b.sigma = Vec3(0.01, 0.02, 0.03);
  const Control u{-0.3, 2500.0};
  const BeliefState next = propagate_belief(b, u, nullptr, p, 0.1);
  CHECK((next.mu - step_nominal(State::from_vec(b.mu), u, p, 0.1).vec())
            .norm() == 0.0);
  CHECK((next.sigma - b.sigma).norm() == 0.0);
}

TEST_CASE("belief propagation adds the model mean and variance") {
  VehicleParams p;
  GPModel gp(20);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> un(-0.05, 0.05);
  for (int i = 0; i < 20; ++i) {
    State x{11.0 + 0.2 * i, -0.4 + un(rng), 0.6 + un(rng)};
    Control u{-0.3, 2500.0};
    const State f_n = step_nominal(x, u, p, 0.1);
    const State xn =
        State::from_vec(f_n.vec() + Vec3(un(rng), un(rng), un(rng)));
    gp.record_transition(x, u, xn, f_n);
  }
  gp.update_from_candidates();
  REQUIRE(gp.trained());

  BeliefState b;
  b.mu = Vec3(12.0, -0.4, 0.6);
  b.sigma = Vec3(0.01, 0.02, 0.03);
  const Control u{-0.3, 2500.0};
  const BeliefState next = propagate_belief(b, u, &gp, p, 0.1);
  const ResidualPrediction pred =
      gp.predict_residual(State::from_vec(b.mu), u);
  const Vec3 mu_want =
      step_nominal(State::from_vec(b.mu), u, p, 0.1).vec() + pred.mean;
  CHECK((next.mu - mu_want).norm() < 1e-15);
  CHECK((next.sigma - (b.sigma + pred.var)).norm() < 1e-15);
}

TEST_CASE("belief stage cost value and derivatives") {
  const Vec3 Q(0.1, 1.0, 1.0);
  const Vec2 R(1.0, 1e-7);
  StageRef ref;
  ref.x = State{12.0, -0.4, 0.6};
  ref.u = Control{-0.3, 2500.0};

  BeliefState b;
  b.mu = ref.x.vec();
  b.sigma = Vec3(1.0, 1.0, 1.0);
  // on-reference: only the trace term remains, tr(Q Sigma) = 2.1
  const BeliefCostExpansion on =
      belief_stage_cost(b, ref.u, ref, Q, R);
  CHECK(on.L == Catch::Approx(2.1).margin(1e-12));

  // finite differences at a generic point
  b.mu += Vec3(0.3, -0.05, 0.1);
  b.sigma = Vec3(0.02, 0.01, 0.04);
  const Control u{-0.25, 2600.0};
  const BeliefCostExpansion c = belief_stage_cost(b, u, ref, Q, R);

  const double h = 1e-6;
  for (int j = 0; j < 6; ++j) {
    auto bp = b, bm = b;
    Eigen::Matrix<double, 6, 1> vp = b.vec(), vm = b.vec();
    vp[j] += h;
    vm[j] -= h;
    bp = BeliefState::from_vec(vp);
    bm = BeliefState::from_vec(vm);
    const double fd = (belief_stage_cost(bp, u, ref, Q, R).L -
                       belief_stage_cost(bm, u, ref, Q, R).L) /
                      (2.0 * h);
    CHECK(c.lx[j] == Catch::Approx(fd).margin(1e-5));
  }
  for (int j = 0; j < 2; ++j) {
    Vec2 up = u.vec(), um = u.vec();
    const double hu = j == 0 ? h : h * 1e4;
    up[j] += hu;
    um[j] -= hu;
    const double fd =
        (belief_stage_cost(b, Control::from_vec(up), ref, Q, R).L -
         belief_stage_cost(b, Control::from_vec(um), ref, Q, R).L) /
        (2.0 * hu);
    CHECK(c.lu[j] == Catch::Approx(fd).margin(1e-4));
  }
}

TEST_CASE("box QP with no smoothing term has a closed form") {
  // P = 0: the objective separates per stage, u = clamp(w + lambda/rho)
  const double rho = 1.7;
  std::vector<Vec2> w = {{0.2, 1.0}, {-0.9, 3.0}, {0.0, -2.0}};
  std::vector<Vec2> lam = {{0.1, -0.5}, {-0.3, 0.2}, {0.0, 0.0}};
  const Vec2 lo(-0.6, 0.0), hi(0.6, 10.0);
  const auto u = qp_box_solve(w, lam, Vec2::Zero(), rho, lo, hi);
  for (size_t i = 0; i < w.size(); ++i) {
    const Vec2 want = (w[i] + lam[i] / rho).cwiseMax(lo).cwiseMin(hi);
    CHECK((u[i] - want).norm() < 1e-10);
  }
}

TEST_CASE("box QP matches active-set enumeration on random problems") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    const int N = 4;
    const double rho = 0.5 + 2.0 * std::abs(nd(rng));
    const Vec2 P(std::abs(nd(rng)), std::abs(nd(rng)));
    const Vec2 lo(-0.8, -1.0), hi(0.7, 1.5);
    std::vector<Vec2> w(N), lam(N);
    for (int i = 0; i < N; ++i) {
      w[i] = Vec2(nd(rng), nd(rng));
      lam[i] = Vec2(nd(rng), nd(rng));
    }
    const auto u = qp_box_solve(w, lam, P, rho, lo, hi);

    for (int ch = 0; ch < 2; ++ch) {
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
        q[i] = -lam[i][ch] - rho * w[i][ch];
      }
      const Eigen::VectorXd want = qp_oracle(H, q, lo[ch], hi[ch]);
      Eigen::VectorXd got(N);
      for (int i = 0; i < N; ++i) got[i] = u[i][ch];
      CHECK((got - want).lpNorm<Eigen::Infinity>() < 1e-8);

      // KKT residual on the free set
      const Eigen::VectorXd g = H * got + q;
      for (int i = 0; i < N; ++i) {
        const bool at_lo = got[i] <= lo[ch] + 1e-10;
        const bool at_hi = got[i] >= hi[ch] - 1e-10;
        if (!at_lo && !at_hi) CHECK(std::abs(g[i]) < 1e-8);
        if (at_lo) CHECK(g[i] > -1e-8);
        if (at_hi) CHECK(g[i] < 1e-8);
      }
    }
  }
}

TEST_CASE("shift_warm_start shifts and duplicates the tail") {
  AdmmIterate it;
  it.w.resize(2, 3);
  it.w << 1, 2, 3, 4, 5, 6;
  it.u = 2.0 * it.w;
  it.lambda = -it.w;
  const AdmmIterate s = shift_warm_start(it);
  CHECK(s.w(0, 0) == 2);
  CHECK(s.w(0, 1) == 3);
  CHECK(s.w(0, 2) == 3);
  CHECK(s.u(1, 0) == 10);
  CHECK(s.lambda(0, 2) == -3);
}

TEST_CASE("controller validates its inputs") {
  VehicleParams p;
  ControllerConfig bad;
  bad.rho = -1.0;
  CHECK_THROWS_AS(DriftController(bad, p, 0.1), std::invalid_argument);

  DriftController ctrl(ControllerConfig{}, p, 0.1);
  BeliefState b;
  b.mu = Vec3(12.0, -0.4, 0.6);
  CHECK_THROWS_AS(ctrl.solve(b, std::vector<StageRef>(5), nullptr),
                  std::invalid_argument);
}

TEST_CASE("with inactive bounds and no smoothing, ADMM solves the iLQR problem") {
  VehicleParams p;
  const EquilibriumPoint eq = solve_equilibrium(kDeltaEq, 30.0, p);

  // With P=0 and inactive bounds ADMM reduces to the proximal-point method
  // on the plain OCP. The cost valley around the drift solution is very
  // flat, so a small rho (weak prox anchor) is what lets the iterates walk
  // down the valley to the strict minimizer instead of stalling early.
  ControllerConfig cfg;
  cfg.P = Vec2::Zero();
  cfg.u_min = Vec2(-100.0, -1e7);
  cfg.u_max = Vec2(100.0, 1e7);
  cfg.rho = 1e-3;
  cfg.admm_max_iters = 300;
  cfg.eps_primal = 1e-9;
  cfg.eps_dual = 1e-9;
  cfg.ilqr_first_iters = 400;
  cfg.ilqr_inner_iters = 100;
  cfg.ilqr_cost_tol = 1e-13;
  DriftController ctrl(cfg, p, 0.1);

  // direct reference solver on the identical OCP without the consensus
  // split: scaled controls, belief dynamics, tracking cost
  const Vec2 scale = kControlScale;
  const std::vector<StageRef> refs = constant_refs(eq, cfg.N + 1);
  ilqr::OcpDefinition ocp;
  ocp.N = cfg.N;
  ocp.nx = 6;
  ocp.nu = 2;
  ocp.dynamics = [&](const Eigen::VectorXd& xb, const Eigen::VectorXd& c,
                     int) {
    return propagate_belief(BeliefState::from_vec(xb),
                            Control::from_vec(Vec2(c).cwiseProduct(scale)),
                            nullptr, p, 0.1)
        .vec()
        .eval();
  };
  ocp.dynamics_jacobians = [&](const Eigen::VectorXd& xb,
                               const Eigen::VectorXd& c, int,
                               Eigen::MatrixXd& A, Eigen::MatrixXd& B) {
    const DynamicsJacobians J = jacobians_nominal(
        clamp_to_model_region(State::from_vec(xb.head<3>())),
        Control::from_vec(Vec2(c).cwiseProduct(scale)), p, 0.1);
    A.setZero(6, 6);
    B.setZero(6, 2);
    A.topLeftCorner<3, 3>() = J.A;
    A.bottomRightCorner<3, 3>().setIdentity();
    B.topRows<3>() = J.B;
    B.col(0) *= scale[0];
    B.col(1) *= scale[1];
  };
  const Vec2 R_s = cfg.R.cwiseProduct(scale.cwiseProduct(scale));
  ocp.stage_cost = [&](const Eigen::VectorXd& xb, const Eigen::VectorXd& c,
                       int i) {
    return belief_stage_cost(
               BeliefState::from_vec(xb),
               Control::from_vec(Vec2(c).cwiseProduct(scale)), refs[i],
               cfg.Q, cfg.R)
        .L;
  };
  ocp.stage_expansion = [&](const Eigen::VectorXd& xb,
                            const Eigen::VectorXd& c, int i) {
    const BeliefState b = BeliefState::from_vec(xb);
    const Vec2 du = Vec2(c) - refs[i].u.vec().cwiseQuotient(scale);
    const Vec3 dx = b.mu - refs[i].x.vec();
    ilqr::CostExpansion e;
    e.l = dx.dot(cfg.Q.cwiseProduct(dx)) + cfg.Q.dot(b.sigma) +
          du.dot(R_s.cwiseProduct(du));
    e.lx.resize(6);
    e.lx.head<3>() = 2.0 * cfg.Q.cwiseProduct(dx);
    e.lx.tail<3>() = cfg.Q;
    e.lu = 2.0 * R_s.cwiseProduct(du);
    e.lxx = Eigen::MatrixXd::Zero(6, 6);
    e.lxx.topLeftCorner<3, 3>() = (2.0 * cfg.Q).asDiagonal();
    e.luu = (2.0 * R_s).asDiagonal();
    e.lux = Eigen::MatrixXd::Zero(2, 6);
    return e;
  };
  ocp.terminal_cost = [&](const Eigen::VectorXd& xb) {
    const BeliefState b = BeliefState::from_vec(xb);
    const Vec3 dx = b.mu - refs[cfg.N].x.vec();
    return dx.dot(cfg.Qf.cwiseProduct(dx)) + cfg.Qf.dot(b.sigma);
  };
  ocp.terminal_expansion = [&](const Eigen::VectorXd& xb) {
    const BeliefState b = BeliefState::from_vec(xb);
    const Vec3 dx = b.mu - refs[cfg.N].x.vec();
    ilqr::TerminalExpansion e;
    e.l = dx.dot(cfg.Qf.cwiseProduct(dx)) + cfg.Qf.dot(b.sigma);
    e.lx.resize(6);
    e.lx.head<3>() = 2.0 * cfg.Qf.cwiseProduct(dx);
    e.lx.tail<3>() = cfg.Qf;
    e.lxx = Eigen::MatrixXd::Zero(6, 6);
    e.lxx.topLeftCorner<3, 3>() = (2.0 * cfg.Qf).asDiagonal();
    return e;
  };

  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> un(-0.05, 0.05);
  for (int trial = 0; trial < 20; ++trial) {
    BeliefState b0;
    b0.mu = eq.x_eq.vec() + Vec3(20.0 * un(rng), un(rng), un(rng));
    b0.sigma.setZero();

    const AdmmResult res = ctrl.solve(b0, refs, nullptr);
    CHECK(res.diag.converged);
    // consensus is exact here: the u-update is the identity with P = 0 and
    // inactive bounds
    CHECK((res.iterate.w - res.iterate.u).cwiseAbs().maxCoeff() < 1e-8);

    // the OCP is multimodal, so an independently cold-started iLQR can land
    // in a different basin. The equivalence statement is local: iLQR
    // restarted from a perturbation of the ADMM point must settle on the
    // same solution.
    ilqr::IlqrConfig icfg;
    icfg.max_iters = 2000;
    icfg.cost_tol = 1e-13;
    std::vector<Eigen::VectorXd> u0(cfg.N);
    for (int i = 0; i < cfg.N; ++i) {
      u0[i] = Eigen::VectorXd(Vec2(res.iterate.w.col(i)));
      u0[i][0] += 1e-3;
      u0[i][1] -= 1e-3;
    }
    const ilqr::IlqrSolution ref_sol = ilqr::solve(ocp, b0.vec(), u0, icfg);
    REQUIRE(ref_sol.converged);

    for (int i = 0; i < cfg.N; ++i) {
      CAPTURE(trial, i);
      CHECK((Vec2(res.iterate.u.col(i)) - Vec2(ref_sol.controls[i]))
                .lpNorm<Eigen::Infinity>() < 1e-4);
    }
    CHECK(std::abs(res.u_apply.delta - ref_sol.controls[0][0]) < 1e-4);
    CHECK(std::abs(res.u_apply.Fxr - ref_sol.controls[0][1] * scale[1]) <
          1e-4 * scale[1]);
  }
}

TEST_CASE("applied controls always respect the bounds") {
  VehicleParams p;
  const EquilibriumPoint eq = solve_equilibrium(kDeltaEq, 20.0, p);
  ControllerConfig cfg;
  DriftController ctrl(cfg, p, 0.1);
  const std::vector<StageRef> refs = constant_refs(eq, cfg.N + 1);

  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> un(-0.2, 0.2);
  for (int trial = 0; trial < 10; ++trial) {
    BeliefState b0;
    b0.mu = eq.x_eq.vec() + Vec3(30.0 * un(rng), un(rng), 2.0 * un(rng));
    b0.mu[0] = std::max(b0.mu[0], 5.0);
    const AdmmResult res = ctrl.solve(b0, refs, nullptr);
    CHECK(res.u_apply.delta >= cfg.u_min[0] - 1e-9);
    CHECK(res.u_apply.delta <= cfg.u_max[0] + 1e-9);
    CHECK(res.u_apply.Fxr >= cfg.u_min[1] - 1e-6);
    CHECK(res.u_apply.Fxr <= cfg.u_max[1] + 1e-6);
  }
}

TEST_CASE("warm starting at a solved state converges immediately") {
  VehicleParams p;
  const EquilibriumPoint eq = solve_equilibrium(kDeltaEq, 30.0, p);
  // a configuration that reaches consensus: no inter-stage smoothing
  ControllerConfig cfg;
  cfg.P = Vec2::Zero();
  cfg.admm_max_iters = 300;
  cfg.eps_primal = 1e-6;
  cfg.eps_dual = 1e-6;
  cfg.ilqr_inner_iters = 50;
  DriftController ctrl(cfg, p, 0.1);
  const std::vector<StageRef> refs = constant_refs(eq, cfg.N + 1);

  BeliefState b0;
  b0.mu = eq.x_eq.vec() + Vec3(0.5, 0.02, -0.03);

  const AdmmResult cold = ctrl.solve(b0, refs, nullptr);
  REQUIRE(cold.diag.converged);
  const AdmmResult warm = ctrl.solve(b0, refs, nullptr, cold.iterate);
  CHECK(warm.diag.converged);
  CHECK(warm.diag.admm_iters <= 2);
  CHECK(std::abs(warm.u_apply.delta - cold.u_apply.delta) < 1e-3);
}

TEST_CASE("predicted belief trajectory starts at the initial belief") {
  VehicleParams p;
  const EquilibriumPoint eq = solve_equilibrium(kDeltaEq, 30.0, p);
  ControllerConfig cfg;
  DriftController ctrl(cfg, p, 0.1);
  const std::vector<StageRef> refs = constant_refs(eq, cfg.N + 1);
  BeliefState b0;
  b0.mu = eq.x_eq.vec();
  const AdmmResult res = ctrl.solve(b0, refs, nullptr);
  REQUIRE(int(res.predicted.size()) == cfg.N + 1);
  CHECK((res.predicted[0].mu - b0.mu).norm() == 0.0);
}
