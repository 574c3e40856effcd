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

#include "driftcpp/ilqr.hpp"

using namespace driftcpp::ilqr;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

struct LqrProblem {
  MatrixXd A, B, Q, R, Qf;
  int N = 0;
};

// Discrete-time finite-horizon Riccati recursion; the independent oracle for
// the backward pass. Costs are x'Qx + u'Ru (no 1/2 factor), matching the
// stage expansion below.
struct RiccatiResult {
  std::vector<MatrixXd> K;  // N gain matrices, u = -K x
  MatrixXd P0;
};

RiccatiResult riccati(const LqrProblem& p) {
  RiccatiResult out;
  out.K.resize(p.N);
  MatrixXd P = p.Qf;
  for (int i = p.N - 1; i >= 0; --i) {
    const MatrixXd H = p.R + p.B.transpose() * P * p.B;
    out.K[i] = H.ldlt().solve(p.B.transpose() * P * p.A);
    P = p.Q + p.A.transpose() * P * (p.A - p.B * out.K[i]);
    P = 0.5 * (P + P.transpose());
  }
  out.P0 = P;
  return out;
}

OcpDefinition make_lqr_ocp(const LqrProblem& p) {
  OcpDefinition ocp;
  ocp.N = p.N;
  ocp.nx = int(p.A.rows());
  ocp.nu = int(p.B.cols());
  ocp.dynamics = [p](const VectorXd& x, const VectorXd& u, int) {
    return VectorXd(p.A * x + p.B * u);
  };
  ocp.dynamics_jacobians = [p](const VectorXd&, const VectorXd&, int,
                               MatrixXd& A, MatrixXd& B) {
    A = p.A;
    B = p.B;
  };
  ocp.stage_cost = [p](const VectorXd& x, const VectorXd& u, int) {
    return x.dot(p.Q * x) + u.dot(p.R * u);
  };
  ocp.stage_expansion = [p](const VectorXd& x, const VectorXd& u, int) {
    CostExpansion c;
    c.l = x.dot(p.Q * x) + u.dot(p.R * u);
    c.lx = 2.0 * p.Q * x;
    c.lu = 2.0 * p.R * u;
    c.lxx = 2.0 * p.Q;
    c.luu = 2.0 * p.R;
    c.lux = MatrixXd::Zero(p.B.cols(), p.A.rows());
    return c;
  };
  ocp.terminal_cost = [p](const VectorXd& x) { return x.dot(p.Qf * x); };
  ocp.terminal_expansion = [p](const VectorXd& x) {
    TerminalExpansion t;
    t.l = x.dot(p.Qf * x);
    t.lx = 2.0 * p.Qf * x;
    t.lxx = 2.0 * p.Qf;
    return t;
  };
  return ocp;
}

LqrProblem random_lqr(std::mt19937_64& rng, int nx, int nu, int N) {
  std::normal_distribution<double> nd(0.0, 1.0);
  auto randm = [&](int r, int c) {
    MatrixXd M(r, c);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) M(i, j) = nd(rng);
    return M;
  };
  LqrProblem p;
  p.N = N;
  p.A = randm(nx, nx) * 0.5;
  p.B = randm(nx, nu);
  const MatrixXd Mq = randm(nx, nx);
  p.Q = Mq * Mq.transpose() + 0.1 * MatrixXd::Identity(nx, nx);
  const MatrixXd Mr = randm(nu, nu);
  p.R = Mr * Mr.transpose() + 0.1 * MatrixXd::Identity(nu, nu);
  const MatrixXd Mf = randm(nx, nx);
  p.Qf = Mf * Mf.transpose() + 0.1 * MatrixXd::Identity(nx, nx);
  return p;
}

}  // namespace

TEST_CASE("single-step LQR matches the closed form") {
  // N=1: J = x0'Q x0 + u'R u + (Ax0+Bu)'Qf(Ax0+Bu), minimized at
  // u* = -(R + B'Qf B)^-1 B'Qf A x0
  std::mt19937_64 rng(3);
  const LqrProblem p = random_lqr(rng, 3, 2, 1);
  const OcpDefinition ocp = make_lqr_ocp(p);
  const VectorXd x0 = VectorXd::Ones(3);

  const MatrixXd H = p.R + p.B.transpose() * p.Qf * p.B;
  const VectorXd u_star =
      -H.ldlt().solve(p.B.transpose() * p.Qf * p.A * x0);

  IlqrConfig cfg;
  cfg.reg_init = 1e-10;
  const IlqrSolution sol =
      solve(ocp, x0, {VectorXd::Zero(2)}, cfg);
  CHECK(sol.converged);
  CHECK((sol.controls[0] - u_star).norm() < 1e-8);
}

TEST_CASE("LQR cost and gains match the Riccati oracle") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const LqrProblem p = random_lqr(rng, 3, 2, 20);
    const OcpDefinition ocp = make_lqr_ocp(p);
    VectorXd x0(3);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (int i = 0; i < 3; ++i) x0[i] = nd(rng);

    const RiccatiResult ric = riccati(p);
    const double J_star = x0.dot(ric.P0 * x0);

    IlqrConfig cfg;
    cfg.reg_init = 1e-10;
    const IlqrSolution sol =
        solve(ocp, x0, std::vector<VectorXd>(20, VectorXd::Zero(2)), cfg);
    CHECK(sol.converged);
    CHECK(std::abs(sol.cost - J_star) / std::max(1.0, J_star) < 1e-6);

    // feedback gains agree with -K from the Riccati sweep
    for (int i = 0; i < p.N; ++i)
      CHECK((sol.gains[i].K + ric.K[i]).norm() /
                std::max(1.0, ric.K[i].norm()) <
            1e-5);
  }
}

TEST_CASE("stationary start converges immediately") {
  std::mt19937_64 rng(11);
  const LqrProblem p = random_lqr(rng, 3, 2, 10);
  const OcpDefinition ocp = make_lqr_ocp(p);
  const IlqrSolution sol =
      solve(ocp, VectorXd::Zero(3), std::vector<VectorXd>(10, VectorXd::Zero(2)));
  CHECK(sol.converged);
  CHECK(sol.cost == 0.0);
  CHECK(sol.iterations == 0);
}

TEST_CASE("accepted iterations decrease the cost monotonically") {
  // nonlinear problem: pendulum-like dynamics with quadratic cost
  const int N = 30;
  OcpDefinition ocp;
  ocp.N = N;
  ocp.nx = 2;
  ocp.nu = 1;
  const double dt = 0.05;
  ocp.dynamics = [dt](const VectorXd& x, const VectorXd& u, int) {
    VectorXd xn(2);
    xn[0] = x[0] + dt * x[1];
    xn[1] = x[1] + dt * (std::sin(x[0]) + u[0]);
    return xn;
  };
  ocp.dynamics_jacobians = [dt](const VectorXd& x, const VectorXd&, int,
                                MatrixXd& A, MatrixXd& B) {
    A.setIdentity(2, 2);
    A(0, 1) = dt;
    A(1, 0) = dt * std::cos(x[0]);
    B.setZero(2, 1);
    B(1, 0) = dt;
  };
  ocp.stage_cost = [](const VectorXd& x, const VectorXd& u, int) {
    return x.squaredNorm() + 0.1 * u.squaredNorm();
  };
  ocp.stage_expansion = [](const VectorXd& x, const VectorXd& u, int) {
    CostExpansion c;
    c.l = x.squaredNorm() + 0.1 * u.squaredNorm();
    c.lx = 2.0 * x;
    c.lu = 0.2 * u;
    c.lxx = 2.0 * MatrixXd::Identity(2, 2);
    c.luu = 0.2 * MatrixXd::Identity(1, 1);
    c.lux = MatrixXd::Zero(1, 2);
    return c;
  };
  ocp.terminal_cost = [](const VectorXd& x) { return 10.0 * x.squaredNorm(); };
  ocp.terminal_expansion = [](const VectorXd& x) {
    TerminalExpansion t;
    t.l = 10.0 * x.squaredNorm();
    t.lx = 20.0 * x;
    t.lxx = 20.0 * MatrixXd::Identity(2, 2);
    return t;
  };

  VectorXd x0(2);
  x0 << 2.0, 0.0;
  std::vector<VectorXd> u0(N, VectorXd::Zero(1));
  const Trajectory init = rollout(x0, u0, ocp);

  // track the accepted cost across restarts of solve with growing budgets
  double prev = init.cost;
  for (int iters = 1; iters <= 40; iters += 3) {
    IlqrConfig cfg;
    cfg.max_iters = iters;
    const IlqrSolution sol = solve(ocp, x0, u0, cfg);
    CHECK(sol.cost <= prev + 1e-9);
    prev = sol.cost;
  }

  IlqrConfig cfg;
  cfg.max_iters = 200;
  const IlqrSolution sol = solve(ocp, x0, u0, cfg);
  CHECK(sol.converged);
  // gradient check at the solution: the open-loop controls are stationary
  const BackwardPassResult bp =
      backward_pass(Trajectory{sol.states, sol.controls, sol.cost}, ocp, 0.0);
  REQUIRE(bp.ok);
  CHECK(std::abs(bp.dV1) < 1e-4);
}

TEST_CASE("solve validates the initial control length") {
  std::mt19937_64 rng(13);
  const LqrProblem p = random_lqr(rng, 3, 2, 5);
  const OcpDefinition ocp = make_lqr_ocp(p);
  CHECK_THROWS_AS(
      solve(ocp, VectorXd::Zero(3), std::vector<VectorXd>(4, VectorXd::Zero(2))),
      std::invalid_argument);
}
