import numpy as np
import pytest

from pctraj import ddp
from pctraj.cost import QuadraticGpcCost, build_weighted, evaluate
from pctraj.ddp import (
    BackwardPassResult,
    SolverSettings,
    backward_pass,
    forward_pass,
    rollout,
    solve,
)
from pctraj.discretize import EulerStepper, StepLinearization
from pctraj.models import duffing


def linear_stepper(a, b, x0):
    ns, m = b.shape

    class LinStepper:
        dt = 1.0
        n_state, n_control = ns, m

        def initial_state(self):
            return np.array(x0, dtype=float)

        def step(self, x, u, t):
            return a @ x + b @ u

        def linearize(self, x, u, t, x_next=None):
            z = np.zeros
            return StepLinearization(
                a.copy(), b.copy(), z((ns, ns, ns)), z((ns, ns, m)),
                z((ns, m, ns)), z((ns, m, m)),
            )

    return LinStepper()


@pytest.fixture(scope="module")
def lq_problem():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((3, 3)) * 0.4 + np.eye(3)
    b = rng.standard_normal((3, 2))
    x0 = np.array([1.0, -0.5, 2.0])
    s_f = np.diag([2.0, 1.0, 3.0])
    r = np.eye(2) * 0.5
    goal = np.array([1.0, 0.0, -1.0])
    cost = QuadraticGpcCost(np.zeros((3, 3)), r, s_f, goal, dt=1.0)
    return linear_stepper(a, b, x0), cost, (a, b, s_f, r, goal)


def riccati_cost(a, b, s_f, r, goal, x0, k_f):
    p, pv, c = s_f, -s_f @ goal, 0.5 * goal @ s_f @ goal
    for _ in range(k_f):
        quu = r + b.T @ p @ b
        qux = b.T @ p @ a
        qu = b.T @ pv
        inv = np.linalg.inv(quu)
        c = c - 0.5 * qu @ inv @ qu
        pv = a.T @ pv - qux.T @ inv @ qu
        p = a.T @ p @ a - qux.T @ inv @ qux
    return 0.5 * x0 @ p @ x0 + pv @ x0 + c


@pytest.fixture(scope="module")
def duffing_problem():
    model = duffing()
    basis = model.basis(3)
    dt, k_f = 0.01, 180
    stepper = EulerStepper(model, basis, dt, quad_level=7)
    k1 = basis.n_terms
    s_f = np.vstack([[400.0] + [300.0] * (k1 - 1), [400.0] + [100.0] * (k1 - 1)])
    cost = build_weighted(
        np.zeros((2, k1)), s_f, [[0.01]], [3.0, 0.0], basis, dt
    )
    return model, basis, stepper, cost, k_f


@pytest.fixture(scope="module")
def duffing_solution(duffing_problem):
    _, _, stepper, cost, k_f = duffing_problem
    return solve(stepper, cost, k_f)


class TestBackwardPass:
    def test_one_step_lq_gains_match_closed_form(self, lq_problem):
        stepper, cost, (a, b, s_f, r, goal) = lq_problem
        x0 = stepper.initial_state()
        us = np.zeros((1, 2))
        xs = rollout(stepper, x0, us)
        cd = evaluate(cost, xs, us)
        bp = backward_pass([stepper.linearize(xs[0], us[0], 0.0)], cd)
        quu = r + b.T @ s_f @ b
        ell = -np.linalg.solve(quu, b.T @ s_f @ (a @ x0 - goal))
        sigma = -np.linalg.solve(quu, b.T @ s_f @ a)
        np.testing.assert_allclose(bp.feedforward[0], ell, atol=1e-12)
        np.testing.assert_allclose(bp.feedback[0], sigma, atol=1e-12)

    def test_boundary_equals_terminal_cost(self, lq_problem):
        stepper, cost, _ = lq_problem
        us = np.zeros((2, 2))
        xs = rollout(stepper, stepper.initial_state(), us)
        cd = evaluate(cost, xs, us)
        lins = [stepper.linearize(xs[k], us[k], 0.0) for k in range(2)]
        bp = backward_pass(lins, cd)
        values = bp.value_expansions(1.0)
        f_val, f_x, f_xx = cost.terminal(np.asarray(xs[-1]))
        assert values[-1].v == pytest.approx(f_val)
        np.testing.assert_allclose(values[-1].vx, f_x)
        np.testing.assert_allclose(values[-1].vxx, f_xx)

    def test_zero_gradient_gives_zero_feedforward(self, lq_problem):
        stepper, cost, _ = lq_problem
        # sit exactly on the goal with a permissive dynamics fixed point
        a = np.eye(3)
        b = np.zeros((3, 2))
        fixed = linear_stepper(a, b, cost.goal)
        us = np.zeros((2, 2))
        xs = rollout(fixed, cost.goal, us)
        cd = evaluate(cost, xs, us)
        lins = [fixed.linearize(xs[k], us[k], 0.0) for k in range(2)]
        bp = backward_pass(lins, cd)
        for ell in bp.feedforward:
            np.testing.assert_allclose(ell, 0.0, atol=1e-12)
        np.testing.assert_allclose(bp.vx[0], 0.0, atol=1e-12)

    def test_zero_tensors_change_nothing_on_linear_systems(self, lq_problem):
        stepper, cost, _ = lq_problem
        us = np.zeros((2, 2))
        xs = rollout(stepper, stepper.initial_state(), us)
        cd = evaluate(cost, xs, us)
        lins = [stepper.linearize(xs[k], us[k], 0.0) for k in range(2)]
        bp_full = backward_pass(lins, cd)
        for lin in lins:
            lin.fxx = lin.fxx * 0.0
            lin.fxu = lin.fxu * 0.0
            lin.fux = lin.fux * 0.0
            lin.fuu = lin.fuu * 0.0
        bp_zero = backward_pass(lins, cd)
        np.testing.assert_allclose(bp_full.feedforward[0], bp_zero.feedforward[0])
        np.testing.assert_allclose(bp_full.feedback[0], bp_zero.feedback[0])

    def test_q_expansion_symmetry_and_definiteness(self, duffing_problem, duffing_solution):
        _, _, stepper, cost, k_f = duffing_problem
        sol = duffing_solution
        xs, us = sol.states, sol.controls
        lins = [stepper.linearize(xs[k], us[k], k * stepper.dt) for k in range(k_f)]
        cd = evaluate(cost, xs, us)
        bp = backward_pass(lins, cd, theta=0.0)
        for q in bp.q_expansions[:: k_f // 7]:
            np.testing.assert_allclose(q.qxu, q.qux.T, atol=1e-10)
            assert np.linalg.eigvalsh(q.quu)[0] > 0


class TestForwardPass:
    def test_gamma_zero_limit_reproduces_nominal(self, lq_problem):
        stepper, cost, _ = lq_problem
        us = np.full((3, 2), 0.3)
        xs = rollout(stepper, stepper.initial_state(), us)
        nominal_cost = evaluate(cost, xs, us).total
        zero_ff = [np.zeros(2)] * 3
        zero_fb = [np.zeros((2, 3))] * 3
        out = forward_pass(stepper, cost, xs, us, zero_ff, zero_fb, 2.0**-16)
        assert out is not None
        np.testing.assert_allclose(out[1], us, atol=1e-12)
        assert out[2] == pytest.approx(nominal_cost)

    def test_invalid_gamma(self, lq_problem):
        stepper, cost, _ = lq_problem
        with pytest.raises(ValueError):
            forward_pass(stepper, cost, [np.zeros(3)], np.zeros((0, 2)), [], [], 0.0)

    def test_blowup_rejected_not_fatal(self, lq_problem):
        _, cost, _ = lq_problem

        class Exploding:
            dt = 1.0
            n_state, n_control = 3, 2

            def initial_state(self):
                return np.ones(3)

            def step(self, x, u, t):
                return x * 1e7

            def linearize(self, x, u, t, x_next=None):
                raise AssertionError("not needed")

        xs = [np.ones(3), np.ones(3) * 1e7, np.ones(3) * 1e14]
        us = np.zeros((2, 2))
        out = forward_pass(
            Exploding(), cost, xs, us, [np.zeros(2)] * 2, [np.zeros((2, 3))] * 2, 1.0
        )
        assert out is None


class TestSolve:
    def test_lq_converges_in_one_iteration(self, lq_problem):
        stepper, cost, (a, b, s_f, r, goal) = lq_problem
        sol = solve(stepper, cost, k_f=2)
        assert sol.iterations == 1
        assert sol.termination == "converged"
        expected = riccati_cost(a, b, s_f, r, goal, stepper.initial_state(), 2)
        assert sol.cost_history[-1] == pytest.approx(expected, abs=1e-8)

    def test_requires_minimum_horizon(self, lq_problem):
        stepper, cost, _ = lq_problem
        with pytest.raises(ValueError):
            solve(stepper, cost, k_f=1)

    def test_duffing_benchmark_terminal_mean(self, duffing_problem, duffing_solution):
        _, basis, stepper, _, _ = duffing_problem
        sol = duffing_solution
        assert sol.termination == "converged"
        from pctraj.gpc import moment

        coeffs = stepper.state_coefficients(np.asarray(sol.states[-1]))
        mean = np.array([moment(coeffs, i, 1, basis) for i in range(2)])
        assert np.max(np.abs(mean - np.array([3.0, 0.0]))) < 0.05

    def test_cost_history_strictly_decreasing(self, duffing_solution):
        costs = duffing_solution.cost_history
        assert np.all(np.diff(costs) < 0)

    def test_stationarity_at_termination(self, duffing_solution):
        assert duffing_solution.gradient_norms[-1] < 1e-6

    def test_control_distances_end_at_zero(self, duffing_solution):
        assert duffing_solution.control_distances[-1] == 0.0
        assert len(duffing_solution.control_distances) == len(duffing_solution.cost_history)

    def test_improvement_formula_at_small_gamma(self, duffing_problem, duffing_solution):
        model, basis, stepper, cost, k_f = duffing_problem
        sol = duffing_solution
        checked = False
        for us in sol.control_iterates:
            xs = rollout(stepper, stepper.initial_state(), us)
            cd = evaluate(cost, xs, us)
            lins = [stepper.linearize(xs[k], us[k], k * stepper.dt) for k in range(k_f)]
            try:
                bp = backward_pass(lins, cd, theta=0.0, clamp_value_curvature=False)
            except ddp.QuuIndefiniteError:
                continue
            if bp.expected_reduction < 1e-2:
                continue
            gamma = 1e-3
            out = forward_pass(stepper, cost, xs, us, bp.feedforward, bp.feedback, gamma)
            measured = out[2] - cd.total
            predicted = (-gamma + 0.5 * gamma**2) * bp.expected_reduction
            assert measured == pytest.approx(predicted, rel=0.05)
            checked = True
            break
        assert checked, "no iterate with a clean unshifted backward pass"

    def test_integrator_agnostic_to_linearization_source(self):
        # analytic linearization of the Euler step vs finite differences of
        # the same step map must land on the same controls
        model = duffing()
        basis = model.basis(1)
        dt, k_f = 0.02, 25
        stepper = EulerStepper(model, basis, dt, quad_level=5)
        k1 = basis.n_terms
        s_f = np.vstack([[400.0] + [300.0] * (k1 - 1), [400.0] + [100.0] * (k1 - 1)])
        cost = build_weighted(np.zeros((2, k1)), s_f, [[0.01]], [3.0, 0.0], basis, dt)

        class FdStepper:
            dt = stepper.dt
            n_state, n_control = stepper.n_state, stepper.n_control

            def initial_state(self):
                return stepper.initial_state()

            def step(self, x, u, t):
                return stepper.step(x, u, t)

            def linearize(self, x, u, t, x_next=None):
                ns, m = self.n_state, self.n_control
                eps = 1e-5

                def stepxu(z):
                    return stepper.step(z[:ns], z[ns:], t)

                z0 = np.concatenate([x, u])
                jac = np.zeros((ns, ns + m))
                for i in range(ns + m):
                    d = np.zeros(ns + m)
                    d[i] = eps
                    jac[:, i] = (stepxu(z0 + d) - stepxu(z0 - d)) / (2 * eps)
                hess = np.zeros((ns, ns + m, ns + m))
                eps2 = 1e-4
                for i in range(ns + m):
                    di = np.zeros(ns + m)
                    di[i] = eps2
                    jp = np.zeros((ns, ns + m))
                    jm = np.zeros((ns, ns + m))
                    for j in range(ns + m):
                        dj = np.zeros(ns + m)
                        dj[j] = eps2
                        jp[:, j] = (stepxu(z0 + di + dj) - stepxu(z0 + di - dj)) / (2 * eps2)
                        jm[:, j] = (stepxu(z0 - di + dj) - stepxu(z0 - di - dj)) / (2 * eps2)
                    hess[:, :, i] = (jp - jm) / (2 * eps2)
                return StepLinearization(
                    fx=jac[:, :ns],
                    fu=jac[:, ns:],
                    fxx=hess[:, :ns, :ns],
                    fxu=hess[:, :ns, ns:],
                    fux=hess[:, ns:, :ns],
                    fuu=hess[:, ns:, ns:],
                )

        sol_analytic = solve(stepper, cost, k_f)
        sol_fd = solve(FdStepper(), cost, k_f)
        assert sol_analytic.termination == "converged"
        assert sol_fd.termination == "converged"
        assert np.max(np.abs(sol_analytic.controls - sol_fd.controls)) < 1e-6


class TestValueExpansions:
    def test_gamma_scaling_consistency(self, lq_problem):
        stepper, cost, _ = lq_problem
        us = np.zeros((2, 2))
        xs = rollout(stepper, stepper.initial_state(), us)
        cd = evaluate(cost, xs, us)
        lins = [stepper.linearize(xs[k], us[k], 0.0) for k in range(2)]
        bp = backward_pass(lins, cd)
        # the value at the initial time for gamma=1 predicts the new cost to
        # second order: J_old + (gamma^2/2 - gamma) * expected reduction
        v0 = bp.value_expansions(1.0)[0].v
        assert v0 == pytest.approx(cd.total - 0.5 * bp.expected_reduction, rel=1e-10)
        v0_small = bp.value_expansions(0.0)[0].v
        assert v0_small == pytest.approx(cd.total, rel=1e-12)
