"""Differential dynamic programming over chaos-coefficient dynamics.

The solver iterates: linearize the step map along the nominal trajectory
(first and second order), run the backward value recursion to obtain
feedforward/feedback gains, then roll the closed-loop update forward with a
halving line search until the cost decreases.  An adaptive shift keeps the
control Hessian positive definite.  The stepper abstraction makes the solver
agnostic to how the state advances (explicit Euler or the variational
integrator).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .cost import CostDerivatives, QuadraticGpcCost, evaluate
from .discretize import DelSolveError, StepLinearization
from .gpc import NonFiniteDynamicsError
from .models import GimbalLockError

__all__ = [
    "QExpansion",
    "ValueExpansion",
    "BackwardPassResult",
    "SolverSettings",
    "DdpSolution",
    "QuuIndefiniteError",
    "backward_pass",
    "forward_pass",
    "rollout",
    "solve",
]

_ROLLOUT_ERRORS = (NonFiniteDynamicsError, GimbalLockError, DelSolveError, FloatingPointError)


@dataclass
class QExpansion:
    """Quadratic model of the one-step cost-to-go about the nominal point."""

    q0: float
    qx: np.ndarray
    qu: np.ndarray
    qxx: np.ndarray
    quu: np.ndarray
    qux: np.ndarray
    qxu: np.ndarray


@dataclass
class ValueExpansion:
    """Quadratic model of the value function at one time step."""

    v: float
    vx: np.ndarray
    vxx: np.ndarray


class QuuIndefiniteError(RuntimeError):
    """Control Hessian not positive definite after the current shift."""


@dataclass
class BackwardPassResult:
    feedforward: list  # ell_k, (m,)
    feedback: list  # Sigma_k, (m, ns)
    q_expansions: list  # QExpansion per step
    vx: list  # (ns,), length K_f + 1
    vxx: list
    q0: np.ndarray  # zero-order Q terms per step
    qu_dot_ell: np.ndarray  # (Q_u' ell) per step; scales the value updates
    terminal_value: float
    expected_reduction: float  # sum_k Q_u' Quu^{-1} Q_u
    max_qu: float  # max_k ||Q_u||_inf
    theta: float

    def value_expansions(self, gamma: float) -> list:
        """Value sequence using the line-search parameter actually accepted.

        The stored zero-order terms propagate the plain cost-to-go; the
        gamma-scaled corrections of all later steps are added back here.
        """
        k_f = len(self.q0)
        tail = np.concatenate([np.cumsum(self.qu_dot_ell[::-1])[::-1], [0.0]])
        values = np.concatenate([self.q0, [self.terminal_value]])
        values = values + (gamma - 0.5 * gamma**2) * tail
        return [
            ValueExpansion(float(values[k]), self.vx[k], self.vxx[k])
            for k in range(k_f + 1)
        ]


def backward_pass(
    linearizations: Sequence[StepLinearization],
    cost_derivs: CostDerivatives,
    theta: float = 0.0,
    theta_floor: float = 1e-6,
    clamp_value_curvature: bool = False,
) -> BackwardPassResult:
    """Backward value recursion with tensor terms and control-Hessian shift.

    Whenever the control Hessian's smallest eigenvalue is at or below
    ``theta_floor`` it is shifted up by ``theta`` plus the local deficit, so
    gains always come from a positive definite matrix; the shifted Hessian is
    used consistently in the value recursion.

    With ``clamp_value_curvature`` the value Hessian is projected onto the
    positive semidefinite cone each step.  Negative value curvature (injected
    by the second-order dynamics terms far from an optimum) otherwise feeds
    back on itself through the gain computation and can grow without bound on
    strongly nonlinear problems.  The projection buys that containment at the
    price of the exact second-order model, so it is off by default and meant
    for problems whose unclamped recursion diverges.
    """
    k_f = len(linearizations)
    vx = cost_derivs.fx
    vxx = cost_derivs.fxx
    vx_list = [None] * (k_f + 1)
    vxx_list = [None] * (k_f + 1)
    vx_list[k_f] = vx
    vxx_list[k_f] = vxx

    ells, sigmas, q_exps = [], [], []
    q0s = np.empty(k_f)
    qu_ells = np.empty(k_f)
    expected = 0.0
    max_qu = 0.0
    v_next_scalar = cost_derivs.terminal_value

    for k in range(k_f - 1, -1, -1):
        lin = linearizations[k]
        lx = cost_derivs.lx[k]
        lu = cost_derivs.lu[k]
        lxx = cost_derivs.lxx[k]
        luu = cost_derivs.luu[k]
        lxu = cost_derivs.lxu[k]

        fx_t_vx = lin.fx.T @ vx
        q0 = float(cost_derivs.stage_values[k] + v_next_scalar)
        qx = lx + fx_t_vx
        qu = lu + lin.fu.T @ vx
        qxx = lxx + lin.fx.T @ vxx @ lin.fx + np.einsum("o,oab->ab", vx, lin.fxx)
        qxu = lxu + lin.fx.T @ vxx @ lin.fu + np.einsum("o,oac->ac", vx, lin.fxu)
        qux = lxu.T + lin.fu.T @ vxx @ lin.fx + np.einsum("o,oca->ca", vx, lin.fux)
        quu = luu + lin.fu.T @ vxx @ lin.fu + np.einsum("o,ocd->cd", vx, lin.fuu)

        qxx = 0.5 * (qxx + qxx.T)
        quu = 0.5 * (quu + quu.T)
        qxu = 0.5 * (qxu + qux.T)
        qux = qxu.T

        quu_shifted = quu
        if not (np.all(np.isfinite(quu)) and np.all(np.isfinite(vxx)) and np.all(np.isfinite(vx))):
            raise QuuIndefiniteError(f"value recursion lost finiteness at step {k}")
        if max(np.max(np.abs(vxx)), np.max(np.abs(quu))) > 1e40:
            raise QuuIndefiniteError(f"value recursion magnitude diverged at step {k}")
        min_eig = float(np.linalg.eigvalsh(quu)[0])
        if min_eig <= theta_floor or theta > 0.0:
            # Shift by the global parameter plus whatever this step needs to
            # clear the floor: the deficit part keeps gains solvable locally,
            # the global part lets the caller damp the whole pass after line
            # search failures.
            shift = theta + max(0.0, theta_floor - min_eig)
            quu_shifted = quu + shift * np.eye(quu.shape[0])
        try:
            ell = -np.linalg.solve(quu_shifted, qu)
            sigma = -np.linalg.solve(quu_shifted, qux)
        except np.linalg.LinAlgError as exc:
            raise QuuIndefiniteError(f"shifted control Hessian singular at step {k}") from exc

        # The shifted Hessian is used consistently in the recursion as well:
        # with raw Quu here, growing the shift drives earlier Vxx (and hence
        # earlier Quu) more indefinite instead of stabilizing the pass.
        vx = qx + sigma.T @ quu_shifted @ ell + sigma.T @ qu + qxu @ ell
        vxx = qxx + sigma.T @ quu_shifted @ sigma + sigma.T @ qux + qxu @ sigma
        vxx = 0.5 * (vxx + vxx.T)
        if clamp_value_curvature:
            eigvals, eigvecs = np.linalg.eigh(vxx)
            if eigvals[0] < 0.0:
                vxx = (eigvecs * np.maximum(eigvals, 0.0)) @ eigvecs.T
                vxx = 0.5 * (vxx + vxx.T)
        v_next_scalar = q0 + 0.0  # scalar update applied per-gamma afterwards

        vx_list[k] = vx
        vxx_list[k] = vxx
        ells.append(ell)
        sigmas.append(sigma)
        q_exps.append(QExpansion(q0, qx, qu, qxx, quu_shifted, qux, qxu))
        q0s[k] = q0
        qu_ells[k] = float(qu @ ell)
        expected += float(qu @ np.linalg.solve(quu_shifted, qu))
        max_qu = max(max_qu, float(np.max(np.abs(qu))))

    ells.reverse()
    sigmas.reverse()
    q_exps.reverse()
    return BackwardPassResult(
        feedforward=ells,
        feedback=sigmas,
        q_expansions=q_exps,
        vx=vx_list,
        vxx=vxx_list,
        q0=q0s,
        qu_dot_ell=qu_ells,
        terminal_value=cost_derivs.terminal_value,
        expected_reduction=expected,
        max_qu=max_qu,
        theta=theta,
    )


def rollout(stepper, x0: np.ndarray, us: np.ndarray) -> list:
    """Open-loop propagation; raises if the trajectory leaves the domain."""
    xs = [np.asarray(x0, dtype=float)]
    for k, u in enumerate(us):
        xs.append(stepper.step(xs[-1], u, k * stepper.dt))
    return xs


def forward_pass(
    stepper,
    cost: QuadraticGpcCost,
    xs_bar: Sequence[np.ndarray],
    us_bar: np.ndarray,
    feedforward: Sequence[np.ndarray],
    feedback: Sequence[np.ndarray],
    gamma: float,
):
    """Closed-loop rollout ``u = u_bar + gamma ell + Sigma (x - x_bar)``.

    Returns ``(xs, us, J)`` or ``None`` when the rollout blows up (treated as
    a rejected candidate, not an error).
    """
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    x = np.array(xs_bar[0])
    xs = [x]
    us = []
    for k in range(len(us_bar)):
        u = us_bar[k] + gamma * feedforward[k] + feedback[k] @ (x - xs_bar[k])
        try:
            x = stepper.step(x, u, k * stepper.dt)
        except _ROLLOUT_ERRORS:
            return None
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > 1e12:
            return None
        xs.append(x)
        us.append(u)
    us = np.array(us)
    total = evaluate(cost, xs, us).total
    if not np.isfinite(total):
        return None
    return xs, us, total


@dataclass(frozen=True)
class SolverSettings:
    max_iterations: int = 200
    cost_tolerance: float = 1e-9
    gradient_tolerance: float = 1e-6
    theta_initial: float = 0.0
    theta_escalation_floor: float = 1e-6
    theta_max: float = 1e8
    theta_eig_floor: float = 1e-6
    min_gamma_exponent: int = 16  # line search down to 2**-16
    clamp_value_curvature: bool = False


@dataclass
class DdpSolution:
    """Converged (or best-so-far) solver output with iteration history."""

    states: list
    controls: np.ndarray
    feedforward: list
    feedback: list
    value_expansions: list
    cost_history: np.ndarray
    control_distances: np.ndarray
    control_iterates: list
    gammas: np.ndarray
    thetas: np.ndarray
    gradient_norms: np.ndarray
    expected_reductions: np.ndarray
    termination: str
    iterations: int
    wall_time: float


def solve(
    stepper,
    cost: QuadraticGpcCost,
    k_f: int,
    u_init: Optional[np.ndarray] = None,
    settings: SolverSettings = SolverSettings(),
    x0: Optional[np.ndarray] = None,
) -> DdpSolution:
    """Run the full trajectory optimization from a nominal control sequence.

    Args:
        stepper: discretization object exposing ``step``, ``linearize``,
            ``initial_state``, ``dt``, ``n_state``, ``n_control``.
        cost: quadratic coefficient-space cost.
        k_f: number of control steps (horizon).
        u_init: initial nominal controls, defaults to zeros.
        settings: tolerances and shift schedule.
        x0: optional initial state override.

    Returns:
        A :class:`DdpSolution`; ``termination`` is one of ``converged``,
        ``max_iterations``, ``regularization_limit``.
    """
    if k_f < 2:
        raise ValueError("horizon must be at least 2 steps")
    start = time.perf_counter()
    x0 = stepper.initial_state() if x0 is None else np.asarray(x0, dtype=float)
    us = (
        np.zeros((k_f, stepper.n_control))
        if u_init is None
        else np.array(u_init, dtype=float).reshape(k_f, stepper.n_control)
    )
    xs = rollout(stepper, x0, us)
    total = evaluate(cost, xs, us).total

    theta = settings.theta_initial
    costs = [total]
    iterates = [us.copy()]
    gammas: list[float] = []
    thetas: list[float] = []
    grad_norms: list[float] = []
    expected: list[float] = []
    termination = "max_iterations"
    prev_small = False
    bp = None
    accepted_gamma = 1.0

    iteration = 0
    while iteration < settings.max_iterations:
        iteration += 1
        lins = [
            stepper.linearize(xs[k], us[k], k * stepper.dt, x_next=xs[k + 1])
            for k in range(k_f)
        ]
        cd = evaluate(cost, xs, us)

        accepted = None
        while accepted is None:
            try:
                bp = backward_pass(
                    lins, cd, theta, settings.theta_eig_floor,
                    settings.clamp_value_curvature,
                )
            except QuuIndefiniteError:
                theta = max(settings.theta_escalation_floor, 10.0 * theta)
                if theta > settings.theta_max:
                    termination = "regularization_limit"
                    break
                continue
            for gamma in 2.0 ** -np.arange(settings.min_gamma_exponent + 1):
                result = forward_pass(
                    stepper, cost, xs, us, bp.feedforward, bp.feedback, float(gamma)
                )
                if result is not None and result[2] < total:
                    accepted = (float(gamma), result)
                    break
            if accepted is None:
                if bp.max_qu < settings.gradient_tolerance:
                    # No strict decrease available and the control gradient
                    # already vanishes: the nominal is stationary.
                    termination = "converged"
                    break
                theta = max(settings.theta_escalation_floor, 10.0 * theta)
                if theta > settings.theta_max:
                    termination = "regularization_limit"
                    break
        if accepted is None:
            break

        accepted_gamma, (xs, us, new_total) = accepted
        rel_change = abs(total - new_total) / max(1.0, abs(total))
        total = new_total
        costs.append(total)
        iterates.append(us.copy())
        gammas.append(accepted_gamma)
        thetas.append(theta)
        grad_norms.append(bp.max_qu)
        expected.append(bp.expected_reduction)
        theta = theta / 10.0 if theta > 1e-12 else 0.0

        small = rel_change < settings.cost_tolerance
        if small and prev_small and bp.max_qu < settings.gradient_tolerance:
            termination = "converged"
            break
        prev_small = small

    final_us = us
    distances = np.array([np.linalg.norm(u_it - final_us) for u_it in iterates])
    return DdpSolution(
        states=xs,
        controls=us,
        feedforward=bp.feedforward if bp is not None else [],
        feedback=bp.feedback if bp is not None else [],
        value_expansions=bp.value_expansions(accepted_gamma) if bp is not None else [],
        cost_history=np.array(costs),
        control_distances=distances,
        control_iterates=iterates,
        gammas=np.array(gammas),
        thetas=np.array(thetas),
        gradient_norms=np.array(grad_norms),
        expected_reductions=np.array(expected),
        termination=termination,
        iterations=len(gammas),
        wall_time=time.perf_counter() - start,
    )
