"""Quadratic cost functions over chaos coefficients.

The expected value of a quadratic tracking cost in the physical state equals
a deterministic quadratic in the coefficient vector whose weight on slot
(i, j) is the physical weight times ``E[phi_j^2]``.  The probability-
normalized second moments are used here (``E[phi_0^2] = 1`` for every
family), which keeps that identity exact for Legendre dimensions as well;
per-coefficient weights generalize the same block-diagonal structure so mean
error and variance can be penalized independently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .gpc import PolynomialBasis

__all__ = [
    "QuadraticGpcCost",
    "CostDerivatives",
    "build_expected_quadratic",
    "build_weighted",
    "momentum_weighted",
    "embed_goal",
]


@dataclass
class QuadraticGpcCost:
    """Block-diagonal quadratic cost over a flattened coefficient state.

    Running cost ``(1/2)[(x - goal)' S (x - goal) + u' R u] dt`` accumulated
    with the left-rectangle rule, terminal cost
    ``(1/2)(x - goal)' S_f (x - goal)``.  Goals carry values only on the
    zero-index slots.
    """

    s_running: np.ndarray  # (ns, ns)
    r_control: np.ndarray  # (m, m)
    s_terminal: np.ndarray  # (ns, ns)
    goal: np.ndarray  # (ns,)
    dt: float
    goal_trajectory: Optional[np.ndarray] = None  # (K_f + 1, ns) override

    def __post_init__(self):
        self.s_running = np.asarray(self.s_running, dtype=float)
        self.r_control = np.asarray(self.r_control, dtype=float)
        self.s_terminal = np.asarray(self.s_terminal, dtype=float)
        self.goal = np.asarray(self.goal, dtype=float)
        for name, mat in (("S", self.s_running), ("S_f", self.s_terminal)):
            if not np.allclose(mat, mat.T):
                raise ValueError(f"{name} must be symmetric")
            if np.any(np.linalg.eigvalsh(mat) < -1e-12):
                raise ValueError(f"{name} must be positive semi-definite")
        if not np.allclose(self.r_control, self.r_control.T) or np.any(
            np.linalg.eigvalsh(self.r_control) <= 0
        ):
            raise ValueError("R must be symmetric positive definite")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def n_state(self) -> int:
        return self.s_running.shape[0]

    @property
    def n_control(self) -> int:
        return self.r_control.shape[0]

    def goal_at(self, k: Optional[int]) -> np.ndarray:
        if self.goal_trajectory is not None and k is not None:
            return self.goal_trajectory[k]
        return self.goal

    def stage(self, x: np.ndarray, u: np.ndarray, k: Optional[int] = None):
        """Running cost value and derivatives at one step."""
        err = x - self.goal_at(k)
        u = np.asarray(u, dtype=float)
        value = 0.5 * self.dt * (err @ self.s_running @ err + u @ self.r_control @ u)
        lx = self.dt * (self.s_running @ err)
        lu = self.dt * (self.r_control @ u)
        lxx = self.dt * self.s_running
        luu = self.dt * self.r_control
        lxu = np.zeros((x.shape[0], u.shape[0]))
        return value, lx, lu, lxx, luu, lxu

    def terminal(self, x: np.ndarray, k: Optional[int] = None):
        """Terminal cost value, gradient, and Hessian."""
        err = x - self.goal_at(k)
        value = 0.5 * err @ self.s_terminal @ err
        return value, self.s_terminal @ err, self.s_terminal


@dataclass
class CostDerivatives:
    """Per-step cost expansion along a trajectory."""

    total: float
    stage_values: np.ndarray
    lx: list
    lu: list
    lxx: list
    luu: list
    lxu: list
    terminal_value: float
    fx: np.ndarray
    fxx: np.ndarray


def evaluate(cost: QuadraticGpcCost, xs: Sequence[np.ndarray], us: Sequence[np.ndarray]) -> CostDerivatives:
    """Total cost plus gradients/Hessians along a state/control trajectory."""
    if len(xs) != len(us) + 1:
        raise ValueError("state trajectory must be one longer than the control trajectory")
    values, lxs, lus, lxxs, luus, lxus = [], [], [], [], [], []
    for k, (x, u) in enumerate(zip(xs[:-1], us)):
        v, lx, lu, lxx, luu, lxu = cost.stage(np.asarray(x, float), np.asarray(u, float), k)
        values.append(v)
        lxs.append(lx)
        lus.append(lu)
        lxxs.append(lxx)
        luus.append(luu)
        lxus.append(lxu)
    f_val, f_x, f_xx = cost.terminal(np.asarray(xs[-1], float), len(us))
    return CostDerivatives(
        total=float(np.sum(values) + f_val),
        stage_values=np.array(values),
        lx=lxs,
        lu=lus,
        lxx=lxxs,
        luu=luus,
        lxu=lxus,
        terminal_value=float(f_val),
        fx=f_x,
        fxx=f_xx,
    )


def embed_goal(x_goal, basis: PolynomialBasis) -> np.ndarray:
    """Place physical goal values on the zero-index coefficient slots."""
    x_goal = np.asarray(x_goal, dtype=float)
    out = np.zeros((x_goal.shape[0], basis.n_terms))
    out[:, 0] = x_goal
    return out.reshape(-1)


def _check_diagonal(mat: np.ndarray, name: str) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    if mat.ndim == 1:
        mat = np.diag(mat)
    if not np.allclose(mat, np.diag(np.diag(mat))):
        raise ValueError(f"{name} must be diagonal (no cross terms)")
    if np.any(np.diag(mat) < 0):
        raise ValueError(f"{name} must be positive semi-definite")
    return np.diag(mat)


def build_expected_quadratic(
    s,
    s_f,
    r,
    x_goal,
    basis: PolynomialBasis,
    dt: float,
    goal_trajectory=None,
) -> QuadraticGpcCost:
    """Coefficient-space cost equivalent to an expected quadratic cost.

    The weight of every coefficient of state i is the physical diagonal
    weight ``S_ii`` scaled by the second moment of its basis function, which
    splits the expectation into a mean-error term plus variance terms.
    """
    s_diag = _check_diagonal(s, "S")
    sf_diag = _check_diagonal(s_f, "S_f")
    scale = basis.norms_expect
    big_s = np.diag(np.kron(s_diag, scale))
    big_sf = np.diag(np.kron(sf_diag, scale))
    goal = embed_goal(x_goal, basis)
    traj = None
    if goal_trajectory is not None:
        traj = np.stack([embed_goal(g, basis) for g in goal_trajectory])
    return QuadraticGpcCost(big_s, np.atleast_2d(np.asarray(r, float)), big_sf, goal, dt, traj)


def _weighted_diag(weights, basis: PolynomialBasis) -> np.ndarray:
    weights = np.asarray(weights, dtype=float)
    if weights.ndim != 2 or weights.shape[1] != basis.n_terms:
        raise ValueError("per-coefficient weights must have shape (n, K+1)")
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    return (weights * basis.norms_expect[None, :]).reshape(-1)


def build_weighted(
    s_coeff,
    s_f_coeff,
    r,
    x_goal,
    basis: PolynomialBasis,
    dt: float,
    goal_trajectory=None,
) -> QuadraticGpcCost:
    """Cost with independent weights per state and coefficient index.

    Index 0 penalizes expected-value error, higher indices penalize the
    variance contributions of the corresponding modes.
    """
    big_s = np.diag(_weighted_diag(s_coeff, basis))
    big_sf = np.diag(_weighted_diag(s_f_coeff, basis))
    goal = embed_goal(x_goal, basis)
    traj = None
    if goal_trajectory is not None:
        traj = np.stack([embed_goal(g, basis) for g in goal_trajectory])
    return QuadraticGpcCost(big_s, np.atleast_2d(np.asarray(r, float)), big_sf, goal, dt, traj)


def momentum_weighted(
    s_coeff,
    s_f_coeff,
    r,
    x_goal,
    basis: PolynomialBasis,
    dt: float,
    mass_diag,
) -> QuadraticGpcCost:
    """Per-coefficient cost over the variational (Q, Phat) state.

    Velocity weights and goals are mapped through the constant diagonal mass
    matrix: ``v_ij = phat_ij / (mass_i <phi_j, phi_j>)``.  Exact when the
    mass matrix is configuration-independent; otherwise ``mass_diag`` should
    hold the mass at the goal configuration.
    """
    s_coeff = np.asarray(s_coeff, dtype=float)
    s_f_coeff = np.asarray(s_f_coeff, dtype=float)
    x_goal = np.asarray(x_goal, dtype=float)
    mass_diag = np.asarray(mass_diag, dtype=float)
    n = s_coeff.shape[0]
    if n % 2 != 0:
        raise ValueError("state weights must cover positions then velocities")
    n_cfg = n // 2
    if mass_diag.shape != (n_cfg,):
        raise ValueError("mass_diag must have one entry per configuration coordinate")

    phat_scale = mass_diag[:, None] * basis.norms[None, :]  # (N, K+1)

    def to_del(weights):
        pos = (weights[:n_cfg] * basis.norms_expect[None, :]).reshape(-1)
        vel = (weights[n_cfg:] * basis.norms_expect[None, :] / phat_scale**2).reshape(-1)
        return np.concatenate([pos, vel])

    if np.any(s_coeff < 0) or np.any(s_f_coeff < 0):
        raise ValueError("weights must be nonnegative")
    big_s = np.diag(to_del(s_coeff))
    big_sf = np.diag(to_del(s_f_coeff))
    goal_q = embed_goal(x_goal[:n_cfg], basis)
    goal_p = embed_goal(x_goal[n_cfg:] * mass_diag * basis.norms[0], basis)
    goal = np.concatenate([goal_q, goal_p])
    return QuadraticGpcCost(big_s, np.atleast_2d(np.asarray(r, float)), big_sf, goal, dt)
