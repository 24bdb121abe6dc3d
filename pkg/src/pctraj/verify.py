"""Independent verification oracles.

Monte-Carlo propagation of the physical system (counter-based RNG, fine-grid
RK4 reference by default), finite-difference derivative checks with a step
sweep, batched classical variational stepping for per-sample references, and
empirical convergence-rate fitting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .gpc import PolynomialBasis, sample_inputs
from .models import MechanicalModel, StochasticModel

__all__ = [
    "McEstimate",
    "FdReport",
    "mc_propagate",
    "fd_jacobian",
    "fd_hessian",
    "fd_check",
    "second_difference_directional",
    "convergence_rate",
]


@dataclass
class McEstimate:
    """Sampled moment trajectories with asymptotic standard errors."""

    times: np.ndarray  # (K_f + 1,)
    mean: np.ndarray  # (K_f + 1, n)
    variance: np.ndarray
    third_central: np.ndarray
    se_mean: np.ndarray
    se_variance: np.ndarray
    se_third: np.ndarray
    n_samples: int
    n_failed: int
    seed: int

    def sigma_band(self, width: float = 3.0):
        """(lower, upper) mean +/- width * std bands."""
        std = np.sqrt(np.maximum(self.variance, 0.0))
        return self.mean - width * std, self.mean + width * std


def _central_moments(states: np.ndarray, max_order: int = 6):
    mean = states.mean(axis=0)
    centered = states - mean
    moments = []
    power = centered
    for _ in range(2, max_order + 1):
        power = power * centered
        moments.append(power.mean(axis=0))
    return mean, moments


def _rk4_step(f, x, u, t, dt):
    k1 = f(x, u, t)
    k2 = f(x + 0.5 * dt * k1, u, t + 0.5 * dt)
    k3 = f(x + 0.5 * dt * k2, u, t + 0.5 * dt)
    k4 = f(x + dt * k3, u, t + dt)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def mc_propagate(
    model: StochasticModel,
    u_traj: np.ndarray,
    dt: float,
    k_f: int,
    n_samples: int,
    seed: int,
    integrator: str = "rk4",
    substeps: int = 10,
    basis: Optional[PolynomialBasis] = None,
    max_failure_fraction: float = 0.01,
) -> McEstimate:
    """Sample (parameters, initial state) and integrate the physical system.

    Controls are zero-order-held over the coarse grid; RK4 and Euler refine
    each interval with ``substeps`` sub-intervals so discretization error is
    dominated by sampling.  Blown-up samples are excluded and counted; more
    than ``max_failure_fraction`` of them is an error.
    """
    if n_samples < 2:
        raise ValueError("need at least two samples")
    u_traj = np.zeros((k_f, model.m)) if u_traj is None else np.asarray(u_traj, dtype=float)
    if u_traj.shape[0] != k_f:
        raise ValueError("control trajectory length must equal the horizon")
    if basis is None:
        basis = PolynomialBasis(model.param_dists, model.init_dists, 1)
    rng = np.random.Generator(np.random.Philox(key=seed))
    _, lam, x = sample_inputs(basis, n_samples, rng)

    times = dt * np.arange(k_f + 1)
    n = model.n
    mean = np.empty((k_f + 1, n))
    var = np.empty((k_f + 1, n))
    third = np.empty((k_f + 1, n))
    se_mean = np.empty((k_f + 1, n))
    se_var = np.empty((k_f + 1, n))
    se_third = np.empty((k_f + 1, n))
    alive = np.ones(n_samples, dtype=bool)

    if integrator == "del":
        stepper_state = _DelSampler(model, x, lam, dt)

    def record(k, states):
        m1, (m2, m3, m4, m5, m6) = _central_moments(states)
        n_live = states.shape[0]
        mean[k] = m1
        var[k] = m2
        third[k] = m3
        se_mean[k] = np.sqrt(np.maximum(m2, 0.0) / n_live)
        se_var[k] = np.sqrt(np.maximum(m4 - m2**2, 0.0) / n_live)
        se_third[k] = np.sqrt(np.maximum(m6 - m3**2 - 6 * m2 * m4 + 9 * m2**3, 0.0) / n_live)

    record(0, x)
    fine = dt / substeps
    all_alive = True
    for k in range(k_f):
        u = u_traj[k]
        # Fast path: no fancy indexing until a sample has actually diverged.
        cur = x if all_alive else x[alive]
        lam_cur = lam if all_alive else lam[alive]
        if integrator == "rk4":
            for s in range(substeps):
                cur = _rk4_step(
                    lambda xx, uu, tt: model.f(xx, uu, tt, lam_cur),
                    cur, u, times[k] + s * fine, fine,
                )
        elif integrator == "euler":
            for s in range(substeps):
                cur = cur + fine * model.f(cur, u, times[k] + s * fine, lam_cur)
        elif integrator == "del":
            x = stepper_state.step(u, alive)
            cur = x if all_alive else x[alive]
        else:
            raise ValueError(f"unknown integrator {integrator!r}")
        if integrator != "del":
            if all_alive:
                x = cur
            else:
                x[alive] = cur
        finite = np.all(np.isfinite(x), axis=1)
        bad = alive & ~finite
        if np.any(bad):
            alive = alive & ~bad
            x[~alive] = 0.0
            all_alive = False
        record(k + 1, x[alive] if not all_alive else x)
    n_failed = int(n_samples - alive.sum())
    if n_failed > max_failure_fraction * n_samples:
        raise RuntimeError(
            f"{n_failed} of {n_samples} samples diverged during propagation"
        )
    return McEstimate(
        times=times,
        mean=mean,
        variance=var,
        third_central=third,
        se_mean=se_mean,
        se_variance=se_var,
        se_third=se_third,
        n_samples=n_samples,
        n_failed=n_failed,
        seed=seed,
    )


class _DelSampler:
    """Per-sample classical variational stepping of a mechanical model."""

    def __init__(self, model: StochasticModel, x: np.ndarray, lam: np.ndarray, dt: float):
        if model.mechanical is None:
            raise ValueError("variational sampling requires a mechanical model")
        self.mech: MechanicalModel = model.mechanical
        self.dt = dt
        self.lam = lam
        n_cfg = self.mech.n_config
        self.q = x[:, :n_cfg].copy()
        v = x[:, n_cfg:].copy()
        self.p = np.asarray(self.mech.lagrangian_grad(self.q, v, lam))[:, n_cfg:]
        self.x = x

    def step(self, u, alive: np.ndarray) -> np.ndarray:
        mech, dt, lam = self.mech, self.dt, self.lam
        n_cfg = mech.n_config
        q, p = self.q, self.p
        q1 = q.copy()
        for _ in range(50):
            mid = 0.5 * (q + q1)
            v = (q1 - q) / dt
            zeta_pt = 0.5 * (q + q1)
            g = np.asarray(mech.lagrangian_grad(zeta_pt, v, lam))
            d1 = dt * (0.5 * g[:, :n_cfg] - g[:, n_cfg:] / dt)
            f_minus = dt * np.asarray(mech.force(mid, v, u, lam))
            residual = p + d1 + f_minus
            if np.max(np.abs(residual[alive])) < 1e-10:
                break
            h = np.asarray(mech.lagrangian_hess(zeta_pt, v, lam))
            jf = np.asarray(mech.force_jac(mid, v, u, lam))
            # d(residual)/d(q1) via the chain rule of the midpoint maps
            block = (
                dt * (0.25 * h[:, :n_cfg, :n_cfg])
                + 0.5 * h[:, :n_cfg, n_cfg:]
                - 0.5 * h[:, n_cfg:, :n_cfg]
                - h[:, n_cfg:, n_cfg:] / dt
                + dt * (0.5 * jf[:, :, :n_cfg])
                + jf[:, :, n_cfg : 2 * n_cfg]
            )
            q1 = q1 - np.linalg.solve(block, residual[..., None])[..., 0]
        mid = 0.5 * (q + q1)
        v = (q1 - q) / dt
        g = np.asarray(mech.lagrangian_grad(0.5 * (q + q1), v, lam))
        self.p = dt * (0.5 * g[:, :n_cfg]) + g[:, n_cfg:]
        self.q = q1
        # report (q, v) with v from the new momentum via mass inverse
        h = np.asarray(mech.lagrangian_hess(q1, np.zeros_like(q1), lam))
        v_out = np.linalg.solve(h[:, n_cfg:, n_cfg:], self.p[..., None])[..., 0]
        self.x = np.concatenate([q1, v_out], axis=1)
        return self.x


def fd_jacobian(func: Callable, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of an array-valued function."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.shape[0]):
        d = np.zeros_like(x)
        d[i] = step
        cols.append((np.asarray(func(x + d)) - np.asarray(func(x - d))) / (2 * step))
    return np.stack(cols, axis=-1)


def fd_hessian(func: Callable, x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Second-difference Hessian of an array- or scalar-valued function."""
    return fd_jacobian(lambda y: fd_jacobian(func, y, step), x, step)


def second_difference_directional(
    func: Callable, x: np.ndarray, direction: np.ndarray, step: float = 1e-3
) -> np.ndarray:
    """Directional second difference ``d^2/de^2 f(x + e d)`` at e = 0."""
    d = np.asarray(direction, dtype=float)
    plus = np.asarray(func(x + step * d))
    minus = np.asarray(func(x - step * d))
    base = np.asarray(func(x))
    return (plus + minus - 2.0 * base) / step**2


@dataclass
class FdReport:
    """Best finite-difference agreement across the step sweep."""

    max_rel_error: float
    best_step: float
    errors_by_step: dict

    @property
    def passed(self) -> bool:
        return np.isfinite(self.max_rel_error)


def fd_check(
    func: Callable,
    claimed: np.ndarray,
    point: np.ndarray,
    steps: Sequence[float] = (1e-4, 1e-5, 1e-6),
    directions: Optional[np.ndarray] = None,
) -> FdReport:
    """Compare a claimed derivative against central differences.

    Sweeps the step sizes and reports the best worst-entry relative error
    (the sweep plays the role of Richardson step selection).  If
    ``directions`` is given, only directional derivatives
    ``claimed @ direction`` are checked, which keeps large tensors cheap.
    """
    claimed = np.asarray(claimed, dtype=float)
    point = np.asarray(point, dtype=float)
    scale = max(1.0, float(np.max(np.abs(claimed))))
    errors = {}
    for h in steps:
        if directions is None:
            approx = fd_jacobian(func, point, h)
            err = np.max(np.abs(approx - claimed)) / scale
        else:
            worst = 0.0
            for d in np.atleast_2d(directions):
                fd_dir = (
                    np.asarray(func(point + h * d)) - np.asarray(func(point - h * d))
                ) / (2 * h)
                claim_dir = np.tensordot(claimed, d, axes=([-1], [0]))
                worst = max(worst, float(np.max(np.abs(fd_dir - claim_dir))) / scale)
            err = worst
        errors[h] = float(err)
    best_step = min(errors, key=errors.get)
    return FdReport(max_rel_error=errors[best_step], best_step=best_step, errors_by_step=errors)


def convergence_rate(errors: Sequence[float], floor: float = 1e-12, last: Optional[int] = None) -> float:
    """Fitted exponent of ``log e_l`` against ``log e_{l-1}``.

    An exponent of 2 indicates quadratic convergence of the sequence.
    Entries at or below ``floor`` are discarded; at least three usable
    points are required.
    """
    e = np.asarray([x for x in errors if x > floor], dtype=float)
    if last is not None and len(e) > last:
        e = e[-last:]
    if len(e) < 3:
        raise ValueError("need at least three error values above the floor")
    x = np.log(e[:-1])
    y = np.log(e[1:])
    return float(np.polyfit(x, y, 1)[0])
