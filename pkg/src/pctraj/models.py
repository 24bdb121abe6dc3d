"""Concrete stochastic dynamical systems: Duffing oscillator and quadrotor.

Every model exposes batched evaluators ``f, fx, fu, fxx, fxu, fuu`` taking
``(x, u, t, lam)`` where ``x`` and ``lam`` may carry a leading batch axis
(one row per quadrature node or sample) and ``u`` is a plain control vector.
Derivative tensors put the output component on axis 0.

Mechanical systems additionally carry a Lagrangian / non-conservative force
description with derivatives up to third (Lagrangian) and second (forces)
order, batched the same way with the position/velocity pair concatenated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .gpc import Deterministic, Gaussian, PolynomialBasis, GpcCoefficients, Uniform
from .orthopoly import PolyFamily, product_integral

__all__ = [
    "StochasticModel",
    "MechanicalModel",
    "GimbalLockError",
    "duffing",
    "quadrotor",
    "duffing_gpc_rhs_closed_form",
]


class GimbalLockError(RuntimeError):
    """Raised when the quadrotor leaves the pitch envelope where J is regular."""


@dataclass(frozen=True)
class MechanicalModel:
    """Lagrangian mechanics description with batched derivative evaluators.

    ``lagrangian*`` evaluators take ``(q, v, lam)`` and differentiate w.r.t.
    the concatenated ``(q, v)`` of length 2N; ``force*`` evaluators take
    ``(q, v, u, lam)`` and differentiate w.r.t. ``(q, v, u)`` of length
    2N + m.
    """

    n_config: int
    m: int
    lagrangian: Callable
    lagrangian_grad: Callable
    lagrangian_hess: Callable
    lagrangian_third: Callable
    force: Callable
    force_jac: Callable
    force_hess: Callable


@dataclass(frozen=True)
class StochasticModel:
    """Dynamics with random parameters and initial conditions."""

    name: str
    n: int
    m: int
    param_dists: tuple
    init_dists: tuple
    f: Callable
    fx: Callable
    fu: Callable
    fxx: Callable
    fxu: Callable
    fuu: Callable
    mechanical: Optional[MechanicalModel] = None

    def basis(self, order: int) -> PolynomialBasis:
        return PolynomialBasis(self.param_dists, self.init_dists, order)


# ---------------------------------------------------------------------------
# Duffing oscillator
# ---------------------------------------------------------------------------


def duffing(
    lambda_mean: float = 3.0,
    lambda_std: float = 0.1,
    x1_mean: float = 4.0,
    x1_std: float = 0.08,
    x2_init: float = 0.0,
) -> StochasticModel:
    """Forced Duffing oscillator with a Gaussian stiffness parameter.

    xdot = (x2, -lambda x1 - x2/4 - x1^3 + u); the same system is described
    mechanically by L = v^2/2 - lambda q^2/2 - q^4/4 and F = u - v/4.
    """

    def f(x, u, t, lam):
        x = np.asarray(x, dtype=float)
        x1, x2 = x[..., 0], x[..., 1]
        lam1 = np.asarray(lam, dtype=float)[..., 0]
        u0 = float(np.asarray(u, dtype=float).reshape(-1)[0])
        return np.stack([x2, -lam1 * x1 - 0.25 * x2 - x1**3 + u0], axis=-1)

    def fx(x, u, t, lam):
        x = np.asarray(x, dtype=float)
        lam1 = np.asarray(lam, dtype=float)[..., 0]
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 1] = 1.0
        out[..., 1, 0] = -lam1 - 3.0 * x[..., 0] ** 2
        out[..., 1, 1] = -0.25
        return out

    def fu(x, u, t, lam):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (2, 1))
        out[..., 1, 0] = 1.0
        return out

    def fxx(x, u, t, lam):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (2, 2, 2))
        out[..., 1, 0, 0] = -6.0 * x[..., 0]
        return out

    def fxu(x, u, t, lam):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (2, 2, 1))

    def fuu(x, u, t, lam):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (2, 1, 1))

    def lagrangian(q, v, lam):
        q0 = np.asarray(q, dtype=float)[..., 0]
        v0 = np.asarray(v, dtype=float)[..., 0]
        lam1 = np.asarray(lam, dtype=float)[..., 0]
        return 0.5 * v0**2 - 0.5 * lam1 * q0**2 - 0.25 * q0**4

    def lagrangian_grad(q, v, lam):
        q0 = np.asarray(q, dtype=float)[..., 0]
        v0 = np.asarray(v, dtype=float)[..., 0]
        lam1 = np.asarray(lam, dtype=float)[..., 0]
        return np.stack([-lam1 * q0 - q0**3, v0], axis=-1)

    def lagrangian_hess(q, v, lam):
        q0 = np.asarray(q, dtype=float)[..., 0]
        lam1 = np.asarray(lam, dtype=float)[..., 0]
        out = np.zeros(q0.shape + (2, 2))
        out[..., 0, 0] = -lam1 - 3.0 * q0**2
        out[..., 1, 1] = 1.0
        return out

    def lagrangian_third(q, v, lam):
        q0 = np.asarray(q, dtype=float)[..., 0]
        out = np.zeros(q0.shape + (2, 2, 2))
        out[..., 0, 0, 0] = -6.0 * q0
        return out

    def force(q, v, u, lam):
        v0 = np.asarray(v, dtype=float)[..., 0]
        u0 = float(np.asarray(u, dtype=float).reshape(-1)[0])
        return (u0 - 0.25 * v0)[..., None]

    def force_jac(q, v, u, lam):
        q0 = np.asarray(q, dtype=float)[..., 0]
        out = np.zeros(q0.shape + (1, 3))
        out[..., 0, 1] = -0.25
        out[..., 0, 2] = 1.0
        return out

    def force_hess(q, v, u, lam):
        q0 = np.asarray(q, dtype=float)[..., 0]
        return np.zeros(q0.shape + (1, 3, 3))

    mech = MechanicalModel(
        n_config=1,
        m=1,
        lagrangian=lagrangian,
        lagrangian_grad=lagrangian_grad,
        lagrangian_hess=lagrangian_hess,
        lagrangian_third=lagrangian_third,
        force=force,
        force_jac=force_jac,
        force_hess=force_hess,
    )
    return StochasticModel(
        name="duffing",
        n=2,
        m=1,
        param_dists=(Gaussian(lambda_mean, lambda_std),),
        init_dists=(Gaussian(x1_mean, x1_std), Deterministic(x2_init)),
        f=f,
        fx=fx,
        fu=fu,
        fxx=fxx,
        fxu=fxu,
        fuu=fuu,
        mechanical=mech,
    )


def duffing_gpc_rhs_closed_form(X: GpcCoefficients, u, basis: PolynomialBasis) -> GpcCoefficients:
    """Projected Duffing dynamics from precomputed basis product tensors.

    Independent of the quadrature-based Galerkin path: the linear stiffness
    term uses triple products against the parameter expansion, the cubic term
    quadruple products, and the control enters through ``<phi_k>``.
    """
    if basis.d != 2 or any(f is not PolyFamily.HERMITE_PROBABILISTS for f in basis.families):
        raise ValueError("closed form requires the two-dimensional Hermite basis")
    dist = basis.param_dists[0]
    if not isinstance(dist, Gaussian):
        raise ValueError("closed form requires a Gaussian stiffness parameter")
    tensors = basis._adjunct.get("duffing_closed_form")
    if tensors is None:
        tensors = _duffing_projection_tensors(basis, dist.mean, dist.std)
        basis._adjunct["duffing_closed_form"] = tensors
    t_lin, quad4, phi_mean = tensors
    x1 = X.coeffs[0]
    x2 = X.coeffs[1]
    u0 = float(np.asarray(u, dtype=float).reshape(-1)[0])
    cubic = np.einsum("kigj,i,g,j->k", quad4, x1, x1, x1, optimize=True)
    x2dot = (-x1 @ t_lin.T - 0.25 * x2 * basis.norms - cubic + phi_mean * u0) / basis.norms
    return GpcCoefficients(np.stack([x2, x2dot]))


def _duffing_projection_tensors(basis: PolynomialBasis, mu: float, sigma: float):
    fam = PolyFamily.HERMITE_PROBABILISTS
    k1 = basis.n_terms
    idx = basis.index_set.indices
    pdim = basis.param_dims[0]
    odim = 1 - pdim
    uni: dict[tuple, float] = {}

    def uni_int(*degrees):
        key = tuple(sorted(degrees))
        if key not in uni:
            uni[key] = product_integral(fam, key)
        return uni[key]

    t_lin = np.empty((k1, k1))
    for k in range(k1):
        for i in range(k1):
            trip = uni_int(1, idx[k][pdim], idx[i][pdim]) * uni_int(idx[k][odim], idx[i][odim])
            pair = uni_int(idx[k][pdim], idx[i][pdim]) * uni_int(idx[k][odim], idx[i][odim])
            t_lin[k, i] = mu * pair + sigma * trip
    quad4 = np.empty((k1, k1, k1, k1))
    for k in range(k1):
        for i in range(k1):
            for g in range(k1):
                for j in range(k1):
                    quad4[k, i, g, j] = uni_int(
                        idx[k][0], idx[i][0], idx[g][0], idx[j][0]
                    ) * uni_int(idx[k][1], idx[i][1], idx[g][1], idx[j][1])
    phi_mean = np.array([uni_int(t[0]) * uni_int(t[1]) for t in idx])
    return t_lin, quad4, phi_mean


# ---------------------------------------------------------------------------
# Quadrotor
# ---------------------------------------------------------------------------

_QUAD_GRAVITY = 9.81
_QUAD_MASS = 1.0
_QUAD_ARM = 0.24
_QUAD_INERTIA = (8.1e-3, 8.1e-3, 14.2e-3)
_PITCH_LIMIT = math.pi / 2 - 0.1
_RATE_LIMIT = 25.0  # rad/s; beyond this the discretized attitude model is not trusted


def _require_envelope(packed: np.ndarray, pitch_index: int, rate_slice: slice):
    """Operating-envelope guard for every quadrotor evaluation.

    The angular-rate transformation is singular at |pitch| = pi/2, and the
    torque channels are strong enough that unchecked iterates spin up to
    rates where the discretized model is meaningless, so both are bounded.
    """
    arr = np.asarray(packed, dtype=float)
    pitch = arr[..., pitch_index]
    if np.any(np.abs(pitch) >= _PITCH_LIMIT):
        worst = float(np.max(np.abs(pitch)))
        raise GimbalLockError(
            f"pitch magnitude {worst:.3f} rad reaches the singular envelope of the"
            f" angular-rate transformation (limit {_PITCH_LIMIT:.3f})"
        )
    rates = arr[..., rate_slice]
    if np.any(np.abs(rates) >= _RATE_LIMIT):
        worst = float(np.max(np.abs(rates)))
        raise GimbalLockError(
            f"angular rate magnitude {worst:.1f} rad/s leaves the operating"
            f" envelope (limit {_RATE_LIMIT:.1f})"
        )


def _quadrotor_jax_core():
    """Build jitted single-point evaluators; imported lazily so the Duffing
    path never touches jax."""
    import jax
    import jax.numpy as jnp

    jax.config.update("jax_enable_x64", True)

    inertia = jnp.diag(jnp.array(_QUAD_INERTIA))
    e3 = jnp.array([0.0, 0.0, 1.0])

    def rot(eta):
        # Z-Y-X (yaw-pitch-roll), body frame to inertial frame.
        phi, th, psi = eta
        cph, sph = jnp.cos(phi), jnp.sin(phi)
        cth, sth = jnp.cos(th), jnp.sin(th)
        cps, sps = jnp.cos(psi), jnp.sin(psi)
        rz = jnp.array([[cps, -sps, 0.0], [sps, cps, 0.0], [0.0, 0.0, 1.0]])
        ry = jnp.array([[cth, 0.0, sth], [0.0, 1.0, 0.0], [-sth, 0.0, cth]])
        rx = jnp.array([[1.0, 0.0, 0.0], [0.0, cph, -sph], [0.0, sph, cph]])
        return rz @ ry @ rx

    def angular_map(eta):
        # Body rates omega = W(eta) etadot.
        phi, th = eta[0], eta[1]
        cph, sph = jnp.cos(phi), jnp.sin(phi)
        cth, sth = jnp.cos(th), jnp.sin(th)
        return jnp.array(
            [
                [1.0, 0.0, -sth],
                [0.0, cph, sph * cth],
                [0.0, -sph, cph * cth],
            ]
        )

    def lagrangian(q, v, lam):
        chi, eta = q[:3], q[3:]
        chid, etad = v[:3], v[3:]
        w = angular_map(eta)
        j_eta = w.T @ inertia @ w
        return (
            0.5 * _QUAD_MASS * chid @ chid
            - _QUAD_MASS * _QUAD_GRAVITY * chi[2]
            + 0.5 * etad @ j_eta @ etad
        )

    def force(q, v, u, lam):
        eta = q[3:]
        g_tr, g_rot = lam[0], lam[1]
        thrust = rot(eta) @ (e3 * jnp.sum(u))
        ratio = _QUAD_ARM * g_tr / g_rot
        tau = jnp.array(
            [
                (u[2] - u[0]) * ratio,
                (u[1] - u[3]) * ratio,
                u[0] + u[2] - u[1] - u[3],
            ]
        )
        return jnp.concatenate([thrust, tau])

    def f(x, u, t, lam):
        q, v = x[:6], x[6:]
        grad_q = jax.grad(lagrangian, argnums=0)(q, v, lam)
        mom = lambda q_, v_: jax.grad(lagrangian, argnums=1)(q_, v_, lam)
        mass = jax.jacfwd(mom, argnums=1)(q, v)
        mom_q = jax.jacfwd(mom, argnums=0)(q, v)
        acc = jnp.linalg.solve(mass, force(q, v, u, lam) + grad_q - mom_q @ v)
        return jnp.concatenate([v, acc])

    def lag_w(w, lam):
        return lagrangian(w[:6], w[6:], lam)

    def force_wu(wu, lam):
        return force(wu[:6], wu[6:12], wu[12:], lam)

    batch = lambda fn: jax.jit(jax.vmap(fn, in_axes=(0, None, None, 0)))
    batch2 = lambda fn: jax.jit(jax.vmap(fn, in_axes=(0, 0)))

    core = {
        "f": batch(f),
        "fx": batch(jax.jacfwd(f, 0)),
        "fu": batch(jax.jacfwd(f, 1)),
        "fxx": batch(jax.jacfwd(jax.jacfwd(f, 0), 0)),
        "fxu": batch(jax.jacfwd(jax.jacfwd(f, 0), 1)),
        "fuu": batch(jax.jacfwd(jax.jacfwd(f, 1), 1)),
        "lag": batch2(lag_w),
        "lag_grad": batch2(jax.jacfwd(lag_w)),
        "lag_hess": batch2(jax.jacfwd(jax.jacfwd(lag_w))),
        "lag_third": batch2(jax.jacfwd(jax.jacfwd(jax.jacfwd(lag_w)))),
        "force": batch2(force_wu),
        "force_jac": batch2(jax.jacfwd(force_wu)),
        "force_hess": batch2(jax.jacfwd(jax.jacfwd(force_wu))),
    }
    return core


_quad_core_cache: dict = {}


def _quad_core():
    if "core" not in _quad_core_cache:
        _quad_core_cache["core"] = _quadrotor_jax_core()
    return _quad_core_cache["core"]


def _as_batch(x, width):
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.shape[-1] != width:
        raise ValueError(f"expected trailing dimension {width}, got {arr.shape}")
    return arr, False


def quadrotor(
    g_tr: Uniform = Uniform(2.85e-5, 2.95e-5),
    g_rot: Uniform = Uniform(1.05e-6, 1.15e-6),
    initial_state=(-3.0, 3.0, 3.0, 0, 0, 0, 0, 0, 0, 0, 0, 0),
) -> StochasticModel:
    """Quadrotor with position/Euler-angle states and uncertain rotor constants.

    State is (chi, eta, chidot, etadot) with eta = (roll, pitch, yaw); the
    four controls enter through the total thrust along the body z axis and
    the torque vector.  Accelerations come from the Lagrangian via the
    mass-matrix solve, so the dynamics and the mechanical description agree
    by construction.
    """

    def make_eval(key, out_width=None):
        def evaluator(x, u, t, lam):
            xb, single = _as_batch(x, 12)
            _require_envelope(xb, 4, slice(9, 12))
            lamb, _ = _as_batch(lam, 2)
            if lamb.shape[0] == 1 and xb.shape[0] > 1:
                lamb = np.broadcast_to(lamb, (xb.shape[0], 2))
            u_arr = np.asarray(u, dtype=float).reshape(4)
            out = np.asarray(_quad_core()[key](xb, u_arr, float(t), lamb))
            return out[0] if single else out

        return evaluator

    def make_mech_eval(key, width):
        def evaluator(*args):
            *coords, lam = args
            stacked = [np.asarray(a, dtype=float) for a in coords]
            single = stacked[0].ndim == 1
            if single:
                stacked = [a[None, :] for a in stacked]
            batch = stacked[0].shape[0]
            cols = []
            for a in stacked:
                cols.append(np.broadcast_to(a, (batch, a.shape[-1])))
            w = np.concatenate(cols, axis=1)
            if w.shape[1] != width:
                raise ValueError(f"expected {width} packed coordinates, got {w.shape[1]}")
            _require_envelope(w, 4, slice(9, 12))
            lamb, _ = _as_batch(lam, 2)
            if lamb.shape[0] == 1 and batch > 1:
                lamb = np.broadcast_to(lamb, (batch, 2))
            out = np.asarray(_quad_core()[key](w, lamb))
            return out[0] if single else out

        return evaluator

    def mech_force(q, v, u, lam):
        u_arr = np.broadcast_to(
            np.asarray(u, dtype=float).reshape(-1), np.asarray(q).shape[:-1] + (4,)
        )
        return make_mech_eval("force", 16)(q, v, u_arr, lam)

    def mech_force_jac(q, v, u, lam):
        u_arr = np.broadcast_to(
            np.asarray(u, dtype=float).reshape(-1), np.asarray(q).shape[:-1] + (4,)
        )
        return make_mech_eval("force_jac", 16)(q, v, u_arr, lam)

    def mech_force_hess(q, v, u, lam):
        u_arr = np.broadcast_to(
            np.asarray(u, dtype=float).reshape(-1), np.asarray(q).shape[:-1] + (4,)
        )
        return make_mech_eval("force_hess", 16)(q, v, u_arr, lam)

    mech = MechanicalModel(
        n_config=6,
        m=4,
        lagrangian=make_mech_eval("lag", 12),
        lagrangian_grad=make_mech_eval("lag_grad", 12),
        lagrangian_hess=make_mech_eval("lag_hess", 12),
        lagrangian_third=make_mech_eval("lag_third", 12),
        force=mech_force,
        force_jac=mech_force_jac,
        force_hess=mech_force_hess,
    )
    return StochasticModel(
        name="quadrotor",
        n=12,
        m=4,
        param_dists=(g_tr, g_rot),
        init_dists=tuple(Deterministic(float(v)) for v in initial_state),
        f=make_eval("f"),
        fx=make_eval("fx"),
        fu=make_eval("fu"),
        fxx=make_eval("fxx"),
        fxu=make_eval("fxu"),
        fuu=make_eval("fuu"),
        mechanical=mech,
    )
