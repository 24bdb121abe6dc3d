"""Time discretization of chaos-coefficient dynamics.

Two steppers are provided for the solver:

* explicit Euler on the projected ODE, with analytic first/second-order
  linearization of the step map;
* a variational integrator: the implicit discrete Euler-Lagrange update of
  the coefficient system ``(Q, Phat)``, where ``Phat`` holds the unnormalized
  momentum coefficients ``p_ij <phi_j, phi_j>``, together with its structured
  linearization obtained by implicit differentiation.

Derivative-argument convention used throughout: for a function of several
vector arguments, ``d_b d_a g`` is stored with axis 0 indexing the component
of the inner derivative (argument ``a``), axis 1 the middle one, axis 2 the
outer one.  Mode-i products contract tensor axis ``i - 1``:

    mode-1: out[r, q, t] = sum_p  M[r, p] T[p, q, t]
    mode-2: out[p, r, t] = sum_q  T[p, q, t] M[q, r]   (applied as M^T)
    mode-3: out[p, q, r] = sum_t  T[p, q, t] M[t, r]   (applied as M^T)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .gpc import (
    GpcCoefficients,
    NonFiniteDynamicsError,
    PolynomialBasis,
    TensorQuadrature,
    galerkin_rhs,
    gpc_hessian,
    gpc_jacobian,
    project_initial,
)
from .models import MechanicalModel, StochasticModel

__all__ = [
    "StepLinearization",
    "GpcDelState",
    "NewtonConfig",
    "DelSolveError",
    "euler_step",
    "rk4_step",
    "euler_linearize",
    "discrete_lagrangian",
    "discrete_forces",
    "GpcMechanics",
    "gpc_discrete_lagrangian",
    "gpc_discrete_forces",
    "del_step",
    "del_linearize",
    "EulerStepper",
    "DelStepper",
]


@dataclass
class StepLinearization:
    """First and second derivatives of a discrete step map.

    ``fx, fu`` are the Jacobians of the next state w.r.t. state and control;
    ``fxx[o, a, b]`` etc. are second derivatives with the output component on
    axis 0.  For linear dynamics (quadratic Lagrangians on the variational
    path) the second-order tensors vanish identically.
    """

    fx: np.ndarray
    fu: np.ndarray
    fxx: np.ndarray
    fxu: np.ndarray
    fux: np.ndarray
    fuu: np.ndarray

    @property
    def n_state(self) -> int:
        return self.fx.shape[0]

    @property
    def n_control(self) -> int:
        return self.fu.shape[1]


@dataclass
class GpcDelState:
    """Variational-integrator state: position and unnormalized momentum
    coefficients, each flattened to length N(K+1)."""

    q: np.ndarray
    phat: np.ndarray

    def concat(self) -> np.ndarray:
        return np.concatenate([self.q, self.phat])

    @classmethod
    def from_concat(cls, z: np.ndarray) -> "GpcDelState":
        half = z.shape[0] // 2
        return cls(np.array(z[:half]), np.array(z[half:]))


@dataclass(frozen=True)
class NewtonConfig:
    tol: float = 1e-10
    max_iter: int = 50


class DelSolveError(RuntimeError):
    """Implicit position solve failed (non-convergence or singular system)."""


# ---------------------------------------------------------------------------
# Explicit Euler
# ---------------------------------------------------------------------------


def euler_step(rhs: Callable, x: np.ndarray, u, t: float, dt: float) -> np.ndarray:
    """One explicit Euler step ``x + dt * rhs(x, u, t)``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    out = np.asarray(x, dtype=float) + dt * np.asarray(rhs(x, u, t), dtype=float)
    if not np.all(np.isfinite(out)):
        raise NonFiniteDynamicsError("Euler step produced a non-finite state")
    return out


def rk4_step(rhs: Callable, x: np.ndarray, u, t: float, dt: float) -> np.ndarray:
    """One classical Runge-Kutta step; used for reference propagations."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    k1 = np.asarray(rhs(x, u, t))
    k2 = np.asarray(rhs(x + 0.5 * dt * k1, u, t + 0.5 * dt))
    k3 = np.asarray(rhs(x + 0.5 * dt * k2, u, t + 0.5 * dt))
    k4 = np.asarray(rhs(x + dt * k3, u, t + dt))
    out = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NonFiniteDynamicsError("reference step produced a non-finite state")
    return out


def euler_linearize(
    model: StochasticModel,
    X: GpcCoefficients,
    u,
    t: float,
    dt: float,
    quad: TensorQuadrature,
) -> StepLinearization:
    """Derivatives of the Euler step map of the projected dynamics."""
    jac, jac_u = gpc_jacobian(model, X, u, t, quad)
    hxx, hxu, huu = gpc_hessian(model, X, u, t, quad)
    ns = jac.shape[0]
    return StepLinearization(
        fx=np.eye(ns) + dt * jac,
        fu=dt * jac_u,
        fxx=dt * hxx,
        fxu=dt * hxu,
        fux=dt * np.transpose(hxu, (0, 2, 1)),
        fuu=dt * huu,
    )


# ---------------------------------------------------------------------------
# Discrete Lagrangian mechanics (physical coordinates)
# ---------------------------------------------------------------------------


def discrete_lagrangian(lagrangian: Callable, q_k, q_k1, dt: float, zeta: float = 0.5) -> float:
    """One-point quadrature of the action over a step.

    ``L((1 - zeta) q_k + zeta q_k1, (q_k1 - q_k) / dt) dt``; zeta = 1/2 is the
    second-order accurate midpoint choice.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if not 0.0 <= zeta <= 1.0:
        raise ValueError("zeta must lie in [0, 1]")
    q_k = np.asarray(q_k, dtype=float)
    q_k1 = np.asarray(q_k1, dtype=float)
    return float(lagrangian((1 - zeta) * q_k + zeta * q_k1, (q_k1 - q_k) / dt) * dt)


def discrete_forces(force: Callable, q_k, q_k1, u_k, dt: float):
    """Left/right discrete forces; all forcing is lumped on the left slot.

    Returns ``(F_minus, F_plus)`` with
    ``F_minus = F((q_k + q_k1) / 2, (q_k1 - q_k) / dt, u_k) dt`` and
    ``F_plus = 0``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    q_k = np.asarray(q_k, dtype=float)
    q_k1 = np.asarray(q_k1, dtype=float)
    f_minus = np.asarray(force(0.5 * (q_k + q_k1), (q_k1 - q_k) / dt, u_k), dtype=float) * dt
    return f_minus, np.zeros_like(f_minus)


# ---------------------------------------------------------------------------
# Discrete Lagrangian mechanics for chaos coefficients
# ---------------------------------------------------------------------------


@dataclass
class GpcDiscreteLagrangian:
    """Value and partials of the projected discrete Lagrangian.

    ``grad``/``hess``/``third`` are taken w.r.t. the concatenated
    ``(Q_k, Q_k1)`` coefficient vector of length 2 N(K+1); slices named
    ``d1*``/``d2*`` follow the argument convention of the module docstring.
    """

    value: float
    n_half: int
    grad: Optional[np.ndarray] = None
    hess: Optional[np.ndarray] = None
    third: Optional[np.ndarray] = None

    @property
    def d1(self) -> np.ndarray:
        return self.grad[: self.n_half]

    @property
    def d2(self) -> np.ndarray:
        return self.grad[self.n_half :]

    @property
    def d1d1(self) -> np.ndarray:
        return self.hess[: self.n_half, : self.n_half]

    @property
    def d2d1(self) -> np.ndarray:
        # rows: first-argument component, cols: second-argument component
        return self.hess[: self.n_half, self.n_half :]

    @property
    def d1d2(self) -> np.ndarray:
        return self.hess[self.n_half :, : self.n_half]

    @property
    def d2d2(self) -> np.ndarray:
        return self.hess[self.n_half :, self.n_half :]


@dataclass
class GpcDiscreteForces:
    """Value and partials of the projected left discrete force.

    ``jac``/``hess`` are w.r.t. the packed ``(Q_k, Q_k1, u)`` vector; the
    right discrete force is identically zero under the chosen convention.
    """

    value: np.ndarray
    n_half: int
    jac: Optional[np.ndarray] = None
    hess: Optional[np.ndarray] = None

    @property
    def d1(self) -> np.ndarray:
        return self.jac[:, : self.n_half]

    @property
    def d2(self) -> np.ndarray:
        return self.jac[:, self.n_half : 2 * self.n_half]

    @property
    def d3(self) -> np.ndarray:
        return self.jac[:, 2 * self.n_half :]


class GpcMechanics:
    """Quadrature assembly of the discrete Lagrangian and forces of the
    coefficient system of a mechanical model."""

    def __init__(
        self,
        mech: MechanicalModel,
        basis: PolynomialBasis,
        quad: Optional[TensorQuadrature] = None,
        zeta: float = 0.5,
    ):
        self.mech = mech
        self.basis = basis
        self.quad = quad if quad is not None else basis.tensor_quadrature()
        self.zeta = float(zeta)
        self.n_cfg = mech.n_config
        self.k1 = basis.n_terms
        self.n_half = self.n_cfg * self.k1
        self.m = mech.m
        self._lam_nodes = basis.param_values(self.quad.nodes)

        n, dt_slot = self.n_cfg, None
        eye = np.eye(n)
        # (q_zeta, v) = J_lag (q_k, q_k1); the 1/dt factors are patched in
        # per call since dt is an argument.
        self._j_lag_template = np.block(
            [[(1 - self.zeta) * eye, self.zeta * eye], [-eye, eye]]
        )
        self._j_force_template = np.block([[0.5 * eye, 0.5 * eye], [-eye, eye]])

    # -- reconstruction helpers -------------------------------------------

    def _nodes_of(self, q_flat: np.ndarray) -> np.ndarray:
        return self.quad.phi @ q_flat.reshape(self.n_cfg, self.k1).T  # (M, N)

    def _j_lag(self, dt: float) -> np.ndarray:
        j = self._j_lag_template.copy()
        j[self.n_cfg :, :] /= dt
        return j

    def _j_force(self, dt: float) -> np.ndarray:
        n, m = self.n_cfg, self.m
        j = np.zeros((2 * n + m, 2 * n + m))
        j[: 2 * n, : 2 * n] = self._j_force_template
        j[n : 2 * n, : 2 * n] /= dt
        j[2 * n :, 2 * n :] = np.eye(m)
        return j

    # -- projected discrete Lagrangian ------------------------------------

    def lagrangian_bundle(
        self, q_k: np.ndarray, q_k1: np.ndarray, dt: float, order: int = 2
    ) -> GpcDiscreteLagrangian:
        qk_n = self._nodes_of(q_k)
        qk1_n = self._nodes_of(q_k1)
        q_z = (1 - self.zeta) * qk_n + self.zeta * qk1_n
        v = (qk1_n - qk_n) / dt
        lam = self._lam_nodes
        w = self.quad.weights
        phi = self.quad.phi

        value = dt * float(w @ np.asarray(self.mech.lagrangian(q_z, v, lam)))
        out = GpcDiscreteLagrangian(value=value, n_half=self.n_half)
        if order < 1:
            return out
        j_lag = self._j_lag(dt)
        g = np.asarray(self.mech.lagrangian_grad(q_z, v, lam))  # (M, 2N)
        gd = dt * (g @ j_lag)
        out.grad = np.einsum("m,ma,mj->aj", w, gd, phi).reshape(-1)
        if order < 2:
            return out
        h = np.asarray(self.mech.lagrangian_hess(q_z, v, lam))
        hd = dt * np.einsum("mbc,ba,cd->mad", h, j_lag, j_lag)
        out.hess = np.einsum("m,mab,mj,mh->ajbh", w, hd, phi, phi, optimize=True).reshape(
            2 * self.n_half, 2 * self.n_half
        )
        if order < 3:
            return out
        t3 = np.asarray(self.mech.lagrangian_third(q_z, v, lam))
        td = dt * np.einsum("mabc,ax,by,cz->mxyz", t3, j_lag, j_lag, j_lag, optimize=True)
        out.third = np.einsum(
            "m,mabc,mj,mh,md->ajbhcd", w, td, phi, phi, phi, optimize=True
        ).reshape(2 * self.n_half, 2 * self.n_half, 2 * self.n_half)
        return out

    # -- projected discrete forces -----------------------------------------

    def force_bundle(
        self, q_k: np.ndarray, q_k1: np.ndarray, u, dt: float, order: int = 1
    ) -> GpcDiscreteForces:
        qk_n = self._nodes_of(q_k)
        qk1_n = self._nodes_of(q_k1)
        mid = 0.5 * (qk_n + qk1_n)
        v = (qk1_n - qk_n) / dt
        lam = self._lam_nodes
        w = self.quad.weights
        phi = self.quad.phi
        n, m, nh = self.n_cfg, self.m, self.n_half

        f = dt * np.asarray(self.mech.force(mid, v, u, lam))  # (M, N)
        out = GpcDiscreteForces(
            value=np.einsum("m,mp,mj->pj", w, f, phi).reshape(-1), n_half=nh
        )
        if order < 1:
            return out
        j_f = self._j_force(dt)
        jac = dt * np.einsum(
            "mpb,bc->mpc", np.asarray(self.mech.force_jac(mid, v, u, lam)), j_f
        )
        jq = np.einsum("m,mpb,mj,mh->pjbh", w, jac[:, :, : 2 * n], phi, phi, optimize=True)
        ju = np.einsum("m,mpc,mj->pjc", w, jac[:, :, 2 * n :], phi, optimize=True)
        out.jac = np.concatenate(
            [jq.reshape(nh, 2 * nh), ju.reshape(nh, m)], axis=1
        )
        if order < 2:
            return out
        hess = dt * np.einsum(
            "mpbc,bx,cy->mpxy",
            np.asarray(self.mech.force_hess(mid, v, u, lam)),
            j_f,
            j_f,
            optimize=True,
        )
        hqq = np.einsum(
            "m,mpbc,mj,mh,md->pjbhcd", w, hess[:, :, : 2 * n, : 2 * n], phi, phi, phi,
            optimize=True,
        ).reshape(nh, 2 * nh, 2 * nh)
        hqu = np.einsum(
            "m,mpbc,mj,mh->pjbhc", w, hess[:, :, : 2 * n, 2 * n :], phi, phi, optimize=True
        ).reshape(nh, 2 * nh, m)
        huu = np.einsum(
            "m,mpcd,mj->pjcd", w, hess[:, :, 2 * n :, 2 * n :], phi, optimize=True
        ).reshape(nh, m, m)
        full = np.zeros((nh, 2 * nh + m, 2 * nh + m))
        full[:, : 2 * nh, : 2 * nh] = hqq
        full[:, : 2 * nh, 2 * nh :] = hqu
        full[:, 2 * nh :, : 2 * nh] = np.transpose(hqu, (0, 2, 1))
        full[:, 2 * nh :, 2 * nh :] = huu
        out.hess = full
        return out

    # -- auxiliary coefficient-space maps ----------------------------------

    def mass_matrix(self, q_flat: np.ndarray) -> np.ndarray:
        """Velocity-velocity block of the projected Lagrangian Hessian."""
        q_n = self._nodes_of(q_flat)
        h = np.asarray(self.mech.lagrangian_hess(q_n, np.zeros_like(q_n), self._lam_nodes))
        hvv = h[:, self.n_cfg :, self.n_cfg :]
        return np.einsum(
            "m,mig,mj,mh->ijgh", self.quad.weights, hvv, self.quad.phi, self.quad.phi,
            optimize=True,
        ).reshape(self.n_half, self.n_half)

    def project_momentum(self, q_flat: np.ndarray, v_flat: np.ndarray) -> np.ndarray:
        """Unnormalized momentum coefficients from position/velocity coefficients."""
        q_n = self._nodes_of(q_flat)
        v_n = self._nodes_of(v_flat)
        g = np.asarray(self.mech.lagrangian_grad(q_n, v_n, self._lam_nodes))
        p_n = g[:, self.n_cfg :]
        return np.einsum("m,mp,mj->pj", self.quad.weights, p_n, self.quad.phi).reshape(-1)

    def velocity_coefficients(self, q_flat: np.ndarray, phat_flat: np.ndarray) -> np.ndarray:
        """Chaos coefficients of the velocity implied by (Q, Phat).

        Reconstructs the momentum pointwise, inverts the mass matrix per
        node, and projects the velocity back onto the basis.
        """
        p_coeff = phat_flat.reshape(self.n_cfg, self.k1) / self.basis.norms[None, :]
        p_n = self.quad.phi @ p_coeff.T
        q_n = self._nodes_of(q_flat)
        h = np.asarray(self.mech.lagrangian_hess(q_n, np.zeros_like(q_n), self._lam_nodes))
        v_n = np.linalg.solve(h[:, self.n_cfg :, self.n_cfg :], p_n[..., None])[..., 0]
        return (v_n.T @ self.quad.proj).reshape(-1)


def gpc_discrete_lagrangian(
    mech_gpc: GpcMechanics, q_k, q_k1, dt: float, order: int = 2
) -> GpcDiscreteLagrangian:
    """Projected discrete Lagrangian with partials up to ``order``."""
    return mech_gpc.lagrangian_bundle(np.asarray(q_k, float), np.asarray(q_k1, float), dt, order)


def gpc_discrete_forces(
    mech_gpc: GpcMechanics, q_k, q_k1, u_k, dt: float, order: int = 1
) -> GpcDiscreteForces:
    """Projected left discrete force with partials up to ``order``."""
    return mech_gpc.force_bundle(np.asarray(q_k, float), np.asarray(q_k1, float), u_k, dt, order)


# ---------------------------------------------------------------------------
# Variational step and its structured linearization
# ---------------------------------------------------------------------------


def del_step(
    mech_gpc: GpcMechanics,
    state: GpcDelState,
    u,
    dt: float,
    newton: NewtonConfig = NewtonConfig(),
) -> GpcDelState:
    """Advance (Q, Phat) one step.

    The next position coefficients solve
    ``0 = Phat + d1 L_d(Q, Q⁺) + F_d⁻(Q, Q⁺, u)`` by Newton iteration with
    Jacobian ``M = d2 d1 L_d + d2 F_d⁻``; the momentum update
    ``Phat⁺ = d2 L_d`` is explicit (the right discrete force vanishes).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    q_k = np.asarray(state.q, dtype=float)
    phat = np.asarray(state.phat, dtype=float)
    try:
        q_next = q_k + dt * np.linalg.solve(mech_gpc.mass_matrix(q_k), phat)
    except np.linalg.LinAlgError as exc:
        raise DelSolveError("projected mass matrix is singular at the warm start") from exc

    lag = None
    for _ in range(newton.max_iter):
        lag = mech_gpc.lagrangian_bundle(q_k, q_next, dt, order=2)
        frc = mech_gpc.force_bundle(q_k, q_next, u, dt, order=1)
        residual = phat + lag.d1 + frc.value
        if np.max(np.abs(residual)) < newton.tol:
            break
        m_hat = lag.d2d1 + frc.d2
        try:
            q_next = q_next - np.linalg.solve(m_hat, residual)
        except np.linalg.LinAlgError as exc:
            raise DelSolveError("implicit step Jacobian is singular") from exc
    else:
        raise DelSolveError(
            f"implicit position solve did not reach tolerance {newton.tol:g} in"
            f" {newton.max_iter} iterations"
        )
    return GpcDelState(q=q_next, phat=lag.d2.copy())


def _m3(tensor: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """Mode-3 product with ``mat`` transposed: contract axis 2 rows of mat."""
    return np.einsum("pqt,tr->pqr", tensor, mat, optimize=True)


def _m2(tensor: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """Mode-2 product with ``mat`` transposed: contract axis 1 rows of mat."""
    return np.einsum("pst,sq->pqt", tensor, mat, optimize=True)


def _m1(mat: np.ndarray, tensor: np.ndarray) -> np.ndarray:
    """Mode-1 product: contract axis 0 against the columns of ``mat``."""
    return np.einsum("rp,pqt->rqt", mat, tensor, optimize=True)


def del_linearize(
    mech_gpc: GpcMechanics,
    state: GpcDelState,
    u,
    dt: float,
    newton: NewtonConfig = NewtonConfig(),
    q_next: Optional[np.ndarray] = None,
) -> StepLinearization:
    """Structured derivatives of the variational step.

    First order comes from implicit differentiation of the position update
    and explicit differentiation of the momentum update; second order from
    differentiating those identities once more (all second partials of the
    next state w.r.t. (Q, Phat, u), assembled into dense tensors over the
    stacked state).  ``q_next`` may be supplied to skip the Newton solve.
    """
    if q_next is None:
        q_next = del_step(mech_gpc, state, u, dt, newton).q
    q_k = np.asarray(state.q, dtype=float)
    nh = mech_gpc.n_half
    m = mech_gpc.m

    lag = mech_gpc.lagrangian_bundle(q_k, q_next, dt, order=3)
    frc = mech_gpc.force_bundle(q_k, q_next, u, dt, order=2)
    t3 = lag.third
    fh = frc.hess
    su = slice(2 * nh, 2 * nh + m)

    # Third-derivative slices of the Lagrangian; names follow d_c d_b d_a.
    d111 = t3[:nh, :nh, :nh]
    d211 = t3[:nh, :nh, nh:]
    d121 = t3[:nh, nh:, :nh]
    d221 = t3[:nh, nh:, nh:]
    d112 = t3[nh:, :nh, :nh]
    d212 = t3[nh:, :nh, nh:]
    d122 = t3[nh:, nh:, :nh]
    d222 = t3[nh:, nh:, nh:]
    # Second-derivative slices of the force vector.
    f11 = fh[:, :nh, :nh]
    f21 = fh[:, :nh, nh : 2 * nh]
    f12 = fh[:, nh : 2 * nh, :nh]
    f22 = fh[:, nh : 2 * nh, nh : 2 * nh]
    f31 = fh[:, :nh, su]
    f32 = fh[:, nh : 2 * nh, su]
    f23 = fh[:, su, nh : 2 * nh]
    f13 = fh[:, su, :nh]
    f33 = fh[:, su, su]

    m_hat = lag.d2d1 + frc.d2
    try:
        m_inv = np.linalg.inv(m_hat)
    except np.linalg.LinAlgError as exc:
        raise DelSolveError("implicit step Jacobian is singular") from exc
    neg_m_inv = -m_inv

    a_qq = neg_m_inv @ (lag.d1d1 + frc.d1)  # dQ⁺/dQ
    a_qp = neg_m_inv.copy()  # dQ⁺/dPhat
    a_qu = neg_m_inv @ frc.d3  # dQ⁺/du

    d22l = lag.d2d2
    p_q = lag.d1d2 + d22l @ a_qq
    p_p = d22l @ a_qp
    p_u = d22l @ a_qu

    fx = np.block([[a_qq, a_qp], [p_q, p_p]])
    fu = np.vstack([a_qu, p_u])

    # Second derivatives of the position update: differentiate
    # 0 = X_b + M A_b once more; X_Q = d1d1 L + d1 F, X_P = I, X_u = d3 F.
    dm2 = d221 + f22  # outer derivative of M w.r.t. Q⁺
    dm_q = d121 + f12  # explicit derivative of M w.r.t. Q
    dm_u = f32  # explicit derivative of M w.r.t. u

    def second_q(x_expl, dx2, m_expl, s_b, s_a):
        total = _m2(_m3(dm2, s_a), s_b)
        if dx2 is not None:
            total = total + _m3(dx2, s_a)
        if m_expl is not None:
            total = total + _m2(m_expl, s_b)
        if x_expl is not None:
            total = total + x_expl
        return _m1(neg_m_inv, total)

    dxq2 = d211 + f21  # outer derivative of X_Q w.r.t. Q⁺
    q_second = {
        ("q", "q"): second_q(d111 + f11, dxq2, dm_q, a_qq, a_qq),
        ("q", "p"): second_q(None, dxq2, None, a_qq, a_qp),
        ("p", "p"): second_q(None, None, None, a_qp, a_qp),
        ("q", "u"): second_q(f31, dxq2, dm_u, a_qq, a_qu),
        ("p", "u"): second_q(None, None, dm_u, a_qp, a_qu),
        ("u", "u"): second_q(f33, f23, dm_u, a_qu, a_qu),
    }

    # Second derivatives of the momentum update Phat⁺ = d2 L(Q, Q⁺).
    def second_p(y_expl, dy2, e_expl, s_b, s_a, key):
        total = _m2(_m3(d222, s_a), s_b) + _m1(d22l, q_second[key])
        if dy2 is not None:
            total = total + _m3(dy2, s_a)
        if e_expl is not None:
            total = total + _m2(e_expl, s_b)
        if y_expl is not None:
            total = total + y_expl
        return total

    p_second = {
        ("q", "q"): second_p(d112, d212, d122, a_qq, a_qq, ("q", "q")),
        ("q", "p"): second_p(None, d212, None, a_qq, a_qp, ("q", "p")),
        ("p", "p"): second_p(None, None, None, a_qp, a_qp, ("p", "p")),
        ("q", "u"): second_p(None, d212, None, a_qq, a_qu, ("q", "u")),
        ("p", "u"): second_p(None, None, None, a_qp, a_qu, ("p", "u")),
        ("u", "u"): second_p(None, None, None, a_qu, a_qu, ("u", "u")),
    }

    ns = 2 * nh
    fxx = np.zeros((ns, ns, ns))
    fxu = np.zeros((ns, ns, m))
    fuu = np.zeros((ns, m, m))
    for rows, blocks in ((slice(0, nh), q_second), (slice(nh, ns), p_second)):
        qq = blocks[("q", "q")]
        qp = blocks[("q", "p")]
        pp = blocks[("p", "p")]
        fxx[rows, :nh, :nh] = 0.5 * (qq + np.transpose(qq, (0, 2, 1)))
        fxx[rows, :nh, nh:] = qp
        fxx[rows, nh:, :nh] = np.transpose(qp, (0, 2, 1))
        fxx[rows, nh:, nh:] = 0.5 * (pp + np.transpose(pp, (0, 2, 1)))
        fxu[rows, :nh, :] = blocks[("q", "u")]
        fxu[rows, nh:, :] = blocks[("p", "u")]
        uu = blocks[("u", "u")]
        fuu[rows] = 0.5 * (uu + np.transpose(uu, (0, 2, 1)))

    return StepLinearization(
        fx=fx,
        fu=fu,
        fxx=fxx,
        fxu=fxu,
        fux=np.transpose(fxu, (0, 2, 1)),
        fuu=fuu,
    )


# ---------------------------------------------------------------------------
# Stepper interfaces consumed by the solver
# ---------------------------------------------------------------------------


class EulerStepper:
    """Euler discretization of the projected dynamics for the solver."""

    def __init__(
        self,
        model: StochasticModel,
        basis: PolynomialBasis,
        dt: float,
        quad_level: Optional[int] = None,
    ):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.model = model
        self.basis = basis
        self.dt = dt
        self.quad = basis.tensor_quadrature(quad_level)
        self.n_state = model.n * basis.n_terms
        self.n_control = model.m

    def initial_state(self) -> np.ndarray:
        return project_initial(self.model.init_dists, self.basis).flatten()

    def step(self, x: np.ndarray, u, t: float) -> np.ndarray:
        def rhs(x_, u_, t_):
            coeffs = GpcCoefficients.from_flat(x_, self.model.n)
            return galerkin_rhs(self.model, coeffs, u_, t_, self.quad).flatten()

        return euler_step(rhs, x, u, t, self.dt)

    def linearize(self, x: np.ndarray, u, t: float, x_next=None) -> StepLinearization:
        coeffs = GpcCoefficients.from_flat(x, self.model.n)
        return euler_linearize(self.model, coeffs, u, t, self.dt, self.quad)

    def state_coefficients(self, x: np.ndarray) -> GpcCoefficients:
        """Physical-state chaos coefficients for moment reporting."""
        return GpcCoefficients.from_flat(x, self.model.n)


class DelStepper:
    """Variational-integrator discretization for mechanical models.

    Solver state is the stacked ``(Q, Phat)`` vector of length 2 N(K+1);
    the physical state ordering for reporting is (positions, velocities).
    """

    def __init__(
        self,
        model: StochasticModel,
        basis: PolynomialBasis,
        dt: float,
        quad_level: Optional[int] = None,
        newton: NewtonConfig = NewtonConfig(),
        zeta: float = 0.5,
    ):
        if model.mechanical is None:
            raise ValueError(f"model {model.name!r} has no mechanical description")
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.model = model
        self.basis = basis
        self.dt = dt
        self.newton = newton
        self.mechanics = GpcMechanics(
            model.mechanical, basis, basis.tensor_quadrature(quad_level), zeta=zeta
        )
        self.n_state = 2 * self.mechanics.n_half
        self.n_control = model.m

    def initial_state(self) -> np.ndarray:
        n_cfg = self.mechanics.n_cfg
        full = project_initial(self.model.init_dists, self.basis)
        q0 = full.coeffs[:n_cfg].reshape(-1)
        v0 = full.coeffs[n_cfg:].reshape(-1)
        phat0 = self.mechanics.project_momentum(q0, v0)
        return np.concatenate([q0, phat0])

    def step(self, x: np.ndarray, u, t: float) -> np.ndarray:
        nxt = del_step(self.mechanics, GpcDelState.from_concat(x), u, self.dt, self.newton)
        out = nxt.concat()
        if not np.all(np.isfinite(out)):
            raise NonFiniteDynamicsError("variational step produced a non-finite state")
        return out

    def linearize(self, x: np.ndarray, u, t: float, x_next=None) -> StepLinearization:
        state = GpcDelState.from_concat(x)
        q_next = None
        if x_next is not None:
            q_next = GpcDelState.from_concat(x_next).q
        return del_linearize(self.mechanics, state, u, self.dt, self.newton, q_next=q_next)

    def state_coefficients(self, x: np.ndarray) -> GpcCoefficients:
        state = GpcDelState.from_concat(x)
        v = self.mechanics.velocity_coefficients(state.q, state.phat)
        k1 = self.basis.n_terms
        n_cfg = self.mechanics.n_cfg
        return GpcCoefficients(
            np.vstack([state.q.reshape(n_cfg, k1), v.reshape(n_cfg, k1)])
        )
