"""Intrusive polynomial-chaos representation of a stochastic state.

A scalar random input is mapped onto one standard random dimension
(Gaussian -> Hermite dimension with ``value = mean + std * xi``,
Uniform -> Legendre dimension with ``value = mid + half_width * xi``).
The state is expanded in the tensorized basis ``phi_j`` over all input
dimensions; coefficients are stored as an ``n x (K+1)`` matrix whose
C-order flattening gives the state-major layout
``(x_10, ..., x_1K, ..., x_n0, ..., x_nK)``.

Projection integrals use the unnormalized weight convention of
:mod:`pctraj.orthopoly` (ratios make the weight mass cancel); statistical
moments use probability-normalized expectations, i.e. inner products divided
by the total weight mass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .orthopoly import (
    MultiIndexSet,
    PolyFamily,
    eval_poly,
    gauss_rule,
    multi_indices,
    norm_sq,
    product_integral,
    weight_mass,
)

__all__ = [
    "Gaussian",
    "Uniform",
    "Deterministic",
    "InputDistribution",
    "PolynomialBasis",
    "TensorQuadrature",
    "GpcCoefficients",
    "NonFiniteDynamicsError",
    "project_initial",
    "reconstruct_sample",
    "moment",
    "galerkin_rhs",
    "gpc_jacobian",
    "gpc_hessian",
    "sample_inputs",
]


@dataclass(frozen=True)
class Gaussian:
    mean: float
    std: float

    def __post_init__(self):
        if self.std < 0:
            raise ValueError("std must be nonnegative")


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError("low must be < high")


@dataclass(frozen=True)
class Deterministic:
    value: float


InputDistribution = Gaussian | Uniform | Deterministic


def _family_of(dist) -> Optional[PolyFamily]:
    if isinstance(dist, Gaussian):
        return PolyFamily.HERMITE_PROBABILISTS
    if isinstance(dist, Uniform):
        return PolyFamily.LEGENDRE
    if isinstance(dist, Deterministic):
        return None
    raise TypeError(f"unsupported distribution {dist!r}")


def _affine_of(dist) -> tuple[float, float]:
    """Offset and slope mapping the standard variable onto the input."""
    if isinstance(dist, Gaussian):
        return dist.mean, dist.std
    if isinstance(dist, Uniform):
        return 0.5 * (dist.low + dist.high), 0.5 * (dist.high - dist.low)
    return dist.value, 0.0


class NonFiniteDynamicsError(RuntimeError):
    """Raised when a dynamics evaluation at a quadrature node is not finite."""


class PolynomialBasis:
    """Tensorized basis over the stochastic dimensions of one model.

    Parameter inputs occupy the leading dimensions of ``xi`` and
    initial-state inputs the trailing ones; deterministic inputs consume no
    dimension.  The index set is graded lexicographic, so index 0 is the
    constant function.
    """

    def __init__(self, param_dists: Sequence, init_dists: Sequence, order: int):
        self.param_dists = tuple(param_dists)
        self.init_dists = tuple(init_dists)
        self.order = int(order)

        families: list[PolyFamily] = []
        param_dims: list[Optional[int]] = []
        for dist in self.param_dists:
            fam = _family_of(dist)
            if fam is None:
                param_dims.append(None)
            else:
                param_dims.append(len(families))
                families.append(fam)
        self.d_param = len(families)
        init_dims: list[Optional[int]] = []
        for dist in self.init_dists:
            fam = _family_of(dist)
            if fam is None:
                init_dims.append(None)
            else:
                init_dims.append(len(families))
                families.append(fam)
        self.d_init = len(families) - self.d_param

        self.families = tuple(families)
        self.param_dims = tuple(param_dims)
        self.init_dims = tuple(init_dims)
        self.d = self.d_param + self.d_init
        self.index_set: MultiIndexSet = multi_indices(self.d, self.order)
        self.n_terms = len(self.index_set)

        self.norms = np.array(
            [
                np.prod([norm_sq(f, deg) for f, deg in zip(self.families, idx)])
                if self.d
                else 1.0
                for idx in self.index_set
            ]
        )
        self.mass = float(np.prod([weight_mass(f) for f in self.families])) if self.d else 1.0
        # Probability-normalized squared norms: E[phi_j^2] with E[phi_0^2] = 1.
        self.norms_expect = self.norms / self.mass
        self._quad_cache: dict[int, TensorQuadrature] = {}
        self._triple_cache: Optional[np.ndarray] = None
        self._adjunct: dict = {}  # scratch for model-specific precomputations

    def basis_eval(self, j: int, xi) -> float:
        """phi_j at one point of the stochastic domain."""
        return float(self.basis_matrix(np.atleast_2d(np.asarray(xi, float)))[0, j])

    def basis_matrix(self, xi: np.ndarray) -> np.ndarray:
        """Rows ``phi_j(xi_m)`` for a batch of points, shape (M, K+1)."""
        xi = np.asarray(xi, dtype=float)
        if self.d == 0:
            return np.ones((xi.shape[0] if xi.ndim else 1, 1))
        if xi.ndim == 1:
            xi = xi[None, :]
        # Univariate values up to the truncation order, per dimension.
        uni = [
            np.stack([eval_poly(f, deg, xi[:, i]) for deg in range(self.order + 1)], axis=1)
            for i, f in enumerate(self.families)
        ]
        cols = []
        for idx in self.index_set:
            col = np.ones(xi.shape[0])
            for i, deg in enumerate(idx):
                col = col * uni[i][:, deg]
            cols.append(col)
        return np.stack(cols, axis=1)

    def default_quad_level(self) -> int:
        return max(3, self.order + 1)

    def tensor_quadrature(self, level: Optional[int] = None) -> "TensorQuadrature":
        lvl = self.default_quad_level() if level is None else int(level)
        if lvl not in self._quad_cache:
            self._quad_cache[lvl] = TensorQuadrature(self, lvl)
        return self._quad_cache[lvl]

    def param_values(self, xi: np.ndarray) -> np.ndarray:
        """Realized parameter vector(s) at the given standard points."""
        xi = np.asarray(xi, dtype=float)
        squeeze = xi.ndim == 1
        if squeeze:
            xi = xi[None, :]
        out = np.empty((xi.shape[0], len(self.param_dists)))
        for k, (dist, dim) in enumerate(zip(self.param_dists, self.param_dims)):
            offset, slope = _affine_of(dist)
            out[:, k] = offset if dim is None else offset + slope * xi[:, dim]
        return out[0] if squeeze else out

    def triple_expectations(self) -> np.ndarray:
        """Tensor ``E[phi_j phi_g phi_l]`` of shape (K+1,)*3 (normalized)."""
        if self._triple_cache is None:
            k1 = self.n_terms
            uni: dict[tuple[int, int, int, int], float] = {}

            def uni_triple(dim, a, b, c):
                key = (dim, *sorted((a, b, c)))
                if key not in uni:
                    uni[key] = product_integral(self.families[dim], [a, b, c])
                return uni[key]

            out = np.empty((k1, k1, k1))
            for j, idx_j in enumerate(self.index_set):
                for g, idx_g in enumerate(self.index_set):
                    for l, idx_l in enumerate(self.index_set):
                        val = 1.0
                        for dim in range(self.d):
                            val *= uni_triple(dim, idx_j[dim], idx_g[dim], idx_l[dim])
                        out[j, g, l] = val
            self._triple_cache = out / self.mass
        return self._triple_cache


class TensorQuadrature:
    """Full tensor-product Gauss rule over all stochastic dimensions.

    Carries the evaluated basis matrix so Galerkin projections reduce to
    weighted matrix products.  Weights follow the unnormalized convention
    (they sum to the total weight mass).
    """

    def __init__(self, basis: PolynomialBasis, level: int):
        if level < 1:
            raise ValueError("quadrature level must be positive")
        self.basis = basis
        self.level = level
        if basis.d == 0:
            self.nodes = np.zeros((1, 0))
            self.weights = np.ones(1)
        else:
            rules = [gauss_rule(f, level) for f in basis.families]
            grids = np.meshgrid(*[r.nodes for r in rules], indexing="ij")
            self.nodes = np.stack([g.ravel() for g in grids], axis=1)
            wgrids = np.meshgrid(*[r.weights for r in rules], indexing="ij")
            self.weights = np.ones(self.nodes.shape[0])
            for w in wgrids:
                self.weights = self.weights * w.ravel()
        self.n_nodes = self.nodes.shape[0]
        self.phi = basis.basis_matrix(self.nodes)
        # Projection matrix: coeffs = values @ proj, absorbing weights/norms.
        self.proj = (self.weights[:, None] * self.phi) / basis.norms[None, :]


@dataclass
class GpcCoefficients:
    """Chaos coefficients of an n-dimensional state at one time instant."""

    coeffs: np.ndarray  # (n, K+1)

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.ndim != 2:
            raise ValueError("coeffs must be an n x (K+1) matrix")

    @property
    def n(self) -> int:
        return self.coeffs.shape[0]

    @property
    def n_terms(self) -> int:
        return self.coeffs.shape[1]

    def flatten(self) -> np.ndarray:
        """State-major vector of length n * (K+1)."""
        return self.coeffs.reshape(-1).copy()

    @classmethod
    def from_flat(cls, flat: np.ndarray, n: int) -> "GpcCoefficients":
        flat = np.asarray(flat, dtype=float)
        return cls(flat.reshape(n, -1))


def project_initial(dists: Sequence, basis: PolynomialBasis) -> GpcCoefficients:
    """Chaos coefficients of the initial state from its input distributions.

    Each stochastic entry is affine in its own standard dimension, so it
    contributes its offset on index 0 and its slope on the first-degree index
    of the bound dimension.
    """
    if len(dists) != len(basis.init_dists):
        raise ValueError("distribution count does not match the basis binding")
    coeffs = np.zeros((len(dists), basis.n_terms))
    for i, (dist, dim) in enumerate(zip(dists, basis.init_dims)):
        if _family_of(dist) != (None if dim is None else basis.families[dim]):
            raise ValueError(
                f"distribution {dist!r} does not match the family bound to its dimension"
            )
        offset, slope = _affine_of(dist)
        coeffs[i, 0] = offset
        if dim is not None and basis.order >= 1:
            unit = tuple(1 if k == dim else 0 for k in range(basis.d))
            j = basis.index_set.indices.index(unit)
            coeffs[i, j] = slope
    return GpcCoefficients(coeffs)


def reconstruct_sample(X: GpcCoefficients, xi, basis: PolynomialBasis) -> np.ndarray:
    """Realized state ``x_i = sum_j X_ij phi_j(xi)`` at one (or many) points."""
    xi = np.asarray(xi, dtype=float)
    phi = basis.basis_matrix(xi if xi.ndim == 2 else xi[None, :] if basis.d else xi)
    values = phi @ X.coeffs.T
    return values[0] if (xi.ndim == 1 or basis.d == 0) else values


def moment(X: GpcCoefficients, i: int, order: int, basis: PolynomialBasis) -> float:
    """Mean, variance, or third central moment of state component ``i``.

    Order 1 is the zero-index coefficient; order 2 is
    ``sum_{j>=1} X_ij^2 E[phi_j^2]``; order 3 is the centered triple sum
    ``sum_{j,g,l>=1} X_ij X_ig X_il E[phi_j phi_g phi_l]``.
    """
    c = X.coeffs[i]
    if order == 1:
        return float(c[0])
    if order == 2:
        return float(np.sum(c[1:] ** 2 * basis.norms_expect[1:]))
    if order == 3:
        t = basis.triple_expectations()[1:, 1:, 1:]
        return float(np.einsum("j,g,l,jgl->", c[1:], c[1:], c[1:], t))
    raise ValueError("order must be 1, 2, or 3")


def _states_at_nodes(X: GpcCoefficients, quad: TensorQuadrature) -> np.ndarray:
    return quad.phi @ X.coeffs.T  # (M, n)


def _check_finite(values: np.ndarray, what: str):
    if not np.all(np.isfinite(values)):
        bad = int(np.argwhere(~np.isfinite(values))[0][0])
        raise NonFiniteDynamicsError(f"{what} is not finite at quadrature node {bad}")


def galerkin_rhs(model, X: GpcCoefficients, u, t: float, quad: TensorQuadrature) -> GpcCoefficients:
    """Coefficient time-derivative by Galerkin projection of the dynamics.

    ``Xdot_ij = sum_m w_m f_i(x(xi_m), u, t, lam(xi_m)) phi_j(xi_m) / <phi_j, phi_j>``.
    """
    basis = quad.basis
    x_nodes = _states_at_nodes(X, quad)
    lam_nodes = basis.param_values(quad.nodes)
    f_nodes = model.f(x_nodes, np.asarray(u, dtype=float), t, lam_nodes)
    _check_finite(f_nodes, "dynamics evaluation")
    return GpcCoefficients(f_nodes.T @ quad.proj)


def gpc_jacobian(model, X: GpcCoefficients, u, t: float, quad: TensorQuadrature):
    """Jacobian of the projected dynamics w.r.t. the flattened coefficients.

    Returns ``(J, Ju)`` with ``J`` of shape (n(K+1), n(K+1)) and ``Ju`` of
    shape (n(K+1), m).  Entry ((i,j),(g,h)) integrates
    ``df_i/dx_g phi_h phi_j / <phi_j, phi_j>``.
    """
    basis = quad.basis
    n, k1 = X.coeffs.shape
    x_nodes = _states_at_nodes(X, quad)
    u = np.asarray(u, dtype=float)
    lam_nodes = basis.param_values(quad.nodes)
    fx_nodes = model.fx(x_nodes, u, t, lam_nodes)  # (M, n, n)
    fu_nodes = model.fu(x_nodes, u, t, lam_nodes)  # (M, n, m)
    _check_finite(fx_nodes, "state Jacobian")
    _check_finite(fu_nodes, "control Jacobian")
    w_over = quad.proj  # (M, K+1), carries weights / norms on the j axis
    jac = np.einsum("mig,mj,mh->ijgh", fx_nodes, w_over, quad.phi, optimize=True)
    jac_u = np.einsum("mic,mj->ijc", fu_nodes, w_over, optimize=True)
    return jac.reshape(n * k1, n * k1), jac_u.reshape(n * k1, -1)


def gpc_hessian(model, X: GpcCoefficients, u, t: float, quad: TensorQuadrature):
    """Second derivatives of the projected dynamics.

    Returns ``(Hxx, Hxu, Huu)`` with shapes (ns, ns, ns), (ns, ns, m), and
    (ns, m, m) where ns = n(K+1); axis 0 indexes the output component.
    """
    basis = quad.basis
    n, k1 = X.coeffs.shape
    x_nodes = _states_at_nodes(X, quad)
    u = np.asarray(u, dtype=float)
    m_ctrl = u.shape[0]
    lam_nodes = basis.param_values(quad.nodes)
    fxx = model.fxx(x_nodes, u, t, lam_nodes)  # (M, n, n, n)
    fxu = model.fxu(x_nodes, u, t, lam_nodes)  # (M, n, n, m)
    fuu = model.fuu(x_nodes, u, t, lam_nodes)  # (M, n, m, m)
    for arr, name in ((fxx, "state Hessian"), (fxu, "mixed Hessian"), (fuu, "control Hessian")):
        _check_finite(arr, name)
    w_over = quad.proj
    ns = n * k1
    hxx = np.einsum("migs,mj,mh,md->ijghsd", fxx, w_over, quad.phi, quad.phi, optimize=True)
    hxu = np.einsum("migc,mj,mh->ijghc", fxu, w_over, quad.phi, optimize=True)
    huu = np.einsum("micd,mj->ijcd", fuu, w_over, optimize=True)
    return (
        hxx.reshape(ns, ns, ns),
        hxu.reshape(ns, ns, m_ctrl),
        huu.reshape(ns, m_ctrl, m_ctrl),
    )


def sample_inputs(basis: PolynomialBasis, n_samples: int, rng: np.random.Generator):
    """Draw standard-variable samples and the induced (lambda, x0) realizations.

    Returns ``(xi, lam, x0)``; ``x0`` rows follow the initial-state
    distribution list (deterministic entries are constant columns).
    """
    xi = np.empty((n_samples, basis.d))
    for dim, fam in enumerate(basis.families):
        if fam is PolyFamily.HERMITE_PROBABILISTS:
            xi[:, dim] = rng.standard_normal(n_samples)
        else:
            xi[:, dim] = rng.uniform(-1.0, 1.0, n_samples)
    lam = basis.param_values(xi) if basis.param_dists else np.zeros((n_samples, 0))
    x0 = np.empty((n_samples, len(basis.init_dists)))
    for i, (dist, dim) in enumerate(zip(basis.init_dists, basis.init_dims)):
        offset, slope = _affine_of(dist)
        x0[:, i] = offset if dim is None else offset + slope * xi[:, dim]
    return xi, lam, x0
