"""Univariate orthogonal polynomials, Gauss quadrature, and multi-index bookkeeping.

Two families are supported:

* probabilists' Hermite, orthogonal w.r.t. the standard normal density on
  (-inf, inf), with ``<phi_i, phi_i> = i!``;
* Legendre, orthogonal w.r.t. the constant weight 1 on [-1, 1], with
  ``<phi_i, phi_i> = 2 / (2i + 1)``.

Both conventions are unnormalized: the weight mass is 1 for Hermite and 2 for
Legendre.  Multivariate bases are tensor products of univariate polynomials
indexed by total-degree-bounded multi-indices in graded lexicographic order.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from itertools import product
from typing import Sequence

import numpy as np
from scipy.linalg import eigh_tridiagonal

__all__ = [
    "PolyFamily",
    "QuadratureRule",
    "MultiIndexSet",
    "eval_poly",
    "norm_sq",
    "weight_mass",
    "product_integral",
    "hermite_triple_product",
    "gauss_rule",
    "multi_indices",
    "tensor_basis_eval",
]


class PolyFamily(enum.Enum):
    """Orthogonal polynomial family tag."""

    HERMITE_PROBABILISTS = "hermite"
    LEGENDRE = "legendre"


def eval_poly(family: PolyFamily, degree: int, point):
    """Evaluate the degree-``degree`` polynomial of ``family`` at ``point``.

    Uses the three-term recurrences
    ``He_{n+1} = x He_n - n He_{n-1}`` and
    ``(n+1) P_{n+1} = (2n+1) x P_n - n P_{n-1}``.
    Accepts scalars or arrays.
    """
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    x = np.asarray(point, dtype=float)
    p_prev = np.ones_like(x)
    if degree == 0:
        return p_prev if p_prev.ndim else float(p_prev)
    p = x.copy()
    for n in range(1, degree):
        if family is PolyFamily.HERMITE_PROBABILISTS:
            p, p_prev = x * p - n * p_prev, p
        else:
            p, p_prev = ((2 * n + 1) * x * p - n * p_prev) / (n + 1), p
    return p if p.ndim else float(p)


def norm_sq(family: PolyFamily, degree: int) -> float:
    """Squared norm ``<phi_d, phi_d>`` under the family's weight convention."""
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    if family is PolyFamily.HERMITE_PROBABILISTS:
        return float(math.factorial(degree))
    return 2.0 / (2 * degree + 1)


def weight_mass(family: PolyFamily) -> float:
    """Total weight ``integral of rho`` (1 for Hermite, 2 for Legendre)."""
    return 1.0 if family is PolyFamily.HERMITE_PROBABILISTS else 2.0


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss rule: exact for polynomials of degree <= 2 * n_nodes - 1."""

    nodes: np.ndarray
    weights: np.ndarray
    family: PolyFamily
    n_nodes: int

    def integrate(self, values: np.ndarray) -> float:
        """Weighted sum of integrand values sampled at ``self.nodes``."""
        return float(np.dot(self.weights, values))


def gauss_rule(family: PolyFamily, n_nodes: int) -> QuadratureRule:
    """Gauss quadrature from the symmetric tridiagonal recurrence matrix.

    Off-diagonal entries are ``sqrt(n)`` for probabilists' Hermite and
    ``n / sqrt(4 n^2 - 1)`` for Legendre; the weights are the squared first
    eigenvector components scaled by the weight mass.
    """
    if n_nodes < 1:
        raise ValueError("n_nodes must be positive")
    mass = weight_mass(family)
    if n_nodes == 1:
        return QuadratureRule(np.zeros(1), np.array([mass]), family, 1)
    k = np.arange(1, n_nodes, dtype=float)
    if family is PolyFamily.HERMITE_PROBABILISTS:
        off_diag = np.sqrt(k)
    else:
        off_diag = k / np.sqrt(4.0 * k * k - 1.0)
    nodes, vectors = eigh_tridiagonal(np.zeros(n_nodes), off_diag)
    weights = mass * vectors[0] ** 2
    # Both rules are symmetric about zero; enforce the symmetry bitwise so
    # odd integrands cancel as exactly as summation allows.
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    if n_nodes % 2 == 1:
        nodes[n_nodes // 2] = 0.0
    return QuadratureRule(nodes, weights, family, n_nodes)


def product_integral(family: PolyFamily, degrees: Sequence[int]) -> float:
    """Integral of a product of family polynomials against the weight.

    The rule size is chosen so the polynomial integrand is integrated
    exactly: ``n_nodes >= ceil((sum(degrees) + 1) / 2)``.
    """
    degrees = list(degrees)
    if not degrees:
        raise ValueError("degrees must be non-empty")
    total = sum(degrees)
    rule = gauss_rule(family, max(1, -(-(total + 1) // 2)))
    values = np.ones_like(rule.nodes)
    for d in degrees:
        values = values * eval_poly(family, d, rule.nodes)
    return rule.integrate(values)


def hermite_triple_product(i: int, j: int, g: int) -> float:
    """Closed-form ``<phi_i, phi_j, phi_g>`` for probabilists' Hermite.

    Nonzero only when i + j + g is even and s = (i + j + g) / 2 >= max(i, j, g);
    then it equals i! j! g! / ((s-i)! (s-j)! (s-g)!).
    """
    total = i + j + g
    if total % 2 != 0:
        return 0.0
    s = total // 2
    if s < max(i, j, g):
        return 0.0
    return (
        math.factorial(i) * math.factorial(j) * math.factorial(g)
        / (math.factorial(s - i) * math.factorial(s - j) * math.factorial(s - g))
    )


@dataclass(frozen=True)
class MultiIndexSet:
    """All d-tuples with total degree <= r, graded lexicographic order."""

    d: int
    r: int
    indices: tuple = field(default=())

    def __len__(self) -> int:
        return len(self.indices)

    def __getitem__(self, j: int):
        return self.indices[j]

    def __iter__(self):
        return iter(self.indices)


def multi_indices(d: int, r: int) -> MultiIndexSet:
    """Build the total-degree-bounded multi-index set.

    Cardinality is ``(r + d)! / (r! d!)``; the first element is all zeros.
    ``d == 0`` is the deterministic degenerate case with the single empty
    tuple.
    """
    if d < 0 or r < 0:
        raise ValueError("d and r must be nonnegative")
    all_tuples = [t for t in product(range(r + 1), repeat=d) if sum(t) <= r]
    all_tuples.sort(key=lambda t: (sum(t), t))
    return MultiIndexSet(d=d, r=r, indices=tuple(all_tuples))


def tensor_basis_eval(families: Sequence[PolyFamily], index, xi) -> float:
    """Evaluate a tensor-product basis function at the d-vector ``xi``."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    if len(index) != len(families) or xi.shape[-1] != len(families):
        raise ValueError("index, families, and xi dimensions must agree")
    out = 1.0
    for fam, deg, component in zip(families, index, xi):
        out = out * eval_poly(fam, deg, component)
    return float(out)
