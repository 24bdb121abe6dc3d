"""Trajectory optimization under parametric uncertainty.

Random model parameters and initial conditions are expanded in polynomials
orthogonal to their densities; Galerkin projection turns the stochastic
dynamics into a deterministic ODE for the expansion coefficients, whose
moments are analytic.  A differential-dynamic-programming solver optimizes
moment-based objectives over that coefficient system, stepping either with
explicit Euler or with a variational integrator for mechanical systems.
"""

__version__ = "0.1.0"

from . import cost, ddp, discretize, gpc, models, orthopoly, verify  # noqa: F401
from .gpc import (  # noqa: F401
    Deterministic,
    Gaussian,
    GpcCoefficients,
    PolynomialBasis,
    Uniform,
    galerkin_rhs,
    moment,
    project_initial,
    reconstruct_sample,
)
from .models import duffing, quadrotor  # noqa: F401
