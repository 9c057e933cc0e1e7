"""Integrated hat-function basis for monotone index functions.

On the regular knot grid -1 = u_0 < ... < u_L = 1 the index function is

    g(x) = sum_k xi_k psi_k(x),   psi_k(x) = int_{-1}^x h_k(t) dt,

where h_k are the piecewise-linear hat functions.  ``xi >= 0`` is exactly
the condition for g to be nondecreasing, and g(-1) = 0 by construction.
The coefficients carry a truncated Gaussian prior whose covariance is the
Matern-3/2 kernel evaluated on the knots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import ConstraintViolationError, DomainError, NotPositiveDefiniteError

DEFAULT_L = 25
JITTER = 1e-8
_EDGE_TOL = 1e-12


@dataclass(frozen=True)
class BasisSpec:
    """Equally spaced knots on [-1, 1] with ``L`` intervals."""

    L: int = DEFAULT_L
    knots: np.ndarray = field(init=False, repr=False)
    spacing: float = field(init=False)

    def __post_init__(self):
        if int(self.L) != self.L or self.L < 2:
            raise DomainError(f"L must be an integer >= 2, got {self.L}")
        knots = np.linspace(-1.0, 1.0, int(self.L) + 1)
        knots[0], knots[-1] = -1.0, 1.0
        object.__setattr__(self, "L", int(self.L))
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "spacing", 2.0 / self.L)

    @property
    def size(self):
        """Number of basis functions, L + 1."""
        return self.L + 1


@dataclass(frozen=True)
class KernelParams:
    """Matern kernel scale ``rho1_sq`` and range ``rho2``; smoothness fixed at 3/2."""

    rho1_sq: float
    rho2: float
    rho3: float = field(default=1.5, init=False)

    def __post_init__(self):
        if not (self.rho1_sq > 0 and self.rho2 > 0):
            raise DomainError(f"kernel parameters must be positive, got {self.rho1_sq}, {self.rho2}")


def _check_domain(x):
    x = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(x)) or np.any(x < -1 - _EDGE_TOL) or np.any(x > 1 + _EDGE_TOL):
        bad = x[(x < -1 - _EDGE_TOL) | (x > 1 + _EDGE_TOL) | ~np.isfinite(x)]
        raise DomainError(f"index values must lie in [-1, 1]; got e.g. {bad.ravel()[0]!r}")
    return np.clip(x, -1.0, 1.0)


def _check_k(k, spec):
    if not 0 <= k <= spec.L:
        raise DomainError(f"basis index k must be in 0..{spec.L}, got {k}")


def hat(k, x, spec: BasisSpec):
    """Piecewise-linear hat function centred at knot ``k``."""
    _check_k(k, spec)
    x = _check_domain(x)
    val = 1.0 - np.abs(x - spec.knots[k]) / spec.spacing
    return np.maximum(val, 0.0)


def _psi_columns(x, ks, spec):
    # rising ramp on [u_{k-1}, u_k], falling ramp on [u_k, u_{k+1}]
    d = spec.spacing
    ks = np.asarray(ks)
    u = spec.knots[ks]
    x = x[..., None]
    rise = np.clip(x - (u - d), 0.0, d)
    fall = np.clip(x - u, 0.0, d)
    out = np.where(ks >= 1, rise * rise / (2 * d), 0.0)
    out = out + np.where(ks <= spec.L - 1, fall - fall * fall / (2 * d), 0.0)
    return out


def psi(k, x, spec: BasisSpec):
    """Integral of ``hat(k, .)`` over [-1, x]."""
    _check_k(k, spec)
    x = _check_domain(x)
    return _psi_columns(np.asarray(x), [k], spec)[..., 0]


def design_matrix(index_values, spec: BasisSpec):
    """Matrix with entry (j, k) = psi_k(index_values[j]); shape (n, L + 1)."""
    return design_matrix_unchecked(_check_domain(np.atleast_1d(index_values)), spec)


def design_matrix_unchecked(x, spec: BasisSpec):
    """Fast design matrix for values already in [-1, 1].

    For x in [u_j, u_{j+1}] with t = x - u_j, every column k < j is
    saturated, columns j and j + 1 are partial and the rest are zero.
    """
    d = spec.spacing
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    j = np.minimum(((x + 1.0) / d).astype(np.intp), spec.L - 1)
    t = x - spec.knots[j]
    k = np.arange(spec.size)
    out = np.where(k[None, :] < j[:, None], d, 0.0)
    out[:, 0] *= 0.5
    rows = np.arange(n)
    out[rows, j] = np.where(j >= 1, 0.5 * d, 0.0) + t - t * t / (2 * d)
    out[rows, j + 1] = t * t / (2 * d)
    return out


def _check_xi(xi, spec):
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (spec.size,):
        raise DomainError(f"xi must have length {spec.size}, got shape {xi.shape}")
    if np.any(xi < 0):
        raise ConstraintViolationError("basis weights xi must be nonnegative")
    return xi


def knot_values(xi, spec: BasisSpec):
    """g at every knot: cumulative trapezoid of the piecewise-linear slope."""
    xi = np.asarray(xi, dtype=float)
    out = np.zeros(spec.size)
    out[1:] = np.cumsum(0.5 * spec.spacing * (xi[:-1] + xi[1:]))
    return out


def evaluate_index(x, xi, spec: BasisSpec):
    """g(x) = sum_k xi_k psi_k(x) for nonnegative ``xi``."""
    xi = _check_xi(xi, spec)
    return eval_index_unchecked(_check_domain(x), xi, spec)


def eval_index_unchecked(x, xi, spec: BasisSpec):
    """Fast O(n) evaluation of g on values already known to lie in [-1, 1]."""
    x = np.asarray(x, dtype=float)
    d = spec.spacing
    j = np.minimum(((x + 1.0) / d).astype(np.intp), spec.L - 1)
    t = x - spec.knots[j]
    g_knots = knot_values(xi, spec)
    return g_knots[j] + xi[j] * t + (xi[j + 1] - xi[j]) * t * t / (2 * d)


def matern32(r, kp: KernelParams):
    """rho1^2 (1 + sqrt(3) r / rho2) exp(-sqrt(3) r / rho2)."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise DomainError("distance must be nonnegative")
    s = math.sqrt(3.0) * r / kp.rho2
    return kp.rho1_sq * (1.0 + s) * np.exp(-s)


def kernel_matrix(spec: BasisSpec, kp: KernelParams):
    """Toeplitz Matern-3/2 covariance on the knots, with diagonal jitter."""
    col = matern32(spec.knots - spec.knots[0], kp)
    col[0] += JITTER * kp.rho1_sq
    return linalg.toeplitz(col)


def kernel_cholesky(spec: BasisSpec, kp: KernelParams):
    """Lower Cholesky factor of :func:`kernel_matrix`."""
    try:
        return linalg.cholesky(kernel_matrix(spec, kp), lower=True)
    except linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(
            f"Matern kernel not positive definite (L={spec.L}, rho1_sq={kp.rho1_sq}, rho2={kp.rho2})"
        ) from exc
