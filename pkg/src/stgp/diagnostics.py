"""Posterior summaries: WAIC, index-function error, residuals, moment self-check."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import monobasis
from .errors import DomainError
from .model import ModelState, PanelDataset, residuals
from .monobasis import BasisSpec
from .sampler import SCALAR_FIELDS, PosteriorDraws
from .stdist import recover_delta_cardano, st_moments_23

DEFAULT_GRID = 1000
RESIDUAL_STATS = ("mean", "q25", "median", "q75", "std_q025", "std_q975")


@dataclass(frozen=True)
class WaicResult:
    waic: float
    p_waic: float
    lppd: float


def waic(loglik_matrix) -> WaicResult:
    """WAIC from a draws x units log-likelihood matrix (lower is better)."""
    ll = np.asarray(loglik_matrix, dtype=float)
    if ll.ndim != 2 or ll.shape[0] < 2:
        raise DomainError(f"need a 2-D matrix with at least two draws, got shape {ll.shape}")
    if not np.all(np.isfinite(ll)):
        raise DomainError("log-likelihood matrix has non-finite entries")
    lppd = float(np.sum(logsumexp(ll, axis=0) - np.log(ll.shape[0])))
    p_waic = float(np.sum(np.var(ll, axis=0, ddof=1)))
    return WaicResult(-2.0 * (lppd - p_waic), p_waic, lppd)


def index_draws(xi_draws, basis: BasisSpec, grid=DEFAULT_GRID):
    """g evaluated on a uniform grid for every draw; returns (grid, draws x grid)."""
    x = np.linspace(-1.0, 1.0, grid) if np.ndim(grid) == 0 else np.asarray(grid, dtype=float)
    xi_draws = np.atleast_2d(np.asarray(xi_draws, dtype=float))
    return x, np.array([monobasis.evaluate_index(x, xi, basis) for xi in xi_draws])


def index_mse(xi_draws, beta_draws, basis: BasisSpec, truth, grid=DEFAULT_GRID):
    """Mean squared difference between the posterior-mean g and ``truth`` on the grid.

    ``beta_draws`` is accepted for interface symmetry; g on a fixed grid
    depends on xi alone.
    """
    x, g = index_draws(xi_draws, basis, grid)
    return float(np.mean((g.mean(axis=0) - truth(x)) ** 2))


@dataclass(frozen=True)
class IndexBands:
    x: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


def index_bands(xi_draws, basis: BasisSpec, grid=DEFAULT_GRID, level=0.95) -> IndexBands:
    """Posterior mean of g and pointwise equal-tailed credible bands."""
    x, g = index_draws(xi_draws, basis, grid)
    tail = 0.5 * (1.0 - level)
    lo, hi = np.quantile(g, [tail, 1.0 - tail], axis=0)
    return IndexBands(x, g.mean(axis=0), lo, hi)


@dataclass(frozen=True)
class MomentCheck:
    delta_mean: float
    delta_recovered: float
    abs_error: float
    nu_used: int
    skipped: bool
    notice: str = ""


def _get(draws, name):
    if isinstance(draws, PosteriorDraws):
        return np.asarray(draws.scalars[name], dtype=float)
    return np.atleast_1d(np.asarray(draws[name], dtype=float))


def delta_moment_selfcheck(draws) -> MomentCheck:
    """Round trip delta -> (m2, m3) -> delta at the posterior mean.

    ``draws`` is a :class:`PosteriorDraws` or a mapping with ``delta``,
    ``sigma2``, ``d2`` and ``nu``.  The scale entering the moment formula
    is sigma2 + d2, and nu is rounded to the nearest integer; outside
    4..100 the check is skipped.
    """
    delta = float(np.mean(_get(draws, "delta")))
    scale2 = float(np.mean(_get(draws, "sigma2") + _get(draws, "d2")))
    nu_mean = float(np.mean(_get(draws, "nu")))
    if not np.isfinite(nu_mean):
        return MomentCheck(delta, float("nan"), float("nan"), -1, True, "nu is infinite")
    nu = int(round(nu_mean))
    if not 4 <= nu <= 100:
        return MomentCheck(delta, float("nan"), float("nan"), nu, True,
                           f"rounded nu = {nu} outside 4..100; check skipped")
    m2, m3 = st_moments_23(delta, scale2, nu)
    rec = recover_delta_cardano(m2, m3, nu)
    return MomentCheck(delta, rec, abs(rec - delta), nu, False)


def posterior_mean_state(draws: PosteriorDraws) -> ModelState:
    """State made of posterior means (beta direction averaged then renormalized)."""
    return ModelState(
        **{name: float(np.mean(draws.scalars[name])) for name in SCALAR_FIELDS},
        beta_raw=draws.beta.mean(axis=0),
        xi=draws.xi.mean(axis=0),
        lam=draws.lam.mean(axis=0),
        b=draws.b.mean(axis=0),
        s=draws.s.mean(axis=0),
        u=draws.u.mean(axis=0),
    )


def residual_report(dataset: PanelDataset, draws: PosteriorDraws, basis: BasisSpec):
    """Summary rows (stream, stat, value) of residuals at the posterior-mean state.

    Standardized residuals divide by sqrt(sigma2 / u_i).
    """
    state = posterior_mean_state(draws)
    res = residuals(dataset, state, basis)
    scale = np.sqrt(state.sigma2 / np.asarray(state.u))[dataset.packed.subject_of_row]
    rows = []
    for stream, r in (("pd", res.pd), ("cal", res.cal)):
        z = r / scale
        q25, med, q75 = np.quantile(r, [0.25, 0.5, 0.75])
        zlo, zhi = np.quantile(z, [0.025, 0.975])
        vals = dict(mean=float(np.mean(r)), q25=q25, median=med, q75=q75, std_q025=zlo, std_q975=zhi)
        rows.extend({"stream": stream, "stat": k, "value": float(vals[k])} for k in RESIDUAL_STATS)
    return rows
