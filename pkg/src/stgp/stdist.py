"""Skew-t family: sampling, density, linear closure and moment algebra.

The skew-t law ST_p(mu, Omega, delta, nu) is the law of

    Y = mu + U^{-1/2} (delta |X0| + X1),

with X0 ~ N(0, 1), X1 ~ N_p(0, Omega) and U ~ Gamma(nu/2, nu/2), all
independent.  ``nu = inf`` gives the skew-normal limit (U == 1).

Auxiliary samplers used by the Gibbs sweep (half normal, gamma, inverse
gamma, positive truncated normal and the exact-HMC truncated multivariate
normal) also live here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import (betainc, gammainc, gammaincc, gammainccinv, gammaincinv, gammaln,
                           log_ndtr, ndtri_exp)

from .errors import DomainError, NotPositiveDefiniteError

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
LOG2 = math.log(2.0)

# exact-HMC defaults
HMC_TRAVEL_TIME = math.pi / 2
HMC_MAX_WALL_HITS = 10**6
_HMC_MIN_HIT_TIME = 1e-10


def _cholesky(mat, what="matrix"):
    try:
        return linalg.cholesky(mat, lower=True)
    except linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"{what} is not positive definite") from exc


# ---------------------------------------------------------------------------
# Gamma-mixing constants
# ---------------------------------------------------------------------------


def h_of_nu(nu):
    """Location shift that centres the skew-t random effect.

    h(nu) = -sqrt(nu/pi) Gamma((nu-1)/2) / Gamma(nu/2), evaluated through
    log-gamma.  The ``nu -> inf`` limit is -sqrt(2/pi).
    """
    nu = float(nu)
    if not nu > 1.0:
        raise DomainError(f"h(nu) requires nu > 1, got {nu}")
    if math.isinf(nu):
        return -SQRT_2_OVER_PI
    return -math.exp(0.5 * math.log(nu / math.pi) + gammaln(0.5 * nu - 0.5) - gammaln(0.5 * nu))


@dataclass(frozen=True)
class GammaMoments:
    """Negative half-integer moments of U ~ Gamma(nu/2, nu/2).

    ``m1 = E U^{-1/2}``, ``m2 = E U^{-1}``, ``m3 = E U^{-3/2}``.  A moment
    that does not exist for the given ``nu`` is NaN.
    """

    m1: float
    m2: float
    m3: float
    nu: float

    @property
    def has_m2(self):
        return not math.isnan(self.m2)

    @property
    def has_m3(self):
        return not math.isnan(self.m3)


def _neg_moment(nu, k):
    # E U^{-k/2} = (nu/2)^{k/2} Gamma(nu/2 - k/2) / Gamma(nu/2)
    if math.isinf(nu):
        return 1.0
    half = 0.5 * nu
    if half - 0.5 * k <= 0:
        return math.nan
    return math.exp(0.5 * k * math.log(half) + gammaln(half - 0.5 * k) - gammaln(half))


def gamma_neg_moments(nu):
    nu = float(nu)
    if not nu > 1.0:
        raise DomainError(f"E U^(-1/2) requires nu > 1, got {nu}")
    m2 = math.nan if nu <= 2 else (1.0 if math.isinf(nu) else (0.5 * nu) / (0.5 * nu - 1.0))
    return GammaMoments(m1=_neg_moment(nu, 1), m2=m2, m3=_neg_moment(nu, 3), nu=nu)


# ---------------------------------------------------------------------------
# Skew-t parameters, sampling and density
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StParams:
    """Parameters of ST_p(location, scale, skewness, dof)."""

    location: np.ndarray
    scale: np.ndarray
    skewness: np.ndarray
    dof: float

    def __post_init__(self):
        loc = np.atleast_1d(np.asarray(self.location, dtype=float))
        scale = np.atleast_2d(np.asarray(self.scale, dtype=float))
        skew = np.atleast_1d(np.asarray(self.skewness, dtype=float))
        p = loc.shape[0]
        if loc.ndim != 1 or p < 1:
            raise DomainError("location must be a non-empty vector")
        if scale.shape != (p, p) or skew.shape != (p,):
            raise DomainError(f"inconsistent shapes: location {loc.shape}, scale {scale.shape}, skewness {skew.shape}")
        if not np.allclose(scale, scale.T, rtol=1e-10, atol=1e-12):
            raise DomainError("scale matrix must be symmetric")
        if not float(self.dof) > 2.0:
            raise DomainError(f"dof must exceed 2, got {self.dof}")
        object.__setattr__(self, "location", loc)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "skewness", skew)
        object.__setattr__(self, "dof", float(self.dof))

    @property
    def dim(self):
        return self.location.shape[0]

    @property
    def sigma(self):
        """Sigma = Omega + delta delta^T."""
        return self.scale + np.outer(self.skewness, self.skewness)


def sample_st(params: StParams, rng: np.random.Generator, size=None):
    """Draw from the skew-t law by its stochastic representation.

    Returns an array of shape ``(p,)`` when ``size`` is None, otherwise
    ``(size, p)``.
    """
    chol = _cholesky(params.scale, "scale matrix")
    n = 1 if size is None else int(size)
    p = params.dim
    x0 = np.abs(rng.standard_normal(n))
    x1 = rng.standard_normal((n, p)) @ chol.T
    if math.isinf(params.dof):
        w = np.ones(n)
    else:
        w = rng.gamma(0.5 * params.dof, 2.0 / params.dof, size=n) ** -0.5
    out = params.location + w[:, None] * (x0[:, None] * params.skewness + x1)
    return out[0] if size is None else out


def _t_lower_tail(x, dof):
    # P(T < -|x|); near the centre dof / (dof + x^2) rounds to 1, so use the
    # complementary incomplete beta there
    x2 = x * x
    den = dof + x2
    far = 0.5 * betainc(0.5 * dof, 0.5, dof / den)
    near = 0.5 - 0.5 * betainc(0.5, 0.5 * dof, x2 / den)
    return np.where(x2 < dof, near, far)


def student_t_cdf(x, dof):
    """Univariate Student-t cdf via the regularized incomplete beta function."""
    x = np.asarray(x, dtype=float)
    dof = float(dof)
    if not dof > 0:
        raise DomainError(f"dof must be positive, got {dof}")
    if math.isinf(dof):
        return np.exp(log_ndtr(x))
    tail = _t_lower_tail(x, dof)
    return np.where(x < 0, tail, 1.0 - tail)


def student_t_logcdf(x, dof):
    x = np.asarray(x, dtype=float)
    dof = float(dof)
    if not dof > 0:
        raise DomainError(f"dof must be positive, got {dof}")
    if math.isinf(dof):
        return log_ndtr(x)
    with np.errstate(divide="ignore"):
        log_tail = np.log(_t_lower_tail(x, dof))
    return np.where(x < 0, log_tail, np.log1p(-np.exp(log_tail)))


def _mvt_logpdf_from_maha(maha, logdet, p, nu):
    if math.isinf(nu):
        return -0.5 * (p * math.log(2 * math.pi) + logdet + maha)
    return (
        gammaln(0.5 * (nu + p))
        - gammaln(0.5 * nu)
        - 0.5 * p * math.log(nu * math.pi)
        - 0.5 * logdet
        - 0.5 * (nu + p) * np.log1p(maha / nu)
    )


def _skew_log_factor(proj, maha, lam, p, nu):
    # log T(proj * sqrt((nu+p)/(nu+d)) | 0, lam, nu+p); normal cdf in the SN limit
    if math.isinf(nu):
        return log_ndtr(proj / math.sqrt(lam))
    arg = proj * np.sqrt((nu + p) / (nu + maha)) / math.sqrt(lam)
    return student_t_logcdf(arg, nu + p)


def st_logpdf(y, params: StParams):
    """Log density of the skew-t law at ``y`` (shape ``(p,)`` or ``(n, p)``)."""
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    y2 = np.atleast_2d(y)
    p = params.dim
    if y2.shape[1] != p:
        raise DomainError(f"y has dimension {y2.shape[1]}, expected {p}")
    chol = _cholesky(params.sigma, "Sigma = Omega + delta delta^T")
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    sinv_delta = linalg.cho_solve((chol, True), params.skewness)
    lam = 1.0 - params.skewness @ sinv_delta
    if not lam > 0:
        raise DomainError(f"Lambda = 1 - delta' Sigma^-1 delta must be positive, got {lam}")
    resid = y2 - params.location
    white = linalg.solve_triangular(chol, resid.T, lower=True)
    maha = np.sum(white * white, axis=0)
    proj = resid @ sinv_delta
    out = (
        LOG2
        + _mvt_logpdf_from_maha(maha, logdet, p, params.dof)
        + _skew_log_factor(proj, maha, lam, p, params.dof)
    )
    return float(out[0]) if single else out


def st_linear_transform(params: StParams, A, b) -> StParams:
    """Law of ``A Y + b`` for ``Y ~ ST_p``: ST_m(A mu + b, A Omega A^T, A delta, nu)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if A.shape[1] != params.dim:
        raise DomainError(f"A has {A.shape[1]} columns, expected {params.dim}")
    if b.shape != (A.shape[0],):
        raise DomainError(f"b has shape {b.shape}, expected ({A.shape[0]},)")
    scale = A @ params.scale @ A.T
    scale = 0.5 * (scale + scale.T)
    _cholesky(scale, "A Omega A^T")
    return StParams(A @ params.location + b, scale, A @ params.skewness, params.dof)


# ---------------------------------------------------------------------------
# Second/third moment algebra and the Cardano inversion
# ---------------------------------------------------------------------------


def moment_constants(nu):
    """Return (C1, C2, C3, C4) used by the univariate moment equations."""
    gm = gamma_neg_moments(nu)
    if not gm.has_m3:
        raise DomainError(f"third moment requires nu > 3, got {nu}")
    m1, m2, m3 = gm.m1, gm.m2, gm.m3
    c1 = m2 - m1**2 * (2 / math.pi)
    c2 = m2
    c3 = 2 * m1**3 * (2 / math.pi) ** 1.5 + 2 * m3 * SQRT_2_OVER_PI - 3 * m1 * m2 * SQRT_2_OVER_PI
    c4 = 3 * (m3 - m1 * m2) * SQRT_2_OVER_PI
    return c1, c2, c3, c4


def st_moments_23(delta, sigma2, nu):
    """Second and third moments of the centred univariate skew-t.

    m2 = C1 delta^2 + C2 (sigma2 + delta^2),
    m3 = C3 delta^3 + C4 (sigma2 + delta^2) delta.

    These are the exact raw moments of ST_1(h(nu) delta, sigma2 + delta^2,
    delta, nu), i.e. ``sigma2`` is the scale net of the skewing term.
    """
    nu = float(nu)
    if not nu > 3:
        raise DomainError(f"moments up to order three require nu > 3, got {nu}")
    c1, c2, c3, c4 = moment_constants(nu)
    tot = sigma2 + delta * delta
    return c1 * delta**2 + c2 * tot, c3 * delta**3 + c4 * tot * delta


def cardano_ratio(nu):
    """C4 / (C2 C3 - C1 C4); must be positive for the real root to be unique."""
    c1, c2, c3, c4 = moment_constants(nu)
    return c4 / (c2 * c3 - c1 * c4)


def recover_delta_cardano(m2, m3, nu):
    """Recover the skewness from the second and third moments.

    Solves the depressed cubic delta^3 + p delta + q = 0 with
    p = C4 m2 / (C2 C3 - C1 C4) and q = -C2 m3 / (C2 C3 - C1 C4) by
    Cardano's formula.  ``nu`` must be an integer in [4, 100].
    """
    if float(nu) != int(nu) or not 4 <= int(nu) <= 100:
        raise DomainError(f"nu must be an integer in [4, 100], got {nu}")
    c1, c2, c3, c4 = moment_constants(int(nu))
    denom = c2 * c3 - c1 * c4
    ratio = c4 / denom
    if not ratio > 0:
        raise DomainError(f"C4/(C2 C3 - C1 C4) = {ratio} is not positive")
    p = ratio * m2
    q = -c2 / denom * m3
    disc = q * q / 4 + p**3 / 27
    if disc < 0:
        raise DomainError(f"negative Cardano discriminant {disc} (m2 = {m2} must be positive)")
    root = math.sqrt(disc)
    return float(np.cbrt(-q / 2 + root) + np.cbrt(-q / 2 - root))


# ---------------------------------------------------------------------------
# Scalar samplers
# ---------------------------------------------------------------------------


def _positive(name, value):
    if not np.all(np.asarray(value) > 0):
        raise DomainError(f"{name} must be positive, got {value}")


def sample_half_normal(scale2, rng, size=None):
    """|N(0, scale2)|."""
    _positive("scale2", scale2)
    return np.sqrt(scale2) * np.abs(rng.standard_normal(size))


def sample_gamma(shape, rate, rng, size=None):
    _positive("shape", shape)
    _positive("rate", rate)
    return rng.gamma(shape, 1.0 / np.asarray(rate, dtype=float), size=size)


def sample_inverse_gamma(shape, scale, rng, size=None):
    """IG(shape, scale) with density proportional to x^{-shape-1} exp(-scale/x)."""
    _positive("shape", shape)
    _positive("scale", scale)
    return np.asarray(scale, dtype=float) / rng.gamma(shape, 1.0, size=size)


def sample_truncated_normal_positive(mean, var, rng):
    """N(mean, var) restricted to (0, inf); vectorised over array inputs.

    Uses the inverse survival function in log space so that the deep tail
    (mean << 0) stays accurate.
    """
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    _positive("var", var)
    sd = np.sqrt(var)
    alpha = -mean / sd
    logu = np.log(rng.random(np.broadcast(mean, sd).shape))
    z = -ndtri_exp(logu + log_ndtr(-alpha))
    # z > alpha in exact arithmetic; guard the last ulp
    x = mean + sd * z
    return np.maximum(x, np.finfo(float).tiny)


def sample_truncated_gamma(shape, rate, lower, upper, rng):
    """Gamma(shape, rate) restricted to (lower, upper) by inversion.

    Works in whichever tail keeps the regularized incomplete gamma away
    from 0 or 1, and falls back to the power-law limit x^{shape-1} when
    the exponential factor is flat over the interval (rate * upper tiny).
    """
    _positive("shape", shape)
    if not rate >= 0:
        raise DomainError(f"rate must be nonnegative, got {rate}")
    if not 0 <= lower < upper:
        raise DomainError(f"need 0 <= lower < upper, got ({lower}, {upper})")
    if math.isinf(upper) and rate == 0:
        raise DomainError("improper: zero rate on an unbounded interval")
    v = rng.random()
    if rate * upper < 1e-10:
        lo, hi = lower**shape, upper**shape
        return (lo + v * (hi - lo)) ** (1.0 / shape)
    x_lo, x_hi = rate * lower, rate * upper
    if x_lo < shape:
        f_lo, f_hi = gammainc(shape, x_lo), gammainc(shape, x_hi)
        if f_hi - f_lo > 1e-300 and f_hi < 1.0 - 1e-12:
            return float(gammaincinv(shape, f_lo + v * (f_hi - f_lo))) / rate
    q_lo, q_hi = gammaincc(shape, x_lo), gammaincc(shape, x_hi)
    if q_lo - q_hi > 1e-300:
        return float(gammainccinv(shape, q_hi + v * (q_lo - q_hi))) / rate
    # both tails underflow: the density is concentrated at the near end
    if x_hi <= shape:
        lo, hi = lower**shape, upper**shape
        return (lo + v * (hi - lo)) ** (1.0 / shape)
    return lower - math.log1p(-v * -math.expm1(-(upper - lower) * rate)) / rate


# ---------------------------------------------------------------------------
# Truncated multivariate normal on the positive orthant (exact HMC)
# ---------------------------------------------------------------------------


def _hmc_positive(mean, factor, z, rng, travel_time, max_wall_hits):
    """One exact-HMC transition for x = mean + factor @ z subject to x > 0.

    In whitened coordinates the target is N(0, I) restricted to the
    polytope {z : mean + factor z >= 0}; trajectories are
    z(t) = z0 cos t + v sin t with specular reflection at the walls.
    """
    fnorm2 = np.einsum("ij,ij->i", factor, factor)
    q = z.shape[0]
    hits = 0
    while True:
        pos = z.copy()
        vel = rng.standard_normal(q)
        t_left = travel_time
        ok = True
        while True:
            fa = factor @ vel
            fb = factor @ pos
            amp = np.hypot(fa, fb)
            reach = amp > np.abs(mean)
            t_hit = np.full(mean.shape, np.inf)
            if np.any(reach):
                phase = np.arctan2(fa[reach], fb[reach])
                t_r = np.mod(phase + np.arccos(-mean[reach] / amp[reach]), 2 * np.pi)
                t_r[t_r < _HMC_MIN_HIT_TIME] = np.inf
                t_hit[reach] = t_r
            j = int(np.argmin(t_hit))
            t = t_hit[j]
            if t >= t_left:
                pos = pos * math.cos(t_left) + vel * math.sin(t_left)
                break
            new_pos = pos * math.cos(t) + vel * math.sin(t)
            vel = vel * math.cos(t) - pos * math.sin(t)
            pos = new_pos
            vel = vel - 2.0 * (factor[j] @ vel) / fnorm2[j] * factor[j]
            t_left -= t
            hits += 1
            if hits > max_wall_hits:
                raise RuntimeError(
                    f"exact HMC exceeded {max_wall_hits} wall hits (dim {q}, last wall {j}, time left {t_left:.3g})"
                )
            if factor[j] @ vel < 0:
                ok = False
                break
        if ok:
            x = mean + factor @ pos
            if np.all(x > 0):
                return pos, x
        # numerical escape through a wall: retry from the start point


def hmc_positive_step_precision(mean, prec_chol, initial, rng, travel_time=HMC_TRAVEL_TIME,
                                max_wall_hits=HMC_MAX_WALL_HITS):
    """One exact-HMC move for N(mean, Q^{-1}) on x > 0 given Q = R R^T (R lower).

    ``initial`` must be strictly positive; returns the new point.
    """
    initial = np.asarray(initial, dtype=float)
    if not np.all(initial > 0):
        raise DomainError("initial point must lie strictly inside the positive orthant")
    # x = mean + R^{-T} z  <=>  z = R^T (x - mean)
    factor = linalg.solve_triangular(prec_chol, np.eye(prec_chol.shape[0]), lower=True).T
    z0 = prec_chol.T @ (initial - mean)
    _, x = _hmc_positive(mean, factor, z0, rng, travel_time, max_wall_hits)
    return x


def sample_truncated_mvn_positive(mean, cov, rng, initial=None, n_steps=None,
                                  travel_time=HMC_TRAVEL_TIME, max_wall_hits=HMC_MAX_WALL_HITS):
    """Draw from N_q(mean, cov) restricted to the positive orthant.

    The draw is produced by exact Hamiltonian Monte Carlo with wall
    reflections.  With ``initial`` the call is a single Markov transition
    (the way a Gibbs sweep uses it); without it the chain is started at a
    strictly positive point and run ``n_steps`` (default 20) transitions.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    chol = _cholesky(cov, "covariance")
    if initial is None:
        sd = np.sqrt(np.diag(cov))
        x = np.maximum(mean, 0.1 * sd)
        steps = 20 if n_steps is None else n_steps
    else:
        x = np.asarray(initial, dtype=float)
        if not np.all(x > 0):
            raise DomainError("initial point must lie strictly inside the positive orthant")
        steps = 1 if n_steps is None else n_steps
    z = linalg.solve_triangular(chol, x - mean, lower=True)
    for _ in range(steps):
        z, x = _hmc_positive(mean, chol, z, rng, travel_time, max_wall_hits)
    return x


def truncated_mvn_positive_chain(mean, cov, n, rng, initial=None, burn_in=20):
    """``n`` successive exact-HMC states (after ``burn_in``), shape ``(n, q)``."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    chol = _cholesky(cov, "covariance")
    x = sample_truncated_mvn_positive(mean, cov, rng, initial=initial, n_steps=burn_in)
    z = linalg.solve_triangular(chol, x - mean, lower=True)
    out = np.empty((n, mean.shape[0]))
    for i in range(n):
        z, out[i] = _hmc_positive(mean, chol, z, rng, HMC_TRAVEL_TIME, HMC_MAX_WALL_HITS)
    return out
