"""Gibbs sampler for the skew-t single-index mixed model.

One sweep updates, in order,

    (lambda, tau) -> beta_raw -> xi -> delta -> s -> u -> b -> a
    -> sigma2 -> d2 -> nu -> (rho1_sq, rho2).

The steps from beta_raw to u work on the posterior with the random
intercepts b integrated out, so conditionally on (s_i, u_i)

    Y_i ~ N(theta_i + delta (h(nu) + s_i) 1, Psi_i / u_i),

and b is then redrawn from its full conditional before any step that
needs it (a, sigma2, d2, nu).  Drawing the collapsed block first and b
last keeps every transition invariant for the joint posterior.

Non-conjugate blocks (beta_raw, log(nu - 2), log rho1_sq and log rho2)
use elliptical slice sampling; xi uses exact HMC for the positive
truncated normal; the horseshoe scales use an auxiliary-uniform slice
sampler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np
from scipy import linalg
from scipy.special import gammaln

from . import monobasis
from .errors import DomainError, NotPositiveDefiniteError, SamplerStepError
from .model import ModelState, PanelDataset, cs_coef, g_rows, marginal_loglik_all
from .monobasis import BasisSpec, KernelParams
from .stdist import (
    h_of_nu,
    hmc_positive_step_precision,
    sample_inverse_gamma,
    sample_truncated_gamma,
    sample_truncated_normal_positive,
)

VARIANTS = ("st-gp", "sn-gp", "n-gp")
MIN_SLOPE = 1e-8
HS_CLAMP = 1e-12


@dataclass(frozen=True)
class Priors:
    """Prior hyperparameters.  Variances for normal priors, (shape, scale) for IG priors."""

    a_var: float = 1000.0
    delta_var: float = 1000.0
    beta_normal_var: float = 10.0
    sigma2_shape: float = 5.0
    sigma2_scale: float = 5.0
    d2_shape: float = 5.0
    d2_scale: float = 5.0


@dataclass(frozen=True)
class FitConfig:
    """Run length, model variant, priors and per-block switches."""

    iterations: int = 20000
    burn_in: int = 10000
    thin: int = 10
    L: int = monobasis.DEFAULT_L
    seed: int = 0
    variant: str = "st-gp"
    priors: Priors = field(default_factory=Priors)
    ess_max_shrink: int = 200
    update_horseshoe: bool = True
    update_beta: bool = True
    update_xi: bool = True
    update_delta: bool = True
    update_latent: bool = True
    update_a: bool = True
    update_sigma2: bool = True
    update_d2: bool = True
    update_nu: bool = True
    update_gp_hyper: bool = True
    record_loglik: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DomainError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not (0 <= self.burn_in < self.iterations):
            raise DomainError(f"need 0 <= burn_in < iterations, got {self.burn_in}, {self.iterations}")
        if self.thin < 1:
            raise DomainError(f"thin must be >= 1, got {self.thin}")
        if self.ess_max_shrink < 1:
            raise DomainError("ess_max_shrink must be >= 1")

    @property
    def n_retained(self):
        return (self.iterations - self.burn_in) // self.thin

    @property
    def basis(self):
        return BasisSpec(self.L)

    def as_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = {g.name: getattr(v, g.name) for g in fields(v)} if f.name == "priors" else v
        return out


# ---------------------------------------------------------------------------
# Shared quantities
# ---------------------------------------------------------------------------


@dataclass
class _Resid:
    """Per-subject sums of r = Y - theta over the 2 n_i stacked coordinates."""

    g: np.ndarray       # g(X beta) per row
    r_pd: np.ndarray    # per-row PD residual
    r_cal: np.ndarray   # per-row CAL residual
    s1: np.ndarray      # sum r
    s2: np.ndarray      # sum r^2
    m: np.ndarray       # 2 n_i


def _resid(dataset, state, basis, beta=None):
    pk = dataset.packed
    if beta is None:
        g = g_rows(pk.X, state, basis)
    else:
        g = monobasis.eval_index_unchecked(np.clip(pk.X @ beta, -1.0, 1.0), state.xi, basis)
    r_pd = pk.y_pd - g
    r_cal = pk.y_cal - state.a * g
    return _Resid(
        g=g,
        r_pd=r_pd,
        r_cal=r_cal,
        s1=pk.subject_sum(r_pd + r_cal),
        s2=pk.subject_sum(r_pd * r_pd + r_cal * r_cal),
        m=2.0 * pk.n_teeth,
    )


def _shift(state):
    """delta (h(nu) + s_i): the conditional mean of b_i."""
    return state.delta * (state.h + state.s)


def _cs_quad(s1, s2, m, c, sigma2):
    """z' Psi^{-1} z from sum z and sum z^2."""
    return s2 / sigma2 - c * s1 * s1


def _ones_quad(m, d2, sigma2):
    """1' Psi^{-1} 1."""
    return m / (sigma2 + m * d2)


def _checked(name, value):
    if not np.all(np.isfinite(value)):
        raise DomainError(f"{name}: non-finite draw")
    return value


# ---------------------------------------------------------------------------
# Elliptical slice sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EssResult:
    value: np.ndarray
    logdensity: float
    evaluations: int


def ess_update(target_logdensity: Callable, current, prior_chol, rng, max_shrink=200,
               current_logdensity=None) -> EssResult:
    """One elliptical slice move for prior N(0, C) times exp(target_logdensity).

    ``prior_chol`` is a factor with C = F F': a 2-D lower factor, or a 1-D
    vector of standard deviations for a diagonal C.  After ``max_shrink``
    rejected proposals the current point is returned (the bracket has
    shrunk onto it by then).
    """
    current = np.atleast_1d(np.asarray(current, dtype=float))
    prior_chol = np.asarray(prior_chol, dtype=float)
    ll_cur = target_logdensity(current) if current_logdensity is None else current_logdensity
    if not np.isfinite(ll_cur):
        raise DomainError("elliptical slice: target is not finite at the current point")
    z = rng.standard_normal(current.shape[0])
    nu = prior_chol * z if prior_chol.ndim == 1 else prior_chol @ z
    threshold = ll_cur + math.log(rng.random())
    angle = rng.uniform(0.0, 2 * math.pi)
    lo, hi = angle - 2 * math.pi, angle
    evals = 1 if current_logdensity is None else 0
    for _ in range(max_shrink):
        prop = current * math.cos(angle) + nu * math.sin(angle)
        ll = target_logdensity(prop)
        evals += 1
        if ll > threshold:
            return EssResult(prop, float(ll), evals)
        if angle < 0:
            lo = angle
        else:
            hi = angle
        angle = rng.uniform(lo, hi)
    return EssResult(current, float(ll_cur), evals)


# ---------------------------------------------------------------------------
# Horseshoe scales
# ---------------------------------------------------------------------------


def _hs_sums(state, dataset):
    beta2 = np.asarray(state.beta_raw) ** 2
    return np.array([beta2[list(g)].sum() for g in dataset.group_map]), \
        np.array([len(g) for g in dataset.group_map], dtype=float)


def update_horseshoe(state: ModelState, dataset: PanelDataset, rng):
    """Slice updates of the group scales lambda_j and the global scale tau.

    With eta = 1 / lambda_j^2 the conditional is proportional to
    Gamma(eta; (m_j + 1)/2, S_j / (2 tau^2)) / (1 + eta); an auxiliary
    v ~ U(0, 1 / (1 + eta)) turns the second factor into the bound
    eta < (1 - v) / v.  tau works the same way through gamma = 1 / tau^2,
    restricted to gamma > 1 by the truncation tau < 1.
    """
    if dataset.n_groups == 0:
        return np.array(state.lam, dtype=float), float(state.tau)
    S, m = _hs_sums(state, dataset)
    lam = np.array(state.lam, dtype=float)
    tau2 = state.tau**2
    for j in range(dataset.n_groups):
        eta = 1.0 / lam[j] ** 2
        v = rng.uniform(0.0, 1.0 / (1.0 + eta))
        eta = sample_truncated_gamma(0.5 * (m[j] + 1), S[j] / (2 * tau2), 0.0, (1 - v) / v, rng)
        eta = min(max(eta, HS_CLAMP), 1.0 / HS_CLAMP)
        lam[j] = eta**-0.5
    gam = 1.0 / tau2
    v = rng.uniform(0.0, 1.0 / (1.0 + gam))
    M = m.sum()
    gam = sample_truncated_gamma(0.5 * (M + 1), np.sum(S / lam**2) / 2, 1.0, (1 - v) / v, rng)
    tau = min(max(gam**-0.5, HS_CLAMP), 1.0 - HS_CLAMP)
    return lam, float(tau)


# ---------------------------------------------------------------------------
# beta
# ---------------------------------------------------------------------------


def beta_prior_sd(state: ModelState, dataset: PanelDataset, priors: Priors):
    sd = np.empty(dataset.P)
    grp = dataset.column_group
    normal = grp < 0
    sd[normal] = math.sqrt(priors.beta_normal_var)
    sd[~normal] = np.asarray(state.lam)[grp[~normal]] * state.tau
    return sd


def beta_loglik(beta_raw, state: ModelState, dataset: PanelDataset, basis: BasisSpec):
    """log p(Y | beta, s, u, ...) with b integrated out, up to a beta-free constant."""
    norm = np.linalg.norm(beta_raw)
    if norm == 0:
        return -np.inf
    r = _resid(dataset, state, basis, beta=beta_raw / norm)
    c, _ = cs_coef(r.m, state.d2, state.sigma2)
    sh = _shift(state)
    s1 = r.s1 - r.m * sh
    s2 = r.s2 - 2 * sh * r.s1 + r.m * sh * sh
    return float(-0.5 * np.sum(state.u * _cs_quad(s1, s2, r.m, c, state.sigma2)))


def update_beta(state: ModelState, dataset: PanelDataset, basis: BasisSpec, rng,
                priors: Priors = Priors(), max_shrink=200):
    """Elliptical slice move on beta_raw; only beta_raw / ||beta_raw|| enters the likelihood."""
    if dataset.N == 0:
        target = lambda b: 0.0  # noqa: E731
    else:
        target = lambda b: beta_loglik(b, state, dataset, basis)  # noqa: E731
    res = ess_update(target, state.beta_raw, beta_prior_sd(state, dataset, priors), rng, max_shrink)
    beta = res.value
    if np.linalg.norm(beta) == 0:
        beta = rng.standard_normal(beta.shape[0])
    return beta, res.evaluations


# ---------------------------------------------------------------------------
# xi
# ---------------------------------------------------------------------------


def xi_posterior(state: ModelState, dataset: PanelDataset, basis: BasisSpec, kernel_chol=None):
    """Precision matrix and linear term of the (untruncated) Gaussian conditional of xi.

    The stacked design of subject i is Phi_i on the PD block and a Phi_i on
    the CAL block; b_i is integrated out and Y_i is centred at
    delta (h(nu) + s_i).
    """
    if kernel_chol is None:
        kernel_chol = monobasis.kernel_cholesky(basis, KernelParams(state.rho1_sq, state.rho2))
    kinv = linalg.cho_solve((kernel_chol, True), np.eye(basis.size))
    prec = kinv.copy()
    lin = np.zeros(basis.size)
    if dataset.N > 0:
        pk = dataset.packed
        a = state.a
        phi = monobasis.design_matrix_unchecked(np.clip(pk.X @ state.beta, -1.0, 1.0), basis)
        m = 2.0 * pk.n_teeth
        c, _ = cs_coef(m, state.d2, state.sigma2)
        u = np.asarray(state.u)
        sh = _shift(state)
        w = u[pk.subject_of_row]
        z_pd = pk.y_pd - sh[pk.subject_of_row]
        z_cal = pk.y_cal - sh[pk.subject_of_row]
        t = pk.subject_sum(phi)
        zsum = pk.subject_sum(z_pd + z_cal)
        prec += (1 + a * a) / state.sigma2 * (phi.T @ (w[:, None] * phi))
        prec -= (1 + a) ** 2 * (t.T @ ((u * c)[:, None] * t))
        lin += phi.T @ (w * (z_pd + a * z_cal)) / state.sigma2
        lin -= (1 + a) * (t.T @ (u * c * zsum))
    return 0.5 * (prec + prec.T), lin


def update_xi(state: ModelState, dataset: PanelDataset, basis: BasisSpec, rng, kernel_chol=None):
    """Exact-HMC move for the positive truncated normal conditional of xi."""
    if abs(state.a) < MIN_SLOPE:
        raise DomainError(f"degenerate slope |a| = {abs(state.a):.3g} < {MIN_SLOPE}")
    prec, lin = xi_posterior(state, dataset, basis, kernel_chol)
    try:
        R = linalg.cholesky(prec, lower=True)
    except linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("xi posterior precision is not positive definite") from exc
    mean = linalg.cho_solve((R, True), lin)
    xi = np.asarray(state.xi, dtype=float)
    if not np.all(xi > 0):
        xi = np.maximum(xi, 1e-8)
    return hmc_positive_step_precision(mean, R, xi, rng)


# ---------------------------------------------------------------------------
# delta and the per-subject latents (b integrated out for s, u)
# ---------------------------------------------------------------------------


def delta_posterior(state: ModelState, dataset: PanelDataset, basis: BasisSpec, priors: Priors = Priors()):
    """(mean, variance) of the normal conditional of delta."""
    prec = 1.0 / priors.delta_var
    lin = 0.0
    if dataset.N > 0:
        r = _resid(dataset, state, basis)
        k = state.h + np.asarray(state.s)
        denom = state.sigma2 + r.m * state.d2
        prec += np.sum(state.u * k * k * r.m / denom)
        lin += np.sum(state.u * k * r.s1 / denom)
    return lin / prec, 1.0 / prec


def update_delta(state, dataset, basis, rng, priors: Priors = Priors()):
    mean, var = delta_posterior(state, dataset, basis, priors)
    return float(_checked("delta", mean + math.sqrt(var) * rng.standard_normal()))


def s_posterior(state, dataset, basis, r=None):
    """(mean, variance) of the untruncated normal behind each s_i conditional."""
    r = _resid(dataset, state, basis) if r is None else r
    u = np.asarray(state.u)
    denom = state.sigma2 + r.m * state.d2
    prec = u + u * state.delta**2 * r.m / denom
    star = r.s1 - r.m * state.h * state.delta
    mean = u * state.delta * star / denom / prec
    return mean, 1.0 / prec


def update_s(state, dataset, basis, rng, r=None):
    """All s_i from their positive truncated normal conditionals."""
    if dataset.N == 0:
        return np.zeros(0)
    mean, var = s_posterior(state, dataset, basis, r)
    return sample_truncated_normal_positive(mean, var, rng)


def u_posterior(state, dataset, basis, r=None):
    """(shape, rate) of each u_i conditional."""
    r = _resid(dataset, state, basis) if r is None else r
    s = np.asarray(state.s)
    c, _ = cs_coef(r.m, state.d2, state.sigma2)
    sh = state.delta * (state.h + s)
    s1 = r.s1 - r.m * sh
    s2 = r.s2 - 2 * sh * r.s1 + r.m * sh * sh
    q = _cs_quad(s1, s2, r.m, c, state.sigma2)
    return 0.5 * (r.m + state.nu + 1), 0.5 * (q + s * s + state.nu)


def update_u(state, dataset, basis, rng, r=None):
    if dataset.N == 0:
        return np.zeros(0)
    shape, rate = u_posterior(state, dataset, basis, r)
    return _checked("u", rng.gamma(shape, 1.0 / rate))


def b_posterior(state, dataset, basis, r=None):
    """(mean, variance) of each b_i given everything else."""
    r = _resid(dataset, state, basis) if r is None else r
    u = np.asarray(state.u)
    prec0 = r.m / state.sigma2 + 1.0 / state.d2
    mean = (r.s1 / state.sigma2 + _shift(state) / state.d2) / prec0
    return mean, 1.0 / (u * prec0)


def update_b(state, dataset, basis, rng, r=None):
    if dataset.N == 0:
        return np.zeros(0)
    mean, var = b_posterior(state, dataset, basis, r)
    return _checked("b", mean + np.sqrt(var) * rng.standard_normal(mean.shape[0]))


def _subject_view(dataset, i):
    return PanelDataset((dataset.subjects[i],), dataset.group_map, dataset.normal_prior_columns,
                        dataset.row_scale)


def _subject_state(state, i):
    st = state.copy()
    st.b, st.s, st.u = st.b[i:i + 1], st.s[i:i + 1], st.u[i:i + 1]
    return st


def update_s_i(state, dataset, i, basis, rng):
    """s_i for subject ``i`` alone."""
    return float(update_s(_subject_state(state, i), _subject_view(dataset, i), basis, rng)[0])


def update_u_i(state, dataset, i, basis, rng):
    return float(update_u(_subject_state(state, i), _subject_view(dataset, i), basis, rng)[0])


def update_b_i(state, dataset, i, basis, rng):
    return float(update_b(_subject_state(state, i), _subject_view(dataset, i), basis, rng)[0])


# ---------------------------------------------------------------------------
# a, sigma2, d2 (conditional on b)
# ---------------------------------------------------------------------------


def a_posterior(state, dataset, basis, priors: Priors = Priors()):
    """(mean, variance) of the normal conditional of a; uses the CAL block only."""
    prec = 1.0 / priors.a_var
    lin = 0.0
    if dataset.N > 0:
        pk = dataset.packed
        g = g_rows(pk.X, state, basis)
        w = np.asarray(state.u)[pk.subject_of_row] / state.sigma2
        ystar = pk.y_cal - np.asarray(state.b)[pk.subject_of_row]
        prec += np.sum(w * g * g)
        lin += np.sum(w * g * ystar)
    return lin / prec, 1.0 / prec


def update_a(state, dataset, basis, rng, priors: Priors = Priors()):
    mean, var = a_posterior(state, dataset, basis, priors)
    return float(_checked("a", mean + math.sqrt(var) * rng.standard_normal()))


def sigma2_posterior(state, dataset, basis, priors: Priors = Priors()):
    """(shape, scale) of the inverse-gamma conditional of sigma2."""
    shape, scale = priors.sigma2_shape, priors.sigma2_scale
    if dataset.N > 0:
        pk = dataset.packed
        g = g_rows(pk.X, state, basis)
        b = np.asarray(state.b)[pk.subject_of_row]
        w = np.asarray(state.u)[pk.subject_of_row]
        e_pd = pk.y_pd - g - b
        e_cal = pk.y_cal - state.a * g - b
        shape += float(np.sum(pk.n_teeth))
        scale += 0.5 * float(np.sum(w * (e_pd * e_pd + e_cal * e_cal)))
    return shape, scale


def update_sigma2(state, dataset, basis, rng, priors: Priors = Priors()):
    return float(sample_inverse_gamma(*sigma2_posterior(state, dataset, basis, priors), rng))


def d2_posterior(state, dataset, priors: Priors = Priors()):
    shape, scale = priors.d2_shape, priors.d2_scale
    if dataset.N > 0:
        dev = np.asarray(state.b) - _shift(state)
        shape += 0.5 * dataset.N
        scale += 0.5 * float(np.sum(np.asarray(state.u) * dev * dev))
    return shape, scale


def update_d2(state, dataset, rng, priors: Priors = Priors()):
    return float(sample_inverse_gamma(*d2_posterior(state, dataset, priors), rng))


# ---------------------------------------------------------------------------
# nu and the GP hyperparameters
# ---------------------------------------------------------------------------


def nu_logdensity(nu, state, dataset):
    """Terms of the joint density that involve nu, given (b, s, u)."""
    if not nu > 2 or not np.isfinite(nu):
        return -np.inf
    u = np.asarray(state.u)
    if u.shape[0] == 0:
        return 0.0
    half = 0.5 * nu
    out = np.sum(half * math.log(half) - gammaln(half) + (half - 1) * np.log(u) - half * u)
    dev = np.asarray(state.b) - state.delta * (h_of_nu(nu) + np.asarray(state.s))
    out += np.sum(-0.5 * u * dev * dev / state.d2)
    return float(out)


def update_nu(state, dataset, rng, max_shrink=200):
    """Elliptical slice move on log(nu - 2) under its N(0, 1) prior."""
    target = lambda x: nu_logdensity(2.0 + math.exp(x[0]), state, dataset)  # noqa: E731
    res = ess_update(target, [math.log(state.nu - 2.0)], np.ones(1), rng, max_shrink)
    return 2.0 + math.exp(res.value[0]), res.evaluations


def gp_hyper_logdensity(log_rho, xi, basis):
    """log N(xi; 0, K(rho1_sq, rho2)), or -inf where K fails to factorize."""
    try:
        kp = KernelParams(math.exp(log_rho[0]), math.exp(log_rho[1]))
        R = monobasis.kernel_cholesky(basis, kp)
    except (NotPositiveDefiniteError, DomainError, OverflowError):
        return -np.inf
    w = linalg.solve_triangular(R, xi, lower=True)
    return float(-np.sum(np.log(np.diag(R))) - 0.5 * w @ w)


def update_gp_hyper(state, basis, rng, max_shrink=200):
    """Joint elliptical slice move on (log rho1_sq, log rho2), each N(0, 1) a priori.

    The target uses the untruncated N(0, K) density of xi; the factor
    P(xi > 0 | K) of the truncated prior is ignored.
    """
    xi = np.asarray(state.xi, dtype=float)
    target = lambda x: gp_hyper_logdensity(x, xi, basis)  # noqa: E731
    cur = np.array([math.log(state.rho1_sq), math.log(state.rho2)])
    res = ess_update(target, cur, np.ones(2), rng, max_shrink)
    return math.exp(res.value[0]), math.exp(res.value[1]), res.evaluations


# ---------------------------------------------------------------------------
# Sweep and chain
# ---------------------------------------------------------------------------


def initial_state(dataset: PanelDataset, config: FitConfig, rng) -> ModelState:
    """Default starting point (variant constraints applied)."""
    N = dataset.N
    st = ModelState(
        a=1.0,
        beta_raw=rng.standard_normal(dataset.P),
        xi=np.full(config.L + 1, 0.1),
        delta=0.0,
        sigma2=1.0,
        d2=1.0,
        nu=5.0,
        rho1_sq=1.0,
        rho2=1.0,
        lam=np.ones(dataset.n_groups),
        tau=0.5,
        b=np.zeros(N),
        s=np.abs(rng.standard_normal(N)),
        u=np.ones(N),
    )
    return apply_variant(st, config.variant)


def apply_variant(state: ModelState, variant: str) -> ModelState:
    if variant in ("sn-gp", "n-gp"):
        state.nu = math.inf
        state.u = np.ones_like(state.u)
    if variant == "n-gp":
        state.delta = 0.0
        state.s = np.zeros_like(state.s)
    return state


@dataclass
class SweepStats:
    ess_evaluations: dict = field(default_factory=lambda: {"beta": 0, "nu": 0, "gp_hyper": 0})
    sweeps: int = 0


def _step(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except SamplerStepError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the step name attached
        raise SamplerStepError(name, exc) from exc


def gibbs_sweep(state: ModelState, dataset: PanelDataset, basis: BasisSpec, config: FitConfig, rng,
                stats: SweepStats | None = None) -> ModelState:
    """One full sweep; returns a new state (the input is not modified)."""
    st = state.copy()
    pr = config.priors
    variant = config.variant
    stats = SweepStats() if stats is None else stats
    if config.update_horseshoe:
        st.lam, st.tau = _step("horseshoe", update_horseshoe, st, dataset, rng)
    if config.update_beta:
        st.beta_raw, n = _step("beta", update_beta, st, dataset, basis, rng, pr, config.ess_max_shrink)
        stats.ess_evaluations["beta"] += n
    if config.update_xi:
        st.xi = _step("xi", update_xi, st, dataset, basis, rng)
    if config.update_delta and variant != "n-gp":
        st.delta = _step("delta", update_delta, st, dataset, basis, rng, pr)
    if config.update_latent and dataset.N > 0:
        r = _step("latents", _resid, dataset, st, basis)
        if variant != "n-gp":
            st.s = _step("s", update_s, st, dataset, basis, rng, r)
        if variant == "st-gp":
            st.u = _step("u", update_u, st, dataset, basis, rng, r)
        st.b = _step("b", update_b, st, dataset, basis, rng, r)
    if config.update_a:
        st.a = _step("a", update_a, st, dataset, basis, rng, pr)
    if config.update_sigma2:
        st.sigma2 = _step("sigma2", update_sigma2, st, dataset, basis, rng, pr)
    if config.update_d2:
        st.d2 = _step("d2", update_d2, st, dataset, rng, pr)
    if config.update_nu and variant == "st-gp":
        st.nu, n = _step("nu", update_nu, st, dataset, rng, config.ess_max_shrink)
        stats.ess_evaluations["nu"] += n
    if config.update_gp_hyper:
        st.rho1_sq, st.rho2, n = _step("gp_hyper", update_gp_hyper, st, basis, rng, config.ess_max_shrink)
        stats.ess_evaluations["gp_hyper"] += n
    stats.sweeps += 1
    return st


SCALAR_FIELDS = ("a", "delta", "sigma2", "d2", "nu", "rho1_sq", "rho2", "tau")


@dataclass
class PosteriorDraws:
    """Retained states of one or more chains plus the pointwise log-likelihood."""

    scalars: dict
    beta_raw: np.ndarray
    lam: np.ndarray
    xi: np.ndarray
    b: np.ndarray
    s: np.ndarray
    u: np.ndarray
    loglik: np.ndarray
    replicate: np.ndarray
    stats: dict = field(default_factory=dict)

    @property
    def n_draws(self):
        return self.xi.shape[0]

    @property
    def beta(self):
        return self.beta_raw / np.linalg.norm(self.beta_raw, axis=1, keepdims=True)

    def state(self, k) -> ModelState:
        return ModelState(
            **{name: float(self.scalars[name][k]) for name in SCALAR_FIELDS},
            beta_raw=self.beta_raw[k].copy(),
            xi=self.xi[k].copy(),
            lam=self.lam[k].copy(),
            b=self.b[k].copy(),
            s=self.s[k].copy(),
            u=self.u[k].copy(),
        )

    def posterior_mean(self, name):
        if name in self.scalars:
            return float(np.mean(self.scalars[name]))
        return np.mean(getattr(self, name), axis=0)

    @classmethod
    def from_states(cls, states, loglik, replicate=0, stats=None):
        return cls(
            scalars={n: np.array([getattr(s, n) for s in states], dtype=float) for n in SCALAR_FIELDS},
            beta_raw=np.array([s.beta_raw for s in states]),
            lam=np.array([s.lam for s in states]),
            xi=np.array([s.xi for s in states]),
            b=np.array([s.b for s in states]),
            s=np.array([s.s for s in states]),
            u=np.array([s.u for s in states]),
            loglik=np.asarray(loglik, dtype=float),
            replicate=np.full(len(states), replicate, dtype=np.intp),
            stats=dict(stats or {}),
        )

    @classmethod
    def concatenate(cls, parts):
        """Pool draws; per-subject latent arrays are kept only if all parts agree in N."""
        parts = list(parts)
        same_n = len({p.b.shape[1] for p in parts}) == 1
        cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
        empty = np.zeros((sum(p.n_draws for p in parts), 0))
        return cls(
            scalars={n: np.concatenate([p.scalars[n] for p in parts]) for n in SCALAR_FIELDS},
            beta_raw=cat("beta_raw"),
            lam=cat("lam"),
            xi=cat("xi"),
            b=cat("b") if same_n else empty,
            s=cat("s") if same_n else empty,
            u=cat("u") if same_n else empty,
            loglik=cat("loglik") if same_n else empty,
            replicate=cat("replicate"),
            stats={"parts": [p.stats for p in parts]},
        )


def run_chain(dataset: PanelDataset, config: FitConfig, rng=None, init: ModelState | None = None,
              replicate: int = 0) -> PosteriorDraws:
    """Run ``config.iterations`` sweeps and keep every ``thin``-th state after burn-in."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    basis = config.basis
    state = initial_state(dataset, config, rng) if init is None else apply_variant(init.copy(), config.variant)
    state.validate()
    stats = SweepStats()
    kept, ll = [], []
    for it in range(config.iterations):
        state = gibbs_sweep(state, dataset, basis, config, rng, stats)
        if it >= config.burn_in and (it - config.burn_in + 1) % config.thin == 0:
            kept.append(state.copy())
            if config.record_loglik and dataset.N > 0:
                ll.append(marginal_loglik_all(dataset, state, basis))
            else:
                ll.append(np.zeros(dataset.N))
    summary = {"sweeps": stats.sweeps, "ess_evaluations": dict(stats.ess_evaluations)}
    return PosteriorDraws.from_states(kept, np.array(ll).reshape(len(kept), dataset.N), replicate, summary)
