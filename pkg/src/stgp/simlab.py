"""Synthetic panel data for the three simulation designs.

* ``sim1``: data drawn from the fitted model itself.
* ``sim2``: a finite population where each subject also carries a
  selection variable Z, jointly skew-t with the responses; subjects enter
  the sample with probability logistic(zeta0 + zeta1 Z).
* ``sim3``: a misspecified population (multivariate Laplace errors, Gamma
  random intercepts) with the same selection mechanism.

The joint scale matrix of (Y_i, Z_i) with the default cross-covariance
rho = 36 is not positive semidefinite; it is replaced by its nearest
positive semidefinite matrix (negative eigenvalues set to zero) before
sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, ndtr

from .model import ModelState, PanelDataset, Subject, scale_rows
from .stdist import h_of_nu
from .survey import bounded_rescale

SCENARIOS = ("sim1", "sim2", "sim3")
TRUE_BETA_RAW = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0)
# 0-based column indices: normal prior on the first two, grouped horseshoe on the rest
DEFAULT_NORMAL_COLUMNS = (0, 1)
DEFAULT_GROUPS = ((2, 3), (4,), (5,), (6, 7), (8,), (9,))


@dataclass(frozen=True)
class SimScenario:
    """Generating parameters; defaults are the published simulation settings."""

    which: str = "sim1"
    N: int = 100
    a: float = 1.5
    delta: float = 0.6
    d2: float = 0.1
    sigma2: float = 0.5
    nu: float = 5.89
    beta_raw: tuple = TRUE_BETA_RAW
    mu_z: float = 0.0
    sigma2_z: float = 0.6
    rho: float = 36.0
    zeta0: float = -1.8
    zeta1: float = 0.1
    sim3_sigma2: float = 0.6
    poisson_mean: float = 8.0

    def __post_init__(self):
        if self.which not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}, got {self.which!r}")
        if self.N < 1:
            raise ValueError("N must be positive")
        if not (self.sigma2 > 0 and self.d2 > 0 and self.nu > 2 and self.sigma2_z > 0):
            raise ValueError("variance parameters must be positive and nu > 2")

    @property
    def beta(self):
        b = np.asarray(self.beta_raw, dtype=float)
        return b / np.linalg.norm(b)

    def truth(self):
        """Generating parameters as a plain dict (for sidecar files)."""
        return {
            "scenario": self.which, "N": self.N, "a": self.a, "delta": self.delta, "d2": self.d2,
            "sigma2": self.sigma2 if self.which != "sim3" else self.sim3_sigma2, "nu": self.nu,
            "beta": [float(x) for x in self.beta], "mu_z": self.mu_z, "sigma2_z": self.sigma2_z,
            "rho": self.rho, "zeta0": self.zeta0, "zeta1": self.zeta1,
        }


def true_index(u):
    """5 Phi(5 u)."""
    return 5.0 * ndtr(5.0 * np.asarray(u, dtype=float))


def _three_level(rng):
    lvl = rng.integers(3)
    return [float(lvl == 1), float(lvl == 2)]


def gen_covariates(N, rng, poisson_mean=8.0):
    """Tooth counts and raw (unscaled) 10-column designs for ``N`` subjects."""
    out = []
    for _ in range(N):
        n = 2 + int(rng.poisson(poisson_mean))
        c1 = float(rng.random() < 0.5)
        c2 = float(rng.random() < 0.13)
        c34 = _three_level(rng)
        c5 = float(rng.random() < 0.5)
        c6 = rng.normal(1.0 if c5 else -1.0, 1.0)
        c78 = _three_level(rng)
        c9 = float(rng.random() < 0.5)
        c10 = rng.normal(1.0 if c9 else -1.0, 1.0)
        row = np.array([c1, c2, *c34, c5, c6, *c78, c9, c10])
        out.append((n, np.tile(row, (n, 1))))
    return out


def _scaled_designs(N, rng, poisson_mean):
    cov = gen_covariates(N, rng, poisson_mean)
    raw = [Subject(str(i), np.zeros(n), np.zeros(n), X) for i, (n, X) in enumerate(cov)]
    scaled, div = scale_rows(raw)
    return [s.X for s in scaled], div


def _theta(X, scn):
    g = true_index(np.clip(X @ scn.beta, -1.0, 1.0))
    return g, scn.a * g


def _dataset(subjects, row_scale):
    return PanelDataset(tuple(subjects), DEFAULT_GROUPS, DEFAULT_NORMAL_COLUMNS, row_scale)


def true_state(scn: SimScenario, N=None, L=25) -> ModelState:
    """ModelState at the generating values (latents zero; xi unused)."""
    N = scn.N if N is None else N
    return ModelState(
        a=scn.a, beta_raw=np.array(scn.beta_raw, dtype=float), xi=np.zeros(L + 1), delta=scn.delta,
        sigma2=scn.sigma2, d2=scn.d2, nu=scn.nu, rho1_sq=1.0, rho2=1.0, lam=np.ones(len(DEFAULT_GROUPS)),
        tau=0.5, b=np.zeros(N), s=np.zeros(N), u=np.ones(N),
    )


@dataclass(frozen=True)
class SimData:
    """Generated data plus the latent draws that produced it."""

    dataset: PanelDataset
    b: np.ndarray
    s: np.ndarray
    u: np.ndarray
    g: list = field(repr=False, default=None)


def gen_sim1(scenario: SimScenario, rng) -> SimData:
    """Hierarchical draw: u_i, s_i, b_i, then Gaussian noise with variance sigma2 / u_i."""
    scn = scenario
    designs, div = _scaled_designs(scn.N, rng, scn.poisson_mean)
    h = h_of_nu(scn.nu) if scn.delta != 0 else 0.0
    subjects, bs, ss, us, gs = [], [], [], [], []
    for i, X in enumerate(designs):
        n = X.shape[0]
        u = 1.0 if math.isinf(scn.nu) else rng.gamma(0.5 * scn.nu, 2.0 / scn.nu)
        s = abs(rng.standard_normal()) / math.sqrt(u)
        b = scn.delta * (h + s) + math.sqrt(scn.d2 / u) * rng.standard_normal()
        g, ag = _theta(X, scn)
        sd = math.sqrt(scn.sigma2 / u)
        y_pd = g + b + sd * rng.standard_normal(n)
        y_cal = ag + b + sd * rng.standard_normal(n)
        subjects.append(Subject(str(i), y_pd, y_cal, X))
        bs.append(b), ss.append(s), us.append(u), gs.append(g)
    return SimData(_dataset(subjects, div), np.array(bs), np.array(ss), np.array(us), gs)


def nearest_psd(mat):
    """Symmetric matrix with negative eigenvalues replaced by zero."""
    mat = 0.5 * (mat + mat.T)
    w, V = np.linalg.eigh(mat)
    return (V * np.maximum(w, 0.0)) @ V.T


def _psd_root(mat):
    w, V = np.linalg.eigh(0.5 * (mat + mat.T))
    return V * np.sqrt(np.maximum(w, 0.0))


def joint_scale(n, yy_block, rho, sigma2_z):
    """[[Psi, rho 1], [rho 1', sigma2_z]] for a subject with n teeth (before PSD repair)."""
    m = 2 * n
    out = np.empty((m + 1, m + 1))
    out[:m, :m] = yy_block
    out[:m, m] = out[m, :m] = rho
    out[m, m] = sigma2_z
    return out


@dataclass(frozen=True)
class SurveySim:
    """A finite population, its selection variable, and the selected sample."""

    population: PanelDataset
    z: np.ndarray
    pi: np.ndarray
    selected: np.ndarray
    sample: PanelDataset

    @property
    def selection_rate(self):
        return float(np.mean(self.selected))


def selection_probability(z, zeta0, zeta1):
    return expit(zeta0 + zeta1 * np.asarray(z, dtype=float))


def select_sample(population: PanelDataset, z, scn: SimScenario, rng) -> SurveySim:
    """Poisson sampling on logistic(zeta0 + zeta1 z).

    Weights are 1/pi rescaled to sum to the population size, with any
    weight that would drop below 1 pinned at 1 (a sampled unit always
    represents at least itself).
    """
    pi = selection_probability(z, scn.zeta0, scn.zeta1)
    selected = rng.random(pi.shape[0]) < pi
    idx = np.flatnonzero(selected)
    w = bounded_rescale(1.0 / pi[idx], population.N) if idx.size else np.zeros(0)
    subs = [replace(population.subjects[k], weight=float(wk)) for k, wk in zip(idx, w)]
    sample = replace(population, subjects=tuple(subs)) if subs else None
    return SurveySim(population, np.asarray(z), pi, selected, sample)


def _psd_cache():
    cache = {}

    def root(n, yy, rho, s2z):
        key = n
        if key not in cache:
            cache[key] = _psd_root(nearest_psd(joint_scale(n, yy(n), rho, s2z)))
        return cache[key]

    return root


def gen_sim2(scenario: SimScenario, rng) -> SurveySim:
    """Population of N subjects with (Y_i, Z_i) jointly skew-t, then selection on Z."""
    scn = scenario
    designs, div = _scaled_designs(scn.N, rng, scn.poisson_mean)
    h = h_of_nu(scn.nu)
    root = _psd_cache()
    yy = lambda n: scn.d2 * np.ones((2 * n, 2 * n)) + scn.sigma2 * np.eye(2 * n)  # noqa: E731
    subjects, zs = [], []
    for i, X in enumerate(designs):
        n = X.shape[0]
        F = root(n, yy, scn.rho, scn.sigma2_z)
        g, ag = _theta(X, scn)
        loc = np.concatenate([g, ag, [scn.mu_z]])
        loc[: 2 * n] += h * scn.delta
        skew = np.concatenate([np.full(2 * n, scn.delta), [0.0]])
        w = 1.0 if math.isinf(scn.nu) else rng.gamma(0.5 * scn.nu, 2.0 / scn.nu) ** -0.5
        draw = loc + w * (skew * abs(rng.standard_normal()) + F @ rng.standard_normal(F.shape[1]))
        subjects.append(Subject(str(i), draw[:n], draw[n:2 * n], X))
        zs.append(draw[-1])
    return select_sample(_dataset(subjects, div), np.array(zs), scn, rng)


def gen_sim3(scenario: SimScenario, rng) -> SurveySim:
    """Laplace (Gaussian scale mixture, W ~ Exp(1)) errors and Gamma(1, 1) intercepts."""
    scn = scenario
    designs, div = _scaled_designs(scn.N, rng, scn.poisson_mean)
    root = _psd_cache()
    yy = lambda n: scn.sim3_sigma2 * np.eye(2 * n)  # noqa: E731
    subjects, zs = [], []
    for i, X in enumerate(designs):
        n = X.shape[0]
        F = root(n, yy, scn.rho, scn.sigma2_z)
        b = rng.gamma(1.0, 1.0)
        g, ag = _theta(X, scn)
        loc = np.concatenate([g + b, ag + b, [scn.mu_z]])
        w = rng.exponential(1.0)
        draw = loc + math.sqrt(w) * (F @ rng.standard_normal(F.shape[1]))
        subjects.append(Subject(str(i), draw[:n], draw[n:2 * n], X))
        zs.append(draw[-1])
    return select_sample(_dataset(subjects, div), np.array(zs), scn, rng)


def sim2_selection_rates(scenario: SimScenario, n_populations, rng):
    """Selection rate of each of ``n_populations`` sim-2 populations.

    Draws only what selection depends on: tooth counts, the mixing
    variable, and Z from its marginal under the repaired joint scale of
    each tooth count. Same law as ``gen_sim2(...).selection_rate``.
    """
    scn = scenario
    N = scn.N
    n = 2 + rng.poisson(scn.poisson_mean, size=(n_populations, N))
    yy = lambda k: scn.d2 * np.ones((2 * k, 2 * k)) + scn.sigma2 * np.eye(2 * k)  # noqa: E731
    var_z = np.zeros(n.max() + 1)
    for k in np.unique(n):
        var_z[k] = nearest_psd(joint_scale(int(k), yy(int(k)), scn.rho, scn.sigma2_z))[-1, -1]
    if math.isinf(scn.nu):
        w = np.ones(n.shape)
    else:
        w = rng.gamma(0.5 * scn.nu, 2.0 / scn.nu, size=n.shape) ** -0.5
    z = scn.mu_z + w * np.sqrt(var_z[n]) * rng.standard_normal(n.shape)
    pi = selection_probability(z, scn.zeta0, scn.zeta1)
    return np.mean(rng.random(n.shape) < pi, axis=1)


def simulate(scenario: SimScenario, rng):
    """Dispatch on ``scenario.which``."""
    return {"sim1": gen_sim1, "sim2": gen_sim2, "sim3": gen_sim3}[scenario.which](scenario, rng)


def index_grid(n=1000):
    return np.linspace(-1.0, 1.0, n)

