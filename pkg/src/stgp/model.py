"""Data model for the stacked PD/CAL single-index mixed model.

For subject i with n_i teeth the stacked response Y_i = (Y_i^P; Y_i^C)
of length 2 n_i follows

    Y_i = theta_i + 1 b_i + eps_i,   theta_i = (g(X_i beta); a g(X_i beta)),
    eps_i | u_i ~ N(0, sigma2 / u_i I),
    b_i | s_i, u_i ~ N(delta (h(nu) + s_i), d2 / u_i),
    s_i | u_i ~ N+(0, 1 / u_i),   u_i ~ Gamma(nu/2, nu/2).

Integrating out (b_i, s_i, u_i) gives the subject-level skew-t law
ST_{2n_i}(theta_i + h(nu) delta 1, Psi_i, delta 1, nu) with the compound
symmetry scale Psi_i = d2 11' + sigma2 I.

Internally the dataset is also kept in packed form: all teeth of all
subjects stacked row-wise, subjects contiguous, so per-subject sums are
``np.add.reduceat`` calls.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np
from scipy.special import gammaln, log_ndtr

from . import monobasis
from .errors import DatasetError, DomainError
from .monobasis import BasisSpec
from .stdist import LOG2, h_of_nu, student_t_logcdf

ROW_SCALE_EPS = 1e-9
_NORM_TOL = 1e-12


@dataclass(frozen=True)
class Subject:
    """One subject: per-tooth PD and CAL responses and covariate rows."""

    id: str
    y_pd: np.ndarray
    y_cal: np.ndarray
    X: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        y_pd = np.asarray(self.y_pd, dtype=float).ravel()
        y_cal = np.asarray(self.y_cal, dtype=float).ravel()
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        n = y_pd.shape[0]
        if n < 1:
            raise DatasetError(f"subject {self.id}: needs at least one tooth")
        if y_cal.shape[0] != n or X.shape[0] != n:
            raise DatasetError(
                f"subject {self.id}: inconsistent lengths pd={n}, cal={y_cal.shape[0]}, X rows={X.shape[0]}"
            )
        if not (np.all(np.isfinite(y_pd)) and np.all(np.isfinite(y_cal)) and np.all(np.isfinite(X))):
            raise DatasetError(f"subject {self.id}: non-finite values")
        if not self.weight > 0:
            raise DatasetError(f"subject {self.id}: weight must be positive, got {self.weight}")
        object.__setattr__(self, "y_pd", y_pd)
        object.__setattr__(self, "y_cal", y_cal)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "weight", float(self.weight))
        object.__setattr__(self, "id", str(self.id))

    @property
    def n_teeth(self):
        return self.y_pd.shape[0]

    @property
    def y(self):
        """Stacked response (PD; CAL)."""
        return np.concatenate([self.y_pd, self.y_cal])


def max_row_norm(subjects):
    return max(float(np.max(np.linalg.norm(s.X, axis=1))) for s in subjects)


def scale_rows(subjects, eps=ROW_SCALE_EPS):
    """Divide every covariate row by (1 + eps) times the largest row norm.

    Returns the rescaled subjects and the divisor used.  After scaling
    |x' beta| < 1 for every row and every unit vector beta.
    """
    subjects = list(subjects)
    top = max_row_norm(subjects)
    if top == 0:
        return subjects, 1.0
    div = (1.0 + eps) * top
    return [replace(s, X=s.X / div) for s in subjects], div


@dataclass(frozen=True)
class PanelDataset:
    """Subjects plus the covariate grouping used by the shrinkage prior.

    Column indices in ``group_map`` and ``normal_prior_columns`` are
    0-based and must partition ``range(P)``.
    """

    subjects: tuple
    group_map: tuple = None
    normal_prior_columns: tuple = ()
    row_scale: float = 1.0
    n_covariates: int = None

    def __post_init__(self):
        subjects = tuple(self.subjects)
        if subjects:
            P = subjects[0].X.shape[1]
        elif self.n_covariates is not None:
            P = int(self.n_covariates)
        else:
            raise DatasetError("an empty dataset needs n_covariates")
        for s in subjects:
            if s.X.shape[1] != P:
                raise DatasetError(f"subject {s.id}: {s.X.shape[1]} covariates, expected {P}")
            if np.any(np.linalg.norm(s.X, axis=1) > 1 + _NORM_TOL):
                raise DatasetError(f"subject {s.id}: covariate row with L2 norm > 1; scale rows first")
        normal = tuple(int(c) for c in self.normal_prior_columns)
        if self.group_map is None:
            groups = tuple((j,) for j in range(P) if j not in normal)
        else:
            groups = tuple(tuple(int(c) for c in g) for g in self.group_map)
        if any(len(g) == 0 for g in groups):
            raise DatasetError("empty horseshoe group")
        cols = sorted(normal + tuple(c for g in groups for c in g))
        if cols != list(range(P)):
            raise DatasetError(
                f"groups and normal-prior columns must partition columns 0..{P - 1}, got {cols}"
            )
        ids = [s.id for s in subjects]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate subject ids")
        if len(subjects) == 1:
            warnings.warn("dataset has a single subject", stacklevel=2)
        if subjects and sum(s.n_teeth for s in subjects) <= len(subjects):
            warnings.warn("every subject has a single tooth; variance components are weakly identified",
                          stacklevel=2)
        object.__setattr__(self, "subjects", subjects)
        object.__setattr__(self, "group_map", groups)
        object.__setattr__(self, "normal_prior_columns", normal)
        object.__setattr__(self, "n_covariates", P)

    @property
    def N(self):
        return len(self.subjects)

    @property
    def P(self):
        return self.n_covariates

    @property
    def n_groups(self):
        return len(self.group_map)

    @cached_property
    def column_group(self):
        """Per-column group index, -1 for normal-prior columns."""
        out = np.full(self.P, -1, dtype=np.intp)
        for j, g in enumerate(self.group_map):
            out[list(g)] = j
        return out

    @cached_property
    def packed(self):
        return PackedData.from_subjects(self.subjects, self.P)

    @property
    def weights(self):
        return np.array([s.weight for s in self.subjects])

    def subset(self, indices):
        """New dataset made of ``subjects[indices]`` (repeats allowed, ids made unique)."""
        subs = []
        seen = {}
        for k in indices:
            s = self.subjects[int(k)]
            c = seen.get(s.id, 0)
            seen[s.id] = c + 1
            subs.append(s if c == 0 else replace(s, id=f"{s.id}#{c}"))
        return replace(self, subjects=tuple(subs))


@dataclass(frozen=True)
class PackedData:
    """Row-stacked view: teeth of all subjects, subjects contiguous."""

    X: np.ndarray
    y_pd: np.ndarray
    y_cal: np.ndarray
    n_teeth: np.ndarray
    starts: np.ndarray
    subject_of_row: np.ndarray

    @classmethod
    def from_subjects(cls, subjects, P):
        n = np.array([s.n_teeth for s in subjects], dtype=np.intp)
        starts = np.concatenate([[0], np.cumsum(n)[:-1]]).astype(np.intp)
        return cls(
            X=np.vstack([s.X for s in subjects]) if subjects else np.zeros((0, P)),
            y_pd=np.concatenate([s.y_pd for s in subjects]) if subjects else np.zeros(0),
            y_cal=np.concatenate([s.y_cal for s in subjects]) if subjects else np.zeros(0),
            n_teeth=n,
            starts=starts,
            subject_of_row=np.repeat(np.arange(len(subjects)), n),
        )

    def subject_sum(self, v):
        """Sum of row values within each subject; ``v`` may be 1-D or 2-D (rows first)."""
        v = np.asarray(v)
        if self.starts.shape[0] == 0:
            return np.zeros((0,) + v.shape[1:])
        return np.add.reduceat(v, self.starts, axis=0)


@dataclass
class ModelState:
    """All parameters and per-subject latents of one chain."""

    a: float
    beta_raw: np.ndarray
    xi: np.ndarray
    delta: float
    sigma2: float
    d2: float
    nu: float
    rho1_sq: float
    rho2: float
    lam: np.ndarray
    tau: float
    b: np.ndarray
    s: np.ndarray
    u: np.ndarray

    @property
    def beta(self):
        """Unit-norm index direction."""
        norm = np.linalg.norm(self.beta_raw)
        if norm == 0:
            raise DomainError("beta_raw is the zero vector")
        return self.beta_raw / norm

    @property
    def h(self):
        return h_of_nu(self.nu)

    def copy(self):
        out = replace(self)
        for name in ("beta_raw", "xi", "lam", "b", "s", "u"):
            setattr(out, name, np.array(getattr(self, name), dtype=float))
        return out

    def validate(self):
        if np.any(self.xi < 0):
            raise DomainError("xi has negative entries")
        for name in ("sigma2", "d2", "rho1_sq", "rho2"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if not self.nu > 2:
            raise DomainError(f"nu must exceed 2, got {self.nu}")
        if not 0 < self.tau < 1:
            raise DomainError(f"tau must lie in (0, 1), got {self.tau}")
        if np.any(self.lam <= 0) or np.any(self.u <= 0) or np.any(self.s < 0):
            raise DomainError("latent positivity violated")
        self.beta  # noqa: B018  (raises on a zero vector)


# ---------------------------------------------------------------------------
# Mean structure
# ---------------------------------------------------------------------------


def index_values(X, beta):
    """X beta, clipped onto [-1, 1] to absorb rounding at the boundary."""
    v = np.asarray(X) @ beta
    if np.any(np.abs(v) > 1 + 1e-9):
        raise DomainError("index value outside [-1, 1]; covariate rows are not scaled")
    return np.clip(v, -1.0, 1.0)


def g_rows(X, state: ModelState, basis: BasisSpec):
    """g(X beta) row by row."""
    return monobasis.eval_index_unchecked(index_values(X, state.beta), state.xi, basis)


def theta_i(subject: Subject, state: ModelState, basis: BasisSpec):
    """Stacked mean (g(X_i beta); a g(X_i beta)) of length 2 n_i."""
    g = g_rows(subject.X, state, basis)
    return np.concatenate([g, state.a * g])


# ---------------------------------------------------------------------------
# Compound symmetry algebra
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CSInverse:
    """The inverse sigma2^{-1} I - c 11' of d2 11' + sigma2 I in dimension n."""

    n: int
    sigma2: float
    c: float

    def matvec(self, x):
        x = np.asarray(x, dtype=float)
        return x / self.sigma2 - self.c * np.sum(x, axis=0)

    def quad(self, x, y=None):
        x = np.asarray(x, dtype=float)
        y = x if y is None else np.asarray(y, dtype=float)
        return float(x @ y / self.sigma2 - self.c * np.sum(x) * np.sum(y))

    def ones_quad(self):
        """1' Psi^{-1} 1."""
        return self.n / self.sigma2 - self.c * self.n * self.n

    def dense(self):
        return np.eye(self.n) / self.sigma2 - self.c * np.ones((self.n, self.n))


def cs_coef(n2, d2, sigma2):
    """Rank-one coefficient c and log-determinant for d2 11' + sigma2 I."""
    ratio = n2 * d2 / sigma2
    c = d2 / (sigma2 * sigma2 * (1.0 + ratio))
    logdet = n2 * np.log(sigma2) + np.log1p(ratio)
    return c, logdet


def cs_inverse_logdet(n2, d2, sigma2):
    """Inverse operator and log-determinant of Psi = d2 11' + sigma2 I (size n2)."""
    if not sigma2 > 0:
        raise DomainError(f"sigma2 must be positive, got {sigma2}")
    if not d2 >= 0:
        raise DomainError(f"d2 must be nonnegative, got {d2}")
    if int(n2) < 1:
        raise DomainError(f"dimension must be positive, got {n2}")
    c, logdet = cs_coef(int(n2), d2, sigma2)
    return CSInverse(int(n2), float(sigma2), float(c)), float(logdet)


# ---------------------------------------------------------------------------
# Marginal likelihood
# ---------------------------------------------------------------------------


def _st_cs_logpdf(sum_e, sum_e2, m, r, sigma2, delta, nu):
    """Skew-t log density when Sigma = r 11' + sigma2 I and skewness delta 1.

    Only the per-subject sums of the centred residual e = y - location and
    of e^2 are needed.  Vectorised over subjects.
    """
    c, logdet = cs_coef(m, r, sigma2)
    maha = sum_e2 / sigma2 - c * sum_e * sum_e
    k = 1.0 / (sigma2 + m * r)  # 1' Sigma^{-1} e = k sum_e
    proj = delta * k * sum_e
    lam = 1.0 - delta * delta * m * k
    if math.isinf(nu):
        core = -0.5 * (m * math.log(2 * math.pi) + logdet + maha)
        skew = log_ndtr(proj / np.sqrt(lam))
    else:
        core = (
            gammaln(0.5 * (nu + m))
            - gammaln(0.5 * nu)
            - 0.5 * m * math.log(nu * math.pi)
            - 0.5 * logdet
            - 0.5 * (nu + m) * np.log1p(maha / nu)
        )
        arg = proj * np.sqrt((nu + m) / (nu + maha)) / np.sqrt(lam)
        skew = _t_logcdf_vec(arg, nu + m)
    return LOG2 + core + skew


def _t_logcdf_vec(x, dof):
    x, dof = np.broadcast_arrays(np.asarray(x, float), np.asarray(dof, float))
    out = np.empty(x.shape)
    for v in np.unique(dof):
        sel = dof == v
        out[sel] = student_t_logcdf(x[sel], v)
    return out


def marginal_loglik_all(dataset: PanelDataset, state: ModelState, basis: BasisSpec):
    """Subject-level skew-t log-likelihoods with (b_i, s_i, u_i) integrated out."""
    pk = dataset.packed
    g = g_rows(pk.X, state, basis)
    shift = state.h * state.delta if state.delta != 0 else 0.0
    e_p = pk.y_pd - g - shift
    e_c = pk.y_cal - state.a * g - shift
    sum_e = pk.subject_sum(e_p + e_c)
    sum_e2 = pk.subject_sum(e_p * e_p + e_c * e_c)
    m = 2.0 * pk.n_teeth
    return _st_cs_logpdf(sum_e, sum_e2, m, state.d2 + state.delta**2, state.sigma2, state.delta, state.nu)


def marginal_loglik_subject(subject: Subject, state: ModelState, basis: BasisSpec):
    """Skew-t log-likelihood of one subject's stacked response."""
    e = subject.y - theta_i(subject, state, basis) - state.h * state.delta
    m = 2.0 * subject.n_teeth
    out = _st_cs_logpdf(np.sum(e), np.sum(e * e), m, state.d2 + state.delta**2, state.sigma2,
                        state.delta, state.nu)
    return float(out)


@dataclass(frozen=True)
class Residuals:
    """Per-tooth residuals Y - theta - 1 b split into PD and CAL streams."""

    pd: np.ndarray
    cal: np.ndarray

    @property
    def stacked(self):
        return np.concatenate([self.pd, self.cal])

    def __len__(self):
        return self.pd.shape[0] + self.cal.shape[0]


def residuals(dataset: PanelDataset, state: ModelState, basis: BasisSpec) -> Residuals:
    pk = dataset.packed
    g = g_rows(pk.X, state, basis)
    b = np.asarray(state.b)[pk.subject_of_row]
    return Residuals(pd=pk.y_pd - g - b, cal=pk.y_cal - state.a * g - b)
