"""Survey-weight adjustment by weighted finite-population Bayesian bootstrap.

``wfpbb`` grows the observed sample into a pseudo-population with a
Polya urn whose initial counts are the survey weights, then draws a
sample of the original size from it.  ``mcmc_prs`` runs an independent
chain on each such pseudo-representative sample and pools the draws.

Seeds: replicate j uses ``SeedSequence(seed).spawn(J)[j]``, split again
into one stream for the resampling and one for the chain, so results do
not depend on the order in which replicates execute.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ReplicateFailure
from .model import PanelDataset
from .sampler import FitConfig, PosteriorDraws, run_chain

SUM_TOL = 1e-6
STEP_TOL = 1e-10


def bounded_rescale(weights, total):
    """Scale weights to sum to ``total`` while keeping every weight >= 1.

    Weights that would fall below 1 are pinned at 1 and the remainder is
    spread proportionally over the others; needs ``total >= len(weights)``.
    """
    w = np.asarray(weights, dtype=float)
    n = w.shape[0]
    if total < n:
        raise DomainError(f"total {total} is smaller than the number of units {n}")
    pinned = np.zeros(n, dtype=bool)
    while True:
        free = ~pinned
        out = np.ones(n)
        if free.any():
            out[free] = w[free] * (total - pinned.sum()) / w[free].sum()
        low = free & (out < 1.0)
        if not low.any():
            return out
        pinned |= low


@dataclass(frozen=True)
class WeightedSample:
    """Sample items with survey weights summing to the population size."""

    items: tuple
    weights: np.ndarray
    population_size: int

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        items = tuple(self.items)
        if w.shape != (len(items),):
            raise DomainError(f"{len(items)} items but weights of shape {w.shape}")
        if len(items) == 0:
            raise DomainError("empty sample")
        if np.any(~np.isfinite(w)) or np.any(w <= 0):
            raise DomainError("weights must be positive and finite")
        if int(self.population_size) < len(items):
            raise DomainError(
                f"population size {self.population_size} is smaller than the sample size {len(items)}"
            )
        if abs(w.sum() - self.population_size) > SUM_TOL * self.population_size:
            raise DomainError(
                f"weights sum to {w.sum():.6g}, expected the population size {self.population_size}"
            )
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "population_size", int(self.population_size))

    @property
    def sample_size(self):
        return len(self.items)

    @classmethod
    def from_weights(cls, items, weights, population_size=None, rescale=False):
        """Build a sample; with ``rescale`` the weights are mapped by :func:`bounded_rescale`."""
        w = np.asarray(weights, dtype=float)
        if population_size is None:
            population_size = int(round(w.sum()))
        if rescale:
            w = bounded_rescale(w, population_size)
        return cls(tuple(items), w, int(population_size))

    @classmethod
    def from_dataset(cls, dataset: PanelDataset, population_size=None, rescale=False):
        return cls.from_weights([s.id for s in dataset.subjects], dataset.weights, population_size, rescale)


def urn_probabilities(weights, counts, k, n_star):
    """Selection probabilities at urn step ``k`` (1-based) given prior picks ``counts``."""
    n = weights.shape[0]
    N = weights.sum()
    num = weights - 1.0 + counts * n_star
    den = N - n + (k - 1) * n_star
    return num / den


def pseudo_population(sample: WeightedSample, rng):
    """Counts of each sampled unit in the pseudo-population of size N_pop.

    Each unit appears once for itself plus the number of times the urn
    picked it during the N_pop - n synthetic draws.
    """
    w = sample.weights
    n = sample.sample_size
    N = sample.population_size
    if np.any(w < 1.0 - 1e-12):
        raise DomainError(
            f"every weight must be at least 1 (smallest is {w.min():.6g}); "
            "rescale the weights so that each unit represents at least itself"
        )
    extra = N - n
    counts = np.zeros(n)
    if extra == 0:
        return np.ones(n, dtype=np.int64)
    n_star = extra / n
    for k in range(1, extra + 1):
        p = urn_probabilities(w, counts, k, n_star)
        if np.any(p < -STEP_TOL) or abs(p.sum() - 1.0) > STEP_TOL * max(1.0, n):
            raise DomainError(f"urn step {k}: invalid probabilities (sum {p.sum():.12g}, min {p.min():.3g})")
        p = np.clip(p, 0.0, None)
        j = rng.choice(n, p=p / p.sum())
        counts[j] += 1
    return (counts + 1).astype(np.int64)


def wfpbb(sample: WeightedSample, rng, return_counts=False):
    """Pseudo-representative sample of size n (indices into ``sample.items``).

    The final draw from the pseudo-population is uniform with replacement.
    When the population size equals the sample size there is nothing to
    synthesize and the sample itself is returned.
    """
    counts = pseudo_population(sample, rng)
    n = sample.sample_size
    if sample.population_size == n:
        idx = np.arange(n)
    else:
        pop = np.repeat(np.arange(n), counts)
        idx = pop[rng.integers(0, pop.shape[0], size=n)]
    return (idx, counts) if return_counts else idx


def replicate_rngs(seed, J):
    """(resampling rng, chain rng) for each of ``J`` replicates."""
    out = []
    for child in np.random.SeedSequence(seed).spawn(J):
        a, b = child.spawn(2)
        out.append((np.random.default_rng(a), np.random.default_rng(b)))
    return out


def _replicate(args):
    j, dataset, config, population_size, rescale, seed, J = args
    res_rng, chain_rng = replicate_rngs(seed, J)[j]
    sample = WeightedSample.from_dataset(dataset, population_size, rescale)
    idx = wfpbb(sample, res_rng)
    return run_chain(dataset.subset(idx), config, chain_rng, replicate=j)


def mcmc_prs(dataset: PanelDataset, config: FitConfig, bootstrap_J: int, population_size=None,
             rescale=False, seed=None, workers=1) -> PosteriorDraws:
    """Pooled draws from ``bootstrap_J`` chains, each on its own WFPBB resample.

    Any failing replicate makes the whole call fail.
    """
    if bootstrap_J < 1:
        raise DomainError("bootstrap_J must be at least 1")
    seed = config.seed if seed is None else seed
    tasks = [(j, dataset, config, population_size, rescale, seed, bootstrap_J) for j in range(bootstrap_J)]
    results, failures = [None] * bootstrap_J, []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_replicate, t) for t in tasks]
            for j, fut in enumerate(futures):
                try:
                    results[j] = fut.result()
                except Exception as exc:  # noqa: BLE001 - collected and re-raised below
                    failures.append((j, exc))
    else:
        for j, t in enumerate(tasks):
            try:
                results[j] = _replicate(t)
            except Exception as exc:  # noqa: BLE001
                failures.append((j, exc))
    if failures:
        raise ReplicateFailure(failures)
    return PosteriorDraws.concatenate(results)
