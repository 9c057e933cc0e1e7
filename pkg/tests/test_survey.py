import math
from dataclasses import replace

import numpy as np
import pytest
from conftest import make_dataset
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stgp.errors import DomainError, ReplicateFailure
from stgp.sampler import FitConfig, run_chain
from stgp.survey import (
    WeightedSample,
    bounded_rescale,
    mcmc_prs,
    pseudo_population,
    replicate_rngs,
    urn_probabilities,
    wfpbb,
)

pytestmark = pytest.mark.filterwarnings("ignore::UserWarning")

SMALL = FitConfig(iterations=40, burn_in=20, thin=2, L=4, seed=17)


def weighted(rng, N=6, weights=None):
    ds = make_dataset(rng, N=N)
    w = np.ones(N) if weights is None else np.asarray(weights, float)
    subs = tuple(replace(s, weight=float(x)) for s, x in zip(ds.subjects, w))
    return replace(ds, subjects=subs)


def assert_same_draws(a, b):
    for name in a.scalars:
        np.testing.assert_array_equal(a.scalars[name], b.scalars[name])
    np.testing.assert_array_equal(a.beta_raw, b.beta_raw)
    np.testing.assert_array_equal(a.xi, b.xi)
    np.testing.assert_array_equal(a.b, b.b)
    np.testing.assert_array_equal(a.loglik, b.loglik)


class TestBoundedRescale:
    def test_plain_scaling(self):
        np.testing.assert_allclose(bounded_rescale([1, 2, 3], 12), [2, 4, 6])

    def test_pins_small_weights(self):
        out = bounded_rescale([0.01, 5, 5], 10)
        assert out[0] == 1.0
        np.testing.assert_allclose(out[1:], 4.5)

    def test_total_too_small(self):
        with pytest.raises(DomainError):
            bounded_rescale([1, 1, 1], 2)

    @settings(max_examples=100)
    @given(arrays(float, st.integers(1, 30), elements=st.floats(1e-3, 1e3)), st.floats(1.0, 50.0))
    def test_sum_and_floor(self, w, ratio):
        total = ratio * w.size
        out = bounded_rescale(w, total)
        assert out.sum() == pytest.approx(total, rel=1e-10)
        assert out.min() >= 1.0 - 1e-12
        # order of the free weights is preserved
        assert np.all(np.diff(out[np.argsort(w)]) >= -1e-9)


class TestWeightedSample:
    def test_sum_must_match(self):
        with pytest.raises(DomainError, match="population size"):
            WeightedSample(("a", "b"), np.array([1.0, 2.0]), 4)

    def test_population_smaller_than_sample(self):
        with pytest.raises(DomainError):
            WeightedSample(("a", "b"), np.array([0.5, 0.5]), 1)

    def test_nonpositive(self):
        with pytest.raises(DomainError):
            WeightedSample(("a", "b"), np.array([3.0, 0.0]), 3)

    def test_from_weights_rescale(self):
        s = WeightedSample.from_weights("abc", [1, 1, 2], population_size=20, rescale=True)
        assert s.weights.sum() == pytest.approx(20) and s.sample_size == 3


class TestUrn:
    def test_uniform_first_step(self):
        n, N = 8, 40
        p = urn_probabilities(np.full(n, N / n), np.zeros(n), 1, (N - n) / n)
        np.testing.assert_allclose(p, 1 / n)

    @settings(max_examples=200)
    @given(st.data())
    def test_probabilities_sum_to_one(self, data):
        n = data.draw(st.integers(1, 12))
        w = 1 + data.draw(arrays(float, n, elements=st.floats(0, 20)))
        N = w.sum()
        extra = N - n
        if extra < 1:
            return
        n_star = extra / n
        k = data.draw(st.integers(1, int(extra)))
        picks = data.draw(st.lists(st.integers(0, n - 1), min_size=k - 1, max_size=k - 1))
        counts = np.bincount(picks, minlength=n).astype(float)
        p = urn_probabilities(w, counts, k, n_star)
        assert p.sum() == pytest.approx(1.0, abs=1e-10)
        assert p.min() >= -1e-12

    def test_rejects_weight_below_one(self):
        s = WeightedSample(("a", "b"), np.array([0.5, 3.5]), 4)
        with pytest.raises(DomainError, match="at least 1"):
            pseudo_population(s, np.random.default_rng(0))

    def test_population_counts(self, rng):
        s = WeightedSample(tuple("abcd"), np.array([1.0, 2.0, 3.0, 6.0]), 12)
        c = pseudo_population(s, rng)
        assert c.sum() == 12 and c.min() >= 1

    def test_expected_counts_equal_weights(self):
        w = np.array([1.0, 1.5, 2.5, 4.0, 11.0])
        s = WeightedSample(tuple("abcde"), w, 20)
        rng = np.random.default_rng(21)
        C = np.array([pseudo_population(s, rng) for _ in range(3000)])
        m, se = C.mean(axis=0), C.std(axis=0, ddof=1) / math.sqrt(C.shape[0])
        assert np.all(np.abs(m - w) < 4 * np.maximum(se, 1e-12))
        assert np.all(C[:, 0] >= 1)


class TestWfpbb:
    def test_size_and_ids(self, rng):
        s = WeightedSample(tuple("abcdef"), np.array([1, 2, 3, 4, 5, 5.0]), 20)
        idx, counts = wfpbb(s, rng, return_counts=True)
        assert idx.shape == (6,) and idx.min() >= 0 and idx.max() < 6
        assert counts.sum() == 20

    def test_identity_when_population_equals_sample(self, rng):
        s = WeightedSample(tuple("abc"), np.ones(3), 3)
        np.testing.assert_array_equal(wfpbb(s, rng), [0, 1, 2])

    def test_resample_frequency_proportional_to_weight(self):
        w = np.array([1.0, 2.0, 3.0, 4.0])
        s = WeightedSample(tuple("abcd"), w, 10)
        rng = np.random.default_rng(5)
        F = np.array([np.bincount(wfpbb(s, rng), minlength=4) for _ in range(4000)])
        target = 4 * w / w.sum()
        se = F.std(axis=0, ddof=1) / math.sqrt(F.shape[0])
        assert np.all(np.abs(F.mean(axis=0) - target) < 4 * se)

    def test_seeded(self):
        s = WeightedSample(tuple("abcde"), np.array([1, 2, 3, 4, 10.0]), 20)
        a = wfpbb(s, np.random.default_rng(3))
        b = wfpbb(s, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)


class TestMcmcPrs:
    def test_replicate_streams_distinct(self):
        r = replicate_rngs(4, 3)
        vals = [x.random() for pair in r for x in pair]
        assert len(set(vals)) == 6

    def test_single_replicate_without_synthesis_is_run_chain(self, rng):
        ds = weighted(rng)
        pooled = mcmc_prs(ds, SMALL, 1, population_size=ds.N, seed=9)
        _, chain_rng = replicate_rngs(9, 1)[0]
        direct = run_chain(ds, SMALL, chain_rng, replicate=0)
        assert_same_draws(pooled, direct)

    def test_pooled_count(self, rng):
        ds = weighted(rng, weights=[1, 2, 3, 1, 2, 3])
        out = mcmc_prs(ds, SMALL, 3, seed=2)
        assert out.n_draws == 3 * SMALL.n_retained
        np.testing.assert_array_equal(np.unique(out.replicate), [0, 1, 2])

    def test_worker_count_does_not_change_draws(self, rng):
        ds = weighted(rng, weights=[1, 2, 3, 1, 2, 3])
        serial = mcmc_prs(ds, SMALL, 3, seed=8, workers=1)
        parallel = mcmc_prs(ds, SMALL, 3, seed=8, workers=2)
        assert_same_draws(serial, parallel)

    def test_rescale_option(self, rng):
        ds = weighted(rng, weights=[0.2, 2, 3, 1, 2, 3])
        with pytest.raises(ReplicateFailure):
            mcmc_prs(ds, SMALL, 2, population_size=30, seed=1)
        out = mcmc_prs(ds, SMALL, 2, population_size=30, rescale=True, seed=1)
        assert out.n_draws == 2 * SMALL.n_retained

    def test_bad_J(self, rng):
        with pytest.raises(DomainError):
            mcmc_prs(weighted(rng), SMALL, 0)
