import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import special, stats

from stgp.simlab import (
    SimScenario,
    gen_covariates,
    gen_sim1,
    gen_sim2,
    gen_sim3,
    index_grid,
    joint_scale,
    nearest_psd,
    selection_probability,
    sim2_selection_rates,
    simulate,
    true_index,
    true_state,
)


def mixing_moments(nu):
    # E[U^-1/2] and E[U^-1] for U ~ Gamma(nu/2, rate nu/2)
    m1 = math.exp(0.5 * math.log(nu / 2) + special.gammaln((nu - 1) / 2) - special.gammaln(nu / 2))
    return m1, nu / (nu - 2)


def st_pair_moments(scn):
    # variance of one coordinate and covariance of PD/CAL at the same tooth
    m1, m2 = mixing_moments(scn.nu)
    skew = (2 / math.pi) * m1**2 * scn.delta**2
    var = m2 * (scn.sigma2 + scn.d2 + scn.delta**2) - skew
    cov = m2 * (scn.d2 + scn.delta**2) - skew
    return var, cov


def first_tooth(dataset, scn):
    pd, cal = [], []
    for s in dataset.subjects:
        g = true_index(np.clip(s.X[0] @ scn.beta, -1, 1))
        pd.append(s.y_pd[0] - g)
        cal.append(s.y_cal[0] - scn.a * g)
    return np.array(pd), np.array(cal)


def check_moments(pd, cal, scn):
    var, cov = st_pair_moments(scn)
    n = pd.size
    assert abs(pd.mean()) < 4 * pd.std() / math.sqrt(n)
    v = (pd - pd.mean()) ** 2
    assert abs(v.mean() - var) < 4 * v.std() / math.sqrt(n)
    c = (pd - pd.mean()) * (cal - cal.mean())
    assert abs(c.mean() - cov) < 4 * c.std() / math.sqrt(n)


class TestScenario:
    def test_defaults(self):
        s = SimScenario()
        assert (s.a, s.delta, s.d2, s.sigma2, s.nu) == (1.5, 0.6, 0.1, 0.5, 5.89)
        assert np.linalg.norm(s.beta) == pytest.approx(1.0, abs=1e-15)
        np.testing.assert_allclose(s.beta[:6], 1 / math.sqrt(6))
        assert np.all(s.beta[6:] == 0)

    @pytest.mark.parametrize("kw", [{"which": "sim4"}, {"N": 0}, {"nu": 2.0}, {"sigma2": -1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SimScenario(**kw)

    def test_truth_reports_sim3_variance(self):
        assert SimScenario("sim3").truth()["sigma2"] == 0.6

    def test_true_state(self):
        st_ = true_state(SimScenario(N=7), L=5)
        assert st_.b.shape == (7,) and st_.xi.shape == (6,)
        np.testing.assert_allclose(st_.beta, SimScenario().beta)


class TestTrueIndex:
    def test_values(self):
        assert true_index(0.0) == 2.5
        assert true_index(1.0) == pytest.approx(4.999998566742140604, rel=1e-15)
        assert true_index(-1.0) == pytest.approx(1.4332578593959695584e-6, rel=1e-12)

    def test_monotone(self):
        assert np.all(np.diff(true_index(index_grid())) > 0)

    def test_grid(self):
        x = index_grid()
        assert x.size == 1000 and x[0] == -1 and x[-1] == 1


@pytest.fixture(scope="module")
def cov():
    return gen_covariates(20_000, np.random.default_rng(3))


@pytest.fixture(scope="module")
def sim():
    scn = SimScenario("sim3", N=20_000, rho=0.05)
    return scn, gen_sim3(scn, np.random.default_rng(13))


class TestCovariates:
    def test_tooth_counts(self, cov):
        n = np.array([c[0] for c in cov])
        assert n.min() >= 2
        assert abs(n.mean() - 10) < 4 * math.sqrt(8 / n.size)

    def test_subject_level_rows(self, cov):
        for n, X in cov[:200]:
            assert X.shape == (n, 10)
            assert np.all(X == X[0])

    def test_binary_frequencies(self, cov):
        rows = np.array([X[0] for _, X in cov])
        N = rows.shape[0]
        for col, p in [(0, 0.5), (1, 0.13), (4, 0.5), (8, 0.5)]:
            assert abs(rows[:, col].mean() - p) < 4 * math.sqrt(p * (1 - p) / N)

    def test_three_level_dummies(self, cov):
        rows = np.array([X[0] for _, X in cov])
        for cols in [(2, 3), (6, 7)]:
            s = rows[:, cols].sum(axis=1)
            assert set(np.unique(s)) <= {0.0, 1.0}
            assert abs(rows[:, cols[0]].mean() - 1 / 3) < 0.02

    def test_correlated_continuous(self, cov):
        rows = np.array([X[0] for _, X in cov])
        for b, c in [(4, 5), (8, 9)]:
            on = rows[:, b] == 1
            assert rows[on, c].mean() == pytest.approx(1.0, abs=0.05)
            assert rows[~on, c].mean() == pytest.approx(-1.0, abs=0.05)
            assert np.corrcoef(rows[:, b], rows[:, c])[0, 1] > 0.5


class TestSim1:
    def test_seed_determinism(self):
        scn = SimScenario(N=20)
        a = gen_sim1(scn, np.random.default_rng(11)).dataset
        b = gen_sim1(scn, np.random.default_rng(11)).dataset
        for s, t in zip(a.subjects, b.subjects):
            np.testing.assert_array_equal(s.y, t.y)
            np.testing.assert_array_equal(s.X, t.X)

    def test_rows_scaled(self):
        ds = gen_sim1(SimScenario(N=50), np.random.default_rng(1)).dataset
        assert max(np.linalg.norm(s.X, axis=1).max() for s in ds.subjects) < 1
        assert ds.row_scale > 1 and ds.P == 10

    def test_latent_structure(self):
        scn = SimScenario(N=30)
        sim = gen_sim1(scn, np.random.default_rng(5))
        assert np.all(sim.s >= 0) and np.all(sim.u > 0)
        for s, g in zip(sim.dataset.subjects, sim.g):
            np.testing.assert_allclose(g, true_index(s.X @ scn.beta))

    def test_marginal_moments(self):
        scn = SimScenario(N=20_000)
        sim = gen_sim1(scn, np.random.default_rng(8))
        check_moments(*first_tooth(sim.dataset, scn), scn)

    def test_noise_variance(self):
        scn = SimScenario(N=20_000)
        sim = gen_sim1(scn, np.random.default_rng(9))
        # per-subject within-tooth noise has variance sigma2 / u_i
        r = np.array([np.mean((s.y_pd - g - b) ** 2 * u) for s, g, b, u in
                      zip(sim.dataset.subjects, sim.g, sim.b, sim.u)])
        assert abs(r.mean() - scn.sigma2) < 4 * r.std() / math.sqrt(r.size)

    def test_gaussian_special_case(self):
        scn = SimScenario(N=5000, delta=0.0, nu=math.inf)
        sim = gen_sim1(scn, np.random.default_rng(10))
        assert np.all(sim.u == 1.0) and np.all(sim.s >= 0)
        pd, _ = first_tooth(sim.dataset, scn)
        assert stats.shapiro(pd[:4000]).pvalue > 1e-3


class TestNearestPsd:
    @settings(max_examples=40)
    @given(arrays(float, (5, 5), elements=st.floats(-3, 3)))
    def test_output_psd_and_idempotent(self, A):
        M = nearest_psd(A)
        assert np.linalg.eigvalsh(M).min() > -1e-9
        np.testing.assert_allclose(nearest_psd(M), M, atol=1e-9)

    def test_psd_input_unchanged(self, rng):
        G = rng.normal(size=(6, 6))
        A = G @ G.T
        np.testing.assert_allclose(nearest_psd(A), A, atol=1e-12)

    def test_default_joint_scale_needs_repair(self):
        n = 4
        yy = 0.1 * np.ones((8, 8)) + 0.5 * np.eye(8)
        J = joint_scale(n, yy, 36.0, 0.6)
        assert np.linalg.eigvalsh(J).min() < 0
        assert J[0, -1] == 36.0 and J[-1, -1] == 0.6


class TestSim2:
    def test_shapes_and_weights(self):
        scn = SimScenario("sim2", N=400)
        sim = gen_sim2(scn, np.random.default_rng(2))
        assert sim.z.shape == (400,) and sim.selected.sum() == sim.sample.N
        w = sim.sample.weights
        assert np.all(w >= 1) and w.sum() == pytest.approx(400)

    def test_selection_rate_near_18(self):
        rates = sim2_selection_rates(SimScenario("sim2", N=1000), 2000, np.random.default_rng(4))
        assert abs(rates.mean() - 0.18) < 0.02

    def test_fast_rates_match_generator(self):
        scn = SimScenario("sim2", N=200)
        rng = np.random.default_rng(6)
        full = np.array([gen_sim2(scn, rng).selection_rate for _ in range(150)])
        fast = sim2_selection_rates(scn, 20_000, rng)
        se = math.sqrt(full.var(ddof=1) / full.size + fast.var(ddof=1) / fast.size)
        assert abs(full.mean() - fast.mean()) < 4 * se
        assert full.std() == pytest.approx(fast.std(), rel=0.25)

    def test_zeta1_zero_is_uninformative(self):
        scn = SimScenario("sim2", N=4000, zeta1=0.0)
        sim = gen_sim2(scn, np.random.default_rng(7))
        np.testing.assert_allclose(sim.pi, special.expit(-1.8))
        p = sim.pi[0]
        assert abs(sim.selection_rate - p) < 4 * math.sqrt(p * (1 - p) / 4000)
        assert stats.mannwhitneyu(sim.z[sim.selected], sim.z[~sim.selected]).pvalue > 1e-3

    def test_selection_favors_large_z(self):
        sim = gen_sim2(SimScenario("sim2", N=2000), np.random.default_rng(8))
        assert sim.z[sim.selected].mean() > sim.z[~sim.selected].mean()

    def test_selection_probability(self):
        assert selection_probability(0.0, -1.8, 0.1) == pytest.approx(special.expit(-1.8))
        assert selection_probability(18.0, -1.8, 0.1) == pytest.approx(0.5)

    def test_marginal_matches_sim1_when_scale_is_psd(self):
        # with a small cross-covariance the joint scale needs no repair and
        # the responses keep the sim-1 skew-t law
        scn = SimScenario("sim2", N=20_000, rho=0.05)
        sim = gen_sim2(scn, np.random.default_rng(12))
        check_moments(*first_tooth(sim.population, scn), scn)


class TestSim3:
    def test_intercept_mean(self, sim):
        scn, s = sim
        pd, _ = first_tooth(s.population, scn)
        # Gamma(1, 1) intercept plus mean-zero Laplace noise
        assert abs(pd.mean() - 1.0) < 4 * pd.std() / math.sqrt(pd.size)
        v = (pd - pd.mean()) ** 2
        assert abs(v.mean() - 1.6) < 4 * v.std() / math.sqrt(pd.size)

    def test_laplace_kurtosis(self, sim):
        scn, s = sim
        pd, cal = first_tooth(s.population, scn)
        d = pd - cal  # intercept cancels; sqrt(W) times a normal with variance 1.2
        assert abs(d.var() - 1.2) < 0.05
        assert stats.kurtosis(d, fisher=False) == pytest.approx(6.0, abs=0.6)

    def test_dispatch(self):
        out = simulate(SimScenario("sim3", N=50), np.random.default_rng(0))
        assert out.population.N == 50
