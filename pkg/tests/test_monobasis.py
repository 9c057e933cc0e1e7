import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import integrate, special

from stgp.errors import ConstraintViolationError, DomainError
from stgp.monobasis import (
    BasisSpec,
    KernelParams,
    _psi_columns,
    design_matrix,
    evaluate_index,
    hat,
    kernel_cholesky,
    kernel_matrix,
    matern32,
    psi,
)

L2 = BasisSpec(2)
unit = st.floats(-1.0, 1.0)


def matern_bessel(r, rho1_sq, rho2, nu=1.5):
    # general Matern with smoothness nu, scaled so that nu = 3/2 has the sqrt(3) r / rho2 form
    z = np.sqrt(2 * nu) * np.asarray(r, float) / rho2
    return rho1_sq * 2 ** (1 - nu) / special.gamma(nu) * z**nu * special.kv(nu, z)


class TestBasisSpec:
    def test_knots(self):
        s = BasisSpec(25)
        assert s.knots[0] == -1.0 and s.knots[-1] == 1.0
        assert s.size == 26 and s.spacing == pytest.approx(0.08)
        np.testing.assert_allclose(np.diff(s.knots), 0.08, atol=1e-14)

    @pytest.mark.parametrize("L", [1, 0, 2.5])
    def test_bad_L(self, L):
        with pytest.raises(DomainError):
            BasisSpec(L)

    def test_kernel_params_positive(self):
        with pytest.raises(DomainError):
            KernelParams(0.0, 1.0)
        assert KernelParams(1.0, 2.0).rho3 == 1.5


class TestHat:
    def test_examples(self):
        assert hat(1, 0.0, L2) == 1.0
        assert hat(1, 0.5, L2) == 0.5
        assert hat(0, -1.0, L2) == 1.0 and hat(2, 1.0, L2) == 1.0

    def test_support(self):
        s = BasisSpec(4)
        assert hat(1, 0.5, s) == 0.0 and hat(3, -0.5, s) == 0.0

    def test_outside_domain(self):
        with pytest.raises(DomainError):
            hat(1, 1.01, L2)
        with pytest.raises(DomainError):
            psi(0, -1.5, L2)

    def test_bad_index(self):
        with pytest.raises(DomainError):
            hat(3, 0.0, L2)

    @given(unit, st.integers(2, 40))
    def test_partition_of_unity(self, x, L):
        s = BasisSpec(L)
        assert sum(hat(k, x, s) for k in range(s.size)) == pytest.approx(1.0, abs=1e-12)


class TestPsi:
    def test_examples(self):
        assert psi(1, 1.0, L2) == pytest.approx(1.0)
        assert psi(1, 0.0, L2) == pytest.approx(0.5)
        assert psi(0, 1.0, L2) == pytest.approx(0.5)

    def test_vanishes_at_left_end(self):
        s = BasisSpec(7)
        assert all(psi(k, -1.0, s) == 0.0 for k in range(s.size))

    def test_against_trapezoid(self, rng):
        s = BasisSpec(6)
        for x in rng.uniform(-1, 1, 100):
            k = int(rng.integers(0, s.size))
            t = np.linspace(-1, x, 20001)
            ref = integrate.trapezoid(hat(k, t, s), t)
            assert abs(psi(k, x, s) - ref) < 1e-6

    @given(unit, st.integers(2, 40))
    def test_sum_is_x_plus_one(self, x, L):
        s = BasisSpec(L)
        assert sum(psi(k, x, s) for k in range(s.size)) == pytest.approx(x + 1, abs=1e-12)

    @given(unit, unit, st.integers(2, 30))
    def test_nondecreasing(self, x1, x2, L):
        s = BasisSpec(L)
        lo, hi = min(x1, x2), max(x1, x2)
        k = np.arange(s.size)
        assert np.all(_psi_columns(np.array(hi), k, s) >= _psi_columns(np.array(lo), k, s) - 1e-15)


class TestDesignMatrix:
    def test_endpoint_rows(self):
        s = BasisSpec(5)
        D = design_matrix([-1.0, 1.0], s)
        assert np.all(D[0] == 0.0)
        np.testing.assert_allclose(D[1], [0.2, 0.4, 0.4, 0.4, 0.4, 0.2], atol=1e-15)

    def test_equal_inputs_equal_rows(self):
        D = design_matrix([0.3, -0.2, 0.3], BasisSpec(9))
        np.testing.assert_array_equal(D[0], D[2])

    def test_monotone_columns(self):
        D = design_matrix(np.linspace(-1, 1, 501), BasisSpec(11))
        assert np.all(np.diff(D, axis=0) >= -1e-15)

    def test_rejects_unscaled(self):
        with pytest.raises(DomainError):
            design_matrix([0.0, 1.2], L2)

    @settings(max_examples=50)
    @given(arrays(float, st.integers(1, 30), elements=unit), st.integers(2, 40))
    def test_matches_reference_columns(self, x, L):
        s = BasisSpec(L)
        ref = _psi_columns(x, np.arange(s.size), s)
        np.testing.assert_allclose(design_matrix(x, s), ref, atol=1e-14)


class TestEvaluateIndex:
    def test_left_end_is_zero(self, rng):
        s = BasisSpec(8)
        assert evaluate_index(-1.0, rng.uniform(0, 3, s.size), s) == 0.0

    def test_saturation_sum(self):
        assert evaluate_index(1.0, np.ones(3), L2) == pytest.approx(2.0)

    def test_negative_xi(self):
        with pytest.raises(ConstraintViolationError):
            evaluate_index(0.0, np.array([1.0, -0.1, 1.0]), L2)

    def test_wrong_length(self):
        with pytest.raises(DomainError):
            evaluate_index(0.0, np.ones(4), L2)

    def test_monotone_random_pairs(self, rng):
        s = BasisSpec(25)
        xi = rng.exponential(1.0, s.size)
        x1 = rng.uniform(-1, 1, 10_000)
        x2 = x1 + rng.uniform(0, 1, 10_000) * (1 - x1)
        assert np.all(evaluate_index(x2, xi, s) >= evaluate_index(x1, xi, s))

    @settings(max_examples=50)
    @given(arrays(float, 11, elements=st.floats(0, 10)), arrays(float, 20, elements=unit))
    def test_matches_design_product(self, xi, x):
        s = BasisSpec(10)
        np.testing.assert_allclose(evaluate_index(x, xi, s), design_matrix(x, s) @ xi, atol=1e-11)

    @settings(max_examples=50)
    @given(arrays(float, 9, elements=st.floats(0, 5)), st.floats(-0.999, 0.999))
    def test_finite_difference_slope(self, xi, x):
        s = BasisSpec(8)
        eps = 1e-6
        slope = (evaluate_index(x + eps, xi, s) - evaluate_index(x - eps, xi, s)) / (2 * eps)
        assert slope >= -1e-6
        hats = sum(xi[k] * hat(k, x, s) for k in range(s.size))
        assert slope == pytest.approx(hats, abs=1e-5 * (1 + xi.sum()))


class TestMatern:
    def test_zero_lag(self):
        assert matern32(0.0, KernelParams(2.3, 0.7)) == 2.3

    def test_characteristic_lag(self):
        kp = KernelParams(1.7, 0.9)
        assert matern32(0.9 / math.sqrt(3), kp) == pytest.approx(0.73575888234288464319 * 1.7, rel=1e-14)

    def test_bessel_oracle(self):
        kp = KernelParams(1.4, 0.6)
        r = np.linspace(0.01, 3.0, 20)
        np.testing.assert_allclose(matern32(r, kp), matern_bessel(r, 1.4, 0.6), rtol=0, atol=1e-10)

    def test_decreasing_and_vanishing(self):
        kp = KernelParams(1.0, 1.0)
        v = matern32(np.linspace(0, 60, 500), kp)
        assert np.all(np.diff(v) < 0) and v[-1] < 1e-40

    def test_negative_distance(self):
        with pytest.raises(DomainError):
            matern32(-0.1, KernelParams(1.0, 1.0))


class TestKernelMatrix:
    def test_diagonal_and_toeplitz(self):
        s, kp = BasisSpec(12), KernelParams(2.0, 0.5)
        K = kernel_matrix(s, kp)
        np.testing.assert_allclose(np.diag(K), 2.0 + 2e-8, rtol=0, atol=1e-15)
        for i in range(s.size):
            for j in range(s.size):
                if i != j:
                    assert K[i, j] == pytest.approx(matern32(abs(s.knots[i] - s.knots[j]), kp), abs=1e-14)
                    if i + 1 < s.size and j + 1 < s.size:
                        assert K[i, j] == K[i + 1, j + 1]

    @pytest.mark.parametrize("L", [5, 25, 100])
    @pytest.mark.parametrize("rho2", [0.1, 1.0, 10.0])
    def test_cholesky_succeeds(self, L, rho2):
        s = BasisSpec(L)
        C = kernel_cholesky(s, KernelParams(1.0, rho2))
        np.testing.assert_allclose(C @ C.T, kernel_matrix(s, KernelParams(1.0, rho2)), atol=1e-12)

    def test_large_range_tends_to_exchangeable(self):
        K = kernel_matrix(BasisSpec(6), KernelParams(1.0, 1e6))
        assert np.ptp(K) < 1e-5
