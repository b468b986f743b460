import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from certbound.binary_kl import bernoulli_kl, kl_inverse_lower, kl_inverse_upper, split_components

import oracles

probs = st.floats(0.0, 1.0, allow_nan=False)
budgets = st.floats(0.0, 5.0, allow_nan=False)


class TestBernoulliKl:
    def test_identical(self):
        assert bernoulli_kl(0.5, 0.5) == 0.0

    def test_zero_p(self):
        assert bernoulli_kl(0.0, 0.5) == pytest.approx(math.log(2), abs=1e-15)

    def test_high_precision_value(self):
        assert bernoulli_kl(0.1, 0.2) == pytest.approx(oracles.KL_01_02, abs=1e-15)

    def test_boundary_conventions(self):
        assert bernoulli_kl(0.0, 0.0) == 0.0
        assert bernoulli_kl(1.0, 1.0) == 0.0
        assert bernoulli_kl(0.3, 0.0) == math.inf
        assert bernoulli_kl(0.3, 1.0) == math.inf

    @pytest.mark.parametrize("bad", [-0.1, 1.1, math.nan])
    def test_rejects_out_of_range(self, bad):
        with pytest.raises(ValueError):
            bernoulli_kl(bad, 0.5)
        with pytest.raises(ValueError):
            bernoulli_kl(0.5, bad)

    @given(probs)
    def test_self_divergence_zero(self, p):
        assert bernoulli_kl(p, p) == 0.0

    @given(probs, probs)
    def test_nonnegative(self, p, q):
        assert bernoulli_kl(p, q) >= 0.0


class TestInverses:
    def test_zero_budget(self):
        assert kl_inverse_upper(0.37, 0.0) == 0.37
        assert kl_inverse_lower(0.37, 0.0) == 0.37

    def test_closed_forms(self):
        assert kl_inverse_upper(0.0, math.log(2)) == pytest.approx(0.5, abs=1e-12)
        assert kl_inverse_lower(1.0, 0.1) == pytest.approx(math.exp(-0.1), abs=1e-12)
        assert kl_inverse_lower(0.0, 0.7) == 0.0
        assert kl_inverse_upper(1.0, 0.7) == 1.0

    def test_high_precision_values(self):
        assert kl_inverse_upper(0.1, 0.05) == pytest.approx(oracles.KL_INV_UPPER_01_005, abs=1e-12)
        assert kl_inverse_lower(0.3, 0.1) == pytest.approx(oracles.KL_INV_LOWER_03_01, abs=1e-12)

    def test_grid_oracle_example(self):
        g = oracles.grid_inverse(0.1, 0.05, upper=True)
        assert abs(kl_inverse_upper(0.1, 0.05) - g) <= 1e-6

    def test_saturation(self):
        # kl(0.5 || 1) = inf but kl(0.001 || 1 - tiny) can fall under a huge budget
        assert kl_inverse_upper(0.2, 50.0) == pytest.approx(1.0, abs=1e-12)
        assert kl_inverse_lower(0.2, 50.0) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("bad", [math.inf, -1e-3, math.nan])
    def test_rejects_bad_budget(self, bad):
        with pytest.raises(ValueError):
            kl_inverse_upper(0.2, bad)
        with pytest.raises(ValueError):
            kl_inverse_lower(0.2, bad)

    @given(probs, budgets)
    def test_sandwich(self, p, eps):
        assert kl_inverse_lower(p, eps) <= p <= kl_inverse_upper(p, eps)

    @given(st.floats(0.0, 0.999, allow_nan=False), st.floats(1e-6, 3.0))
    def test_upper_solves_equation(self, p, eps):
        q = kl_inverse_upper(p, eps)
        assert bernoulli_kl(p, q) <= eps + 1e-12
        if q < 1.0 - 1e-7:
            assert abs(bernoulli_kl(p, q) - eps) <= 1e-9

    @given(st.floats(0.001, 1.0, allow_nan=False), st.floats(1e-6, 3.0))
    def test_lower_solves_equation(self, p, eps):
        q = kl_inverse_lower(p, eps)
        assert bernoulli_kl(p, q) <= eps + 1e-12
        if q > 1e-7:
            assert abs(bernoulli_kl(p, q) - eps) <= 1e-9

    @given(probs, budgets, budgets)
    def test_monotone_in_budget(self, p, e1, e2):
        e1, e2 = sorted((e1, e2))
        assert kl_inverse_upper(p, e1) <= kl_inverse_upper(p, e2)
        assert kl_inverse_lower(p, e1) >= kl_inverse_lower(p, e2)

    @given(probs, probs, budgets)
    def test_upper_monotone_in_p(self, p1, p2, eps):
        p1, p2 = sorted((p1, p2))
        assert kl_inverse_upper(p1, eps) <= kl_inverse_upper(p2, eps) + 1e-15

    def test_random_pairs_against_grid(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            p, eps = rng.uniform(0, 1), rng.uniform(0, 0.5)
            assert abs(kl_inverse_upper(p, eps) - oracles.grid_inverse(p, eps, True)) <= 1e-6
            assert abs(kl_inverse_lower(p, eps) - oracles.grid_inverse(p, eps, False)) <= 1e-6


class TestSplit:
    @pytest.mark.parametrize("z,expected", [(0.3, (0.0, 0.2)), (0.7, (0.2, 0.0)), (0.5, (0.0, 0.0))])
    def test_examples(self, z, expected):
        zp, zm = split_components(z, 0.5, -0.5, 1.0)
        assert zp == pytest.approx(expected[0], abs=1e-15)
        assert zm == pytest.approx(expected[1], abs=1e-15)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            split_components(1.2, 0.0, -0.5, 1.0)
        with pytest.raises(ValueError):
            split_components(0.2, -0.7, -0.5, 1.0)

    @given(st.fractions(-1, 2), st.fractions(-1, 2))
    def test_exact_reconstruction_rational(self, z, mu):
        a, b = Fraction(-1), Fraction(2)
        zp, zm = split_components(z, mu, a, b)
        assert mu + zp - zm == z
        assert zp * zm == 0
        assert 0 <= zp <= b - mu and 0 <= zm <= mu - a

    @given(st.floats(-0.5, 1.0), st.floats(-0.5, 1.0))
    def test_float_reconstruction_within_one_ulp(self, z, mu):
        zp, zm = split_components(z, mu, -0.5, 1.0)
        assert zp == max(0.0, z - mu) and zm == max(0.0, mu - z)
        assert abs((mu + zp - zm) - z) <= math.ulp(max(abs(z), abs(mu)))
