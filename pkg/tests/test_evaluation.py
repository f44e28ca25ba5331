import math

import mpmath
import numpy as np
import pytest
from scipy import stats

from rsbnet.evaluation import (
    EvalReport,
    aggregate,
    ate_error,
    mean_stderr,
    nearest_opposite,
    pehe,
    pehe_nn,
    student_t_sf2,
    welch_t_test,
)
from rsbnet.tensor import ContractError


def pehe_oracle(tau_hat, mu1, mu0):
    s = 0.0
    for a, b, c in zip(tau_hat, mu1, mu0):
        s += (a - (b - c)) ** 2
    return math.sqrt(s / len(tau_hat))


def ate_oracle(tau_hat, mu1, mu0):
    n = len(tau_hat)
    return abs(sum(tau_hat) / n - sum(b - c for b, c in zip(mu1, mu0)) / n)


def pehe_nn_oracle(x, t, y, y1_hat, y0_hat, query, pool):
    total = 0.0
    for q, i in enumerate(query):
        best, best_d = None, math.inf
        for j in pool:
            if t[j] == t[i]:
                continue
            d = sum((x[i][k] - x[j][k]) ** 2 for k in range(len(x[i])))
            if d < best_d:
                best, best_d = j, d
        tau_nn = (1 - 2 * t[i]) * (y[best] - y[i])
        total += (tau_nn - (y1_hat[q] - y0_hat[q])) ** 2
    return math.sqrt(total / len(query))


def t_tail_oracle(t_stat, dof):
    """Two-sided tail by direct quadrature of the Student-t density."""
    mpmath.mp.dps = 30
    nu = mpmath.mpf(dof)
    c = mpmath.gamma((nu + 1) / 2) / (mpmath.sqrt(nu * mpmath.pi) * mpmath.gamma(nu / 2))
    tail = mpmath.quad(lambda s: c * (1 + s * s / nu) ** (-(nu + 1) / 2), [abs(t_stat), mpmath.inf])
    return float(2 * tail)


class TestPointMetrics:
    def test_perfect(self):
        mu0 = np.arange(5.0)
        assert pehe(np.full(5, 10.0), mu0 + 10, mu0) == 0.0
        assert ate_error(np.full(5, 10.0), mu0 + 10, mu0) == 0.0

    def test_constant_offset(self):
        mu0 = np.random.default_rng(0).normal(size=9)
        assert pehe(np.full(9, 10.0) + 0.75, mu0 + 10, mu0) == pytest.approx(0.75, abs=1e-14)

    def test_cancellation(self):
        assert ate_error([1.0, -1.0], [0.0, 0.0], [0.0, 0.0]) == 0.0
        assert pehe([1.0, -1.0], [0.0, 0.0], [0.0, 0.0]) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            pehe([1.0], [1.0, 2.0], [0.0, 0.0])

    def test_scalar_oracles(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            n = int(rng.integers(2, 60))
            a, b, c = rng.normal(size=(3, n))
            assert abs(pehe(a, b, c) - pehe_oracle(a, b, c)) < 1e-12
            assert abs(ate_error(a, b, c) - ate_oracle(a, b, c)) < 1e-12

    def test_ate_bounded_by_pehe(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            n = int(rng.integers(1, 40))
            a, b, c = rng.normal(size=(3, n)) * rng.uniform(0.01, 100)
            assert ate_error(a, b, c) <= pehe(a, b, c) * (1 + 1e-12)


class TestPeheNN:
    def test_substitution_example(self):
        x = np.array([[0.0], [1.0]])
        t = np.array([1, 0])
        y = np.array([5.0, 3.0])
        # row 0: (1 - 2)(3 - 5) = 2; row 1: (1 - 0)(5 - 3) = 2
        assert pehe_nn(x, t, y, [2.0, 2.0], [0.0, 0.0]) == 0.0

    def test_duplicates_noiseless(self):
        x = np.repeat(np.random.default_rng(0).normal(size=(5, 3)), 2, axis=0)
        t = np.tile([0, 1], 5)
        mu0 = x.sum(axis=1)
        y = np.where(t == 1, mu0 + 10, mu0)
        assert pehe_nn(x, t, y, mu0 + 10, mu0) == 0.0

    def test_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            n = 30
            x, t, y = rng.normal(size=(n, 4)), rng.integers(0, 2, n), rng.normal(size=n)
            t[:2] = [0, 1]
            query = np.sort(rng.choice(n, 10, replace=False))
            pool = np.arange(n)
            y1, y0 = rng.normal(size=10), rng.normal(size=10)
            got = pehe_nn(x, t, y, y1, y0, query, pool)
            assert abs(got - pehe_nn_oracle(x, t, y, y1, y0, query, pool)) < 1e-10

    def test_empty_arm(self):
        with pytest.raises(ContractError):
            nearest_opposite(np.zeros((3, 1)), np.zeros(3, dtype=int))


class TestAggregate:
    def _reports(self, values):
        return [EvalReport(v, v, v, "out_of_sample", k) for k, v in enumerate(values)]

    def test_identical(self):
        agg = aggregate(self._reports([0.3, 0.3, 0.3]))
        assert agg.metrics["sqrt_pehe"].stderr == 0.0

    def test_two_values(self):
        s = aggregate(self._reports([1.0, 3.0])).metrics["ate_error"]
        assert s.mean == 2.0 and s.stderr == pytest.approx(1.0, abs=1e-15)

    def test_scalar_oracle(self):
        v = np.random.default_rng(4).uniform(0, 2, 100)
        s = mean_stderr(v)
        m = sum(v) / 100
        sd = math.sqrt(sum((x - m) ** 2 for x in v) / 99)
        assert abs(s.mean - m) < 1e-10 and abs(s.stderr - sd / 10) < 1e-10

    def test_needs_two(self):
        with pytest.raises(ContractError):
            aggregate(self._reports([1.0]))

    def test_mixed_scopes(self):
        rs = self._reports([1.0]) + [EvalReport(1.0, 1.0, 1.0, "within_sample", 2)]
        with pytest.raises(ContractError):
            aggregate(rs)

    def test_missing_truth(self):
        rs = [EvalReport(None, None, 0.5, "within_sample", k) for k in range(3)]
        agg = aggregate(rs)
        assert agg.metrics["sqrt_pehe"] is None and agg.metrics["sqrt_pehe_nn"].mean == 0.5

    def test_report_validation(self):
        with pytest.raises(ContractError):
            EvalReport(-1.0, 0.0, 0.0, "within_sample", 0)


class TestWelch:
    def test_identical(self):
        r = welch_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert r.t_stat == 0.0 and not r.significant and r.p_value == pytest.approx(1.0)

    def test_far_apart(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(0, 1, 400), rng.normal(0, 1, 400)
        b += 5 * np.sqrt(a.var(ddof=1) / 400 + b.var(ddof=1) / 400)
        assert welch_t_test(a, b).significant

    def test_textbook_instance(self):
        # two small samples with unequal variances; reference by quadrature
        a = [27.5, 21.0, 19.0, 23.6, 17.0, 17.9, 16.9, 20.1, 21.9, 22.6, 23.1, 19.6, 19.0, 21.7, 21.4]
        b = [27.1, 22.0, 20.8, 23.4, 23.4, 23.5, 25.8, 22.0, 24.8, 20.2, 21.9, 22.1, 22.9, 20.5, 24.4]
        r = welch_t_test(a, b)
        assert r.t_stat == pytest.approx(-2.46, abs=0.005)
        assert r.dof == pytest.approx(24.99, abs=0.01)
        assert abs(r.p_value - t_tail_oracle(r.t_stat, r.dof)) < 1e-6
        ref = stats.ttest_ind(a, b, equal_var=False)
        assert abs(r.p_value - ref.pvalue) < 1e-10

    def test_p_value_vs_quadrature(self):
        for t_stat, dof in [(0.5, 3.0), (2.1, 7.5), (-3.3, 40.2), (1.96, 150.0)]:
            assert abs(student_t_sf2(t_stat, dof) - t_tail_oracle(t_stat, dof)) < 1e-6

    def test_antisymmetric(self):
        rng = np.random.default_rng(6)
        a, b = rng.normal(size=10), rng.normal(1, 2, size=14)
        r1, r2 = welch_t_test(a, b), welch_t_test(b, a)
        assert r1.t_stat == -r2.t_stat and r1.p_value == r2.p_value

    def test_degenerate(self):
        with pytest.raises(ContractError):
            welch_t_test([1.0, 1.0], [1.0, 1.0])
        with pytest.raises(ContractError):
            welch_t_test([1.0], [1.0, 2.0])
