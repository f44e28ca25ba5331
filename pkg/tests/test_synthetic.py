import numpy as np
import pytest

from rsbnet.synthetic import (
    Realization,
    SyntheticConfig,
    assign_treatment,
    bias_audit,
    generate,
    treatment_probability,
)
from rsbnet.tensor import ContractError

# E[mu0] = E[w] . E[x_BC] = 0.05 * (15 * 4 + 5 * 6)
EXPECTED_MU0 = 4.5
W_VAR = 0.1**2 / 12.0


def mu0_zscore(cfg, realizations):
    """Standardized distance of the grand mean of mu0 from its expectation.

    x is shared by all realizations, so the standard error combines row-level
    variation of x_BC (with w at its mean) and the spread of the per-realization
    weight draws given x.
    """
    x_bc = realizations[0].x[:, cfg.d_a :]
    mu0 = np.stack([r.mu0 for r in realizations])
    n, r = cfg.n_samples, len(realizations)
    row_part = np.var(x_bc @ np.full(x_bc.shape[1], 0.05), ddof=1) / n
    w_part = np.sum(x_bc.mean(axis=0) ** 2) * W_VAR / r
    return (mu0.mean() - EXPECTED_MU0) / np.sqrt(row_part + w_part)


class TestGenerator:
    def test_probability_half_at_zero(self):
        assert treatment_probability(0.0, 0.0) == 0.5

    def test_effect_is_exactly_ten(self):
        for r in generate(SyntheticConfig(n_samples=200, n_realizations=5, seed=1)):
            assert np.all(r.mu1 - r.mu0 == 10.0)
            assert np.array_equal(r.tau, np.full(r.n, 10.0))

    def test_factual_counterfactual_consistency(self):
        r = generate(SyntheticConfig(n_samples=300, n_realizations=1, seed=2))[0]
        # noise is N(0, 1): factual outcomes sit near the mean of their own arm
        mu_f = np.where(r.t == 1, r.mu1, r.mu0)
        mu_cf = np.where(r.t == 1, r.mu0, r.mu1)
        assert np.abs(r.y_f - mu_f).max() < 6 and np.abs(r.y_cf - mu_cf).max() < 6
        assert np.abs(r.y_f - mu_cf).mean() > 5

    def test_shapes_and_shared_covariates(self):
        cfg = SyntheticConfig(d_a=2, d_b=3, d_c=4, n_samples=50, n_realizations=3, seed=0)
        rs = generate(cfg)
        assert len(rs) == 3 and rs[0].x.shape == (50, 9)
        assert rs[0].x is rs[2].x and np.array_equal(rs[0].t, rs[1].t)
        assert not np.array_equal(rs[0].mu0, rs[1].mu0)

    def test_deterministic(self):
        cfg = SyntheticConfig(n_samples=100, n_realizations=2, seed=5)
        a, b = generate(cfg), generate(cfg)
        for ra, rb in zip(a, b):
            for f in ("x", "t", "y_f", "y_cf", "mu0", "mu1"):
                assert np.array_equal(getattr(ra, f), getattr(rb, f))

    def test_seed_matters(self):
        a = generate(SyntheticConfig(n_samples=50, n_realizations=1, seed=1))[0]
        b = generate(SyntheticConfig(n_samples=50, n_realizations=1, seed=2))[0]
        assert not np.array_equal(a.x, b.x)

    def test_mu0_mean_at_defaults(self):
        cfg = SyntheticConfig(n_realizations=200)
        assert abs(mu0_zscore(cfg, generate(cfg))) < 3.0

    def test_standard_error_calibrated(self):
        # the standard error used above should match the seed-to-seed spread
        zs = []
        for seed in range(40):
            cfg = SyntheticConfig(n_samples=200, n_realizations=20, seed=seed)
            zs.append(mu0_zscore(cfg, generate(cfg)))
        assert abs(np.mean(zs)) < 0.6
        assert 0.6 < np.std(zs, ddof=1) < 1.5

    def test_config_validation(self):
        with pytest.raises(ContractError):
            SyntheticConfig(d_a=0)


class TestAssignment:
    def test_redraw_on_empty_arm(self):
        cfg = SyntheticConfig(d_a=1, d_b=1, d_c=1, n_samples=2, n_realizations=1)
        x = np.zeros((2, 3))
        t, retries = assign_treatment(x, cfg, np.random.default_rng(0))
        assert set(t) == {0, 1}
        assert retries >= 0

    def test_fails_after_retries(self):
        cfg = SyntheticConfig(d_a=1, d_b=1, d_c=1, n_samples=1, n_realizations=1)
        with pytest.raises(ContractError):
            assign_treatment(np.zeros((1, 3)), cfg, np.random.default_rng(0))


class TestBiasAudit:
    def test_selection_bias_direction(self):
        cfg = SyntheticConfig(n_realizations=1)
        audit = bias_audit(generate(cfg)[0], cfg.d_a, cfg.d_c)
        assert audit.corr_a_t < -0.1
        assert abs(audit.corr_c_t) < 3 * audit.corr_c_t_stderr
        assert audit.n_treated >= 1 and audit.n_control >= 1


class TestRealization:
    def test_rejects_bad_treatment(self):
        with pytest.raises(ContractError):
            Realization(x=np.zeros((2, 1)), t=np.array([0, 2]), y_f=np.zeros(2), y_cf=np.zeros(2))

    def test_rejects_length_mismatch(self):
        with pytest.raises(ContractError):
            Realization(x=np.zeros((2, 1)), t=np.array([0, 1]), y_f=np.zeros(3), y_cf=np.zeros(2))

    def test_subset(self):
        r = generate(SyntheticConfig(n_samples=20, n_realizations=1))[0]
        s = r.subset([3, 5])
        assert s.n == 2 and np.array_equal(s.x, r.x[[3, 5]])

    def test_missing_truth(self):
        r = Realization(x=np.zeros((2, 1)), t=np.array([0, 1]), y_f=np.zeros(2), y_cf=np.zeros(2))
        assert not r.has_truth
        with pytest.raises(ContractError):
            r.tau
