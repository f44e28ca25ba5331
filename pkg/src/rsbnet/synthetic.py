"""Toy data with explicit A/B/C latent groups and selection bias.

Group A drives treatment only, B drives both treatment and outcome, C drives
the outcome only. Covariates and treatments are drawn once; each
realization draws fresh outcome weights and outcome noise. The true effect
is the constant 10 for every sample.

Randomness comes from numpy's PCG64 bit generator (``np.random.default_rng``)
whose streams are stable across platforms, so a seed pins the dataset.
Normal draws use numpy's ``standard_normal``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractError

TREATMENT_EFFECT = 10.0
MAX_ASSIGNMENT_RETRIES = 100


@dataclass(frozen=True)
class SyntheticConfig:
    d_a: int = 5
    d_b: int = 15
    d_c: int = 5
    n_samples: int = 1000
    n_realizations: int = 1000
    seed: int = 0

    def __post_init__(self):
        for name in ("d_a", "d_b", "d_c", "n_samples", "n_realizations"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")

    @property
    def dim(self) -> int:
        return self.d_a + self.d_b + self.d_c


@dataclass
class Realization:
    x: np.ndarray
    t: np.ndarray
    y_f: np.ndarray
    y_cf: np.ndarray
    mu0: np.ndarray | None = None
    mu1: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        n = self.x.shape[0]
        self.t = np.asarray(self.t).ravel().astype(np.int64)
        self.y_f = np.asarray(self.y_f, dtype=np.float64).ravel()
        self.y_cf = np.asarray(self.y_cf, dtype=np.float64).ravel()
        if self.mu0 is not None:
            self.mu0 = np.asarray(self.mu0, dtype=np.float64).ravel()
            self.mu1 = np.asarray(self.mu1, dtype=np.float64).ravel()
        for name in ("t", "y_f", "y_cf", "mu0", "mu1"):
            v = getattr(self, name)
            if v is not None and v.shape[0] != n:
                raise ContractError(f"{name} has {v.shape[0]} entries for {n} samples")
        if not np.isin(self.t, (0, 1)).all():
            raise ContractError("treatments must be 0 or 1")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def has_truth(self) -> bool:
        return self.mu0 is not None

    @property
    def tau(self) -> np.ndarray:
        if self.mu0 is None:
            raise ContractError("realization carries no noiseless outcomes")
        return self.mu1 - self.mu0

    def subset(self, idx) -> "Realization":
        idx = np.asarray(idx)
        return Realization(
            x=self.x[idx],
            t=self.t[idx],
            y_f=self.y_f[idx],
            y_cf=self.y_cf[idx],
            mu0=None if self.mu0 is None else self.mu0[idx],
            mu1=None if self.mu1 is None else self.mu1[idx],
        )


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def treatment_probability(a_mean, b_mean):
    """Probability of treatment; larger A and B means make treatment less likely."""
    return 1.0 - sigmoid(0.7 * a_mean + 0.3 * b_mean)


def generate_covariates(cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    n = cfg.n_samples
    # N(mean, s): s is a standard deviation
    mu_a = rng.normal(0.0, 5.0, size=(n, 1))
    mu_b = rng.normal(4.0, 2.0, size=(n, 1))
    mu_c = rng.normal(6.0, 2.0, size=(n, 1))
    a = mu_a + rng.standard_normal((n, cfg.d_a))
    b = mu_b + rng.standard_normal((n, cfg.d_b))
    c = mu_c + rng.standard_normal((n, cfg.d_c))
    return np.hstack([a, b, c])


def assign_treatment(x: np.ndarray, cfg: SyntheticConfig, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Draw treatments, redrawing while one arm is empty. Returns ``(t, retries)``."""
    a_mean = x[:, : cfg.d_a].mean(axis=1)
    b_mean = x[:, cfg.d_a : cfg.d_a + cfg.d_b].mean(axis=1)
    p = treatment_probability(a_mean, b_mean)
    for retries in range(MAX_ASSIGNMENT_RETRIES + 1):
        t = (rng.random(x.shape[0]) < p).astype(np.int64)
        if 0 < t.sum() < t.shape[0]:
            return t, retries
    raise ContractError(f"treatment draw left an arm empty after {MAX_ASSIGNMENT_RETRIES} redraws")


def generate(cfg: SyntheticConfig) -> list[Realization]:
    rng = np.random.default_rng(cfg.seed)
    x = generate_covariates(cfg, rng)
    t, _ = assign_treatment(x, cfg, rng)
    x_bc = x[:, cfg.d_a :]
    treated = t == 1
    out = []
    for _ in range(cfg.n_realizations):
        w = rng.uniform(0.0, 0.1, size=cfg.d_b + cfg.d_c)
        mu1 = x_bc @ w + TREATMENT_EFFECT
        # recomputing mu0 from mu1 (an exact subtraction) makes mu1 - mu0 == 10 bitwise
        mu0 = mu1 - TREATMENT_EFFECT
        y0 = mu0 + rng.standard_normal(cfg.n_samples)
        y1 = mu1 + rng.standard_normal(cfg.n_samples)
        out.append(
            Realization(
                x=x,
                t=t,
                y_f=np.where(treated, y1, y0),
                y_cf=np.where(treated, y0, y1),
                mu0=mu0,
                mu1=mu1,
            )
        )
    return out


@dataclass(frozen=True)
class BiasAudit:
    corr_a_t: float
    corr_c_t: float
    corr_c_t_stderr: float
    n_treated: int
    n_control: int


def bias_audit(r: Realization, d_a: int, d_c: int | None = None) -> BiasAudit:
    """Correlation of the A-group mean (and C-group mean) with treatment."""
    a_mean = r.x[:, :d_a].mean(axis=1)
    c_mean = r.x[:, -d_c:].mean(axis=1) if d_c else np.full(r.n, np.nan)
    t = r.t.astype(np.float64)
    corr_a = float(np.corrcoef(a_mean, t)[0, 1])
    corr_c = float(np.corrcoef(c_mean, t)[0, 1]) if d_c else float("nan")
    return BiasAudit(
        corr_a_t=corr_a,
        corr_c_t=corr_c,
        corr_c_t_stderr=float((1.0 - corr_c**2) / np.sqrt(r.n - 1)) if d_c else float("nan"),
        n_treated=int(t.sum()),
        n_control=int(r.n - t.sum()),
    )
