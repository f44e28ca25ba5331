"""Treatment-effect metrics, cross-realization aggregation and Welch's t-test."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import betainc

from .tensor import ContractError

METRICS = ("sqrt_pehe", "ate_error", "sqrt_pehe_nn")


def _vectors(*arrays):
    out = [np.asarray(a, dtype=np.float64).ravel() for a in arrays]
    if len({a.shape[0] for a in out}) != 1:
        raise ContractError(f"length mismatch: {[a.shape[0] for a in out]}")
    return out


def pehe(tau_hat, mu1, mu0) -> float:
    """Root mean squared error of the estimated individual effects."""
    tau_hat, mu1, mu0 = _vectors(tau_hat, mu1, mu0)
    err = tau_hat - (mu1 - mu0)
    return float(np.sqrt(np.mean(err * err)))


def ate_error(tau_hat, mu1, mu0) -> float:
    tau_hat, mu1, mu0 = _vectors(tau_hat, mu1, mu0)
    return float(abs(np.mean(tau_hat) - np.mean(mu1 - mu0)))


def nearest_opposite(x, t, query_idx=None, pool_idx=None) -> np.ndarray:
    """Index of the Euclidean-nearest row of the opposite arm for every query row.

    Neighbours are searched among ``pool_idx`` (default: all rows); ties go to
    the lowest pool position.
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t).ravel().astype(np.int64)
    n = x.shape[0]
    query_idx = np.arange(n) if query_idx is None else np.asarray(query_idx)
    pool_idx = np.arange(n) if pool_idx is None else np.asarray(pool_idx)
    out = np.empty(query_idx.size, dtype=np.int64)
    for arm in (0, 1):
        q = query_idx[t[query_idx] == arm]
        if q.size == 0:
            continue
        candidates = pool_idx[t[pool_idx] == 1 - arm]
        if candidates.size == 0:
            raise ContractError(f"no samples with t={1 - arm} to serve as neighbours")
        d = cdist(x[q], x[candidates], "sqeuclidean")
        out[t[query_idx] == arm] = candidates[np.argmin(d, axis=1)]
    return out


def pehe_nn(x, t, y_f, y1_hat, y0_hat, query_idx=None, pool_idx=None) -> float:
    """Nearest-neighbour surrogate of sqrt(PEHE) built from factual outcomes only.

    The counterfactual of query row i is the factual outcome of its nearest
    opposite-arm neighbour j(i), giving the effect estimate
    ``(1 - 2 t_i) (y_j - y_i)``. ``y1_hat``/``y0_hat`` are predictions for the
    query rows (or for all rows when ``query_idx`` is None).
    """
    t = np.asarray(t).ravel().astype(np.int64)
    y_f = np.asarray(y_f, dtype=np.float64).ravel()
    query_idx = np.arange(t.size) if query_idx is None else np.asarray(query_idx)
    y1_hat, y0_hat = _vectors(y1_hat, y0_hat)
    if y1_hat.size != query_idx.size:
        raise ContractError(f"{y1_hat.size} predictions for {query_idx.size} query rows")
    j = nearest_opposite(x, t, query_idx, pool_idx)
    tq = t[query_idx]
    tau_nn = (1 - 2 * tq) * (y_f[j] - y_f[query_idx])
    err = tau_nn - (y1_hat - y0_hat)
    return float(np.sqrt(np.mean(err * err)))


@dataclass(frozen=True)
class EvalReport:
    sqrt_pehe: float | None
    ate_error: float | None
    sqrt_pehe_nn: float
    scope: str
    realization_id: int

    def __post_init__(self):
        if self.scope not in ("within_sample", "out_of_sample"):
            raise ContractError(f"unknown scope {self.scope!r}")
        for name in METRICS:
            v = getattr(self, name)
            if v is not None and not (math.isfinite(v) and v >= 0):
                raise ContractError(f"{name}={v} must be finite and non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    stderr: float
    n: int


def mean_stderr(values: Sequence[float]) -> MetricSummary:
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ContractError("need at least two values for a standard error")
    return MetricSummary(mean=float(v.mean()), stderr=float(v.std(ddof=1) / np.sqrt(v.size)), n=int(v.size))


@dataclass(frozen=True)
class AggregateReport:
    metrics: dict[str, MetricSummary | None]
    n_realizations: int
    scope: str

    def to_dict(self) -> dict:
        return {
            "scope": self.scope,
            "n_realizations": self.n_realizations,
            "metrics": {k: (asdict(v) if v is not None else None) for k, v in self.metrics.items()},
        }


def aggregate(reports: Iterable[EvalReport]) -> AggregateReport:
    reports = list(reports)
    if len(reports) < 2:
        raise ContractError("aggregation needs at least two reports")
    scopes = {r.scope for r in reports}
    if len(scopes) != 1:
        raise ContractError(f"cannot aggregate mixed scopes {sorted(scopes)}")
    metrics = {}
    for name in METRICS:
        values = [getattr(r, name) for r in reports]
        metrics[name] = None if any(v is None for v in values) else mean_stderr(values)
    return AggregateReport(metrics=metrics, n_realizations=len(reports), scope=scopes.pop())


@dataclass(frozen=True)
class WelchResult:
    t_stat: float
    dof: float
    p_value: float
    significant: bool
    mean_a: float
    mean_b: float


def student_t_sf2(t_stat: float, dof: float) -> float:
    """Two-sided tail probability P(|T| >= |t|) of Student's t."""
    return float(betainc(dof / 2.0, 0.5, dof / (dof + t_stat * t_stat)))


def welch_t_test(sample_a, sample_b, alpha: float = 0.05) -> WelchResult:
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise ContractError("each sample needs at least two values")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    if va + vb == 0:
        raise ContractError("both samples have zero variance")
    t_stat = float((a.mean() - b.mean()) / np.sqrt(va + vb))
    dof = float((va + vb) ** 2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1)))
    p = student_t_sf2(t_stat, dof)
    return WelchResult(
        t_stat=t_stat, dof=dof, p_value=p, significant=p < alpha, mean_a=float(a.mean()), mean_b=float(b.mean())
    )
