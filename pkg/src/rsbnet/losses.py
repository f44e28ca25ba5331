"""Loss terms of the RSB-Net objective, each returning its value and gradients.

Every function here is pure: inputs are never modified and gradients are
returned as fresh arrays shaped like the corresponding input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, Matrix

IPM_KINDS = ("wasserstein", "linear-mmd")


class EmptyArmError(ContractError):
    """A batch lacks one of the two treatment groups."""


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # IPM
    beta: float = 1.0  # reconstruction
    gamma: float = 1.0  # PCC decorrelation
    lam: float = 1e-4  # weight decay

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "lam"):
            if getattr(self, name) < 0:
                raise ContractError(f"loss weight {name} must be non-negative")


@dataclass(frozen=True)
class IPMConfig:
    kind: str = "wasserstein"
    sinkhorn_lambda: float = 30.0
    sinkhorn_iterations: int = 50
    ground_cost: str = "euclidean"

    def __post_init__(self):
        if self.kind not in IPM_KINDS:
            raise ContractError(f"unknown IPM kind {self.kind!r}; expected one of {IPM_KINDS}")
        if self.ground_cost not in ("euclidean", "sqeuclidean"):
            raise ContractError(f"unknown ground cost {self.ground_cost!r}")
        if self.sinkhorn_lambda <= 0 or self.sinkhorn_iterations < 1:
            raise ContractError("sinkhorn_lambda must be positive and iterations >= 1")


@dataclass(frozen=True)
class SampleWeights:
    u: float
    w: np.ndarray


def sample_weights(t: np.ndarray, u: float | None = None) -> SampleWeights:
    """Per-sample weights that balance the two treatment arms.

    ``u`` defaults to the treated fraction of ``t``; pass the training-set
    value explicitly when weighting validation or test rows.
    """
    t = np.asarray(t, dtype=np.float64).ravel()
    if u is None:
        u = float(t.mean())
    if not 0.0 < u < 1.0:
        raise ContractError(f"treated fraction u={u} must lie strictly between 0 and 1")
    w = t / (2.0 * u) + (1.0 - t) / (2.0 * (1.0 - u))
    return SampleWeights(u=u, w=w)


def prediction_loss(y_hat: Matrix, y: Matrix, w: np.ndarray) -> tuple[float, Matrix]:
    """Weighted factual squared error ``mean(w * (y_hat - y)**2)``."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(y_hat.shape)
    w = np.asarray(w, dtype=np.float64).reshape(y_hat.shape[0], 1)
    if y_hat.shape[0] != w.shape[0]:
        raise ContractError(f"{y_hat.shape[0]} predictions but {w.shape[0]} weights")
    n = y_hat.shape[0]
    r = y_hat - y
    return float(np.sum(w * r * r) / n), 2.0 * w * r / n


def recon_loss(x_hat: Matrix, x: Matrix) -> tuple[float, Matrix]:
    """Mean over samples of the squared L2 reconstruction error."""
    if x_hat.shape != x.shape:
        raise ContractError(f"reconstruction {x_hat.shape} does not match input {x.shape}")
    n = x.shape[0]
    r = x_hat - x
    return float(np.sum(r * r) / n), 2.0 * r / n


def pcc_loss(phi_a: Matrix, phi_bc: Matrix, eps: float = 1e-8) -> tuple[float, Matrix, Matrix]:
    """Mean squared Pearson correlation between every (A column, BC column) pair.

    Uses population (1/N) moments and adds ``eps`` to each standard
    deviation. The value is ``sum(rho**2) / (2 m n)`` and lies in [0, 0.5].

    Returns
    -------
    value, grad_a, grad_bc
    """
    if phi_a.shape[0] != phi_bc.shape[0]:
        raise ContractError("phi_a and phi_bc must have the same number of rows")
    n_rows, m = phi_a.shape
    n = phi_bc.shape[1]
    if n_rows < 2:
        raise ContractError("PCC loss needs at least two samples")
    ac = phi_a - phi_a.mean(axis=0)
    bc = phi_bc - phi_bc.mean(axis=0)
    s_a = np.sqrt(np.mean(ac * ac, axis=0))
    s_b = np.sqrt(np.mean(bc * bc, axis=0))
    sig_a = s_a + eps
    sig_b = s_b + eps
    denom = np.outer(sig_a, sig_b)
    rho = (ac.T @ bc) / n_rows / denom
    value = float(np.sum(rho * rho) / (2.0 * m * n))

    g = rho / (m * n)  # dL/drho
    gd = g / denom
    gr = g * rho
    # d sigma / d column = centered column / (N * s); zero for constant columns
    inv_a = np.divide(1.0, sig_a * s_a, out=np.zeros_like(s_a), where=s_a > 0)
    inv_b = np.divide(1.0, sig_b * s_b, out=np.zeros_like(s_b), where=s_b > 0)
    grad_a = (bc @ gd.T - ac * (gr.sum(axis=1) * inv_a)) / n_rows
    grad_bc = (ac @ gd - bc * (gr.sum(axis=0) * inv_b)) / n_rows
    return value, grad_a, grad_bc


def linear_mmd(x0: Matrix, x1: Matrix) -> tuple[float, Matrix, Matrix]:
    """Distance between group means, ``||mean(x1) - mean(x0)||``."""
    diff = x1.mean(axis=0) - x0.mean(axis=0)
    norm = float(np.sqrt(diff @ diff))
    if norm == 0.0:
        return 0.0, np.zeros_like(x0), np.zeros_like(x1)
    unit = diff / norm
    g0 = np.broadcast_to(-unit / x0.shape[0], x0.shape).copy()
    g1 = np.broadcast_to(unit / x1.shape[0], x1.shape).copy()
    return norm, g0, g1


def _logsumexp(s: Matrix, axis: int) -> tuple[np.ndarray, Matrix]:
    """Log-sum-exp along ``axis`` and the matching softmax weights."""
    top = s.max(axis=axis, keepdims=True)
    e = np.exp(s - top)
    total = e.sum(axis=axis, keepdims=True)
    return np.squeeze(top + np.log(total), axis=axis), e / total


def _pairwise_sqdist(x0: Matrix, x1: Matrix) -> Matrix:
    # expanded form; cancellation can leave tiny negatives, hence the clamp
    sq = np.sum(x0 * x0, axis=1)[:, None] + np.sum(x1 * x1, axis=1)[None, :] - 2.0 * (x0 @ x1.T)
    return np.maximum(sq, 0.0)


def sinkhorn_cost(cost: Matrix, lam: float = 30.0, iterations: int = 50) -> tuple[float, Matrix]:
    """Transport cost of the entropic plan between two uniform point masses.

    The entropic scale is ``mean(cost) / lam``. Iterations start from a unit
    column scaling and the plan after the last column update is used.
    Differentiation runs through every iteration, including the dependence
    of the entropic scale on the cost matrix.

    Returns
    -------
    value, dvalue/dcost
    """
    eps = float(cost.mean()) / lam
    if eps <= 0.0:
        return 0.0, np.zeros_like(cost)
    out = _sinkhorn_scaling(cost, eps, lam, iterations)
    if out is None:
        out = _sinkhorn_log(cost, eps, lam, iterations)
    return out


def _sinkhorn_scaling(cost, eps, lam, iterations):
    """Matrix-scaling form; returns None if the kernel under/overflows."""
    n0, n1 = cost.shape
    a, b = 1.0 / n0, 1.0 / n1
    # subtracting each row's minimum rescales rows of the kernel, which the row
    # scaling absorbs exactly, so the plan and its derivatives are unchanged
    shifted = cost - cost.min(axis=1, keepdims=True)
    kern = np.exp(-shifted / eps)
    us, vs, qs, ss = [], [np.ones(n1)], [], []
    v = vs[0]
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        for _ in range(iterations):
            q = kern @ v
            u = a / q
            s = kern.T @ u
            v = b / s
            qs.append(q)
            us.append(u)
            ss.append(s)
            vs.append(v)
        plan = u[:, None] * kern * v[None, :]
    if not (np.isfinite(plan).all() and np.isfinite(u).all() and np.isfinite(v).all()):
        return None
    value = float(np.sum(plan * cost))

    # reverse pass; d_plan = cost
    d_cost = plan.copy()
    dck = cost * kern
    du = dck @ v
    dv = dck.T @ u
    d_kern = cost * np.outer(u, v)
    ds_rows, dq_rows = [], []
    for k in reversed(range(iterations)):
        # v_k = b / s_k ; s_k = K^T u_k
        ds = -dv * vs[k + 1] / ss[k]
        du = du + kern @ ds
        # u_k = a / q_k ; q_k = K v_{k-1}
        dq = -du * us[k] / qs[k]
        dv = kern.T @ dq
        du = np.zeros(n0)
        ds_rows.append(ds)
        dq_rows.append(dq)
    order = list(reversed(range(iterations)))
    d_kern += np.asarray([us[k] for k in order]).T @ np.asarray(ds_rows)
    d_kern += np.asarray(dq_rows).T @ np.asarray([vs[k] for k in order])
    gk = d_kern * kern
    d_cost -= gk / eps
    d_eps = float(np.sum(gk * shifted)) / (eps * eps)
    d_cost += d_eps / (lam * cost.size)
    return value, d_cost


def _sinkhorn_log(cost, eps, lam, iterations):
    """Log-domain form of the same iteration, used when the kernel underflows."""
    n0, n1 = cost.shape
    log_a = np.log(1.0 / n0)
    log_b = np.log(1.0 / n1)

    g = np.zeros(n1)
    tape = []
    for _ in range(iterations):
        s1 = (g[None, :] - cost) / eps
        lse1, p1 = _logsumexp(s1, axis=1)
        f = eps * (log_a - lse1)
        s2 = (f[:, None] - cost) / eps
        lse2, p2 = _logsumexp(s2, axis=0)
        g_new = eps * (log_b - lse2)
        tape.append((s1, p1, f, s2, p2, g_new))
        g = g_new

    z = (f[:, None] + g[None, :] - cost) / eps
    plan = np.exp(z)
    value = float(np.sum(plan * cost))

    pc = plan * cost
    d_cost = plan - pc / eps
    d_f_plan = pc.sum(axis=1) / eps  # only the last iteration's f reaches the plan
    d_g = pc.sum(axis=0) / eps
    d_eps = -float(np.sum(pc * z)) / eps
    for s1, p1, f, s2, p2, g_new in reversed(tape):
        # g_new_j = eps*log_b - eps*LSE_i((f_i - C_ij)/eps)
        d_cost += d_g[None, :] * p2
        d_eps += float(np.sum(d_g * (g_new / eps + np.sum(p2 * s2, axis=0))))
        d_f = d_f_plan - p2 @ d_g
        d_f_plan = 0.0
        # f_i = eps*log_a - eps*LSE_j((g_j - C_ij)/eps)
        d_cost += d_f[:, None] * p1
        d_eps += float(np.sum(d_f * (f / eps + np.sum(p1 * s1, axis=1))))
        d_g = -(d_f @ p1)
    d_cost += d_eps / (lam * cost.size)
    return value, d_cost


def wasserstein(
    x0: Matrix, x1: Matrix, lam: float = 30.0, iterations: int = 50, ground_cost: str = "euclidean"
) -> tuple[float, Matrix, Matrix]:
    """Sinkhorn approximation of the Wasserstein distance between two point sets."""
    sq = _pairwise_sqdist(x0, x1)
    if ground_cost == "sqeuclidean":
        cost = sq
    else:
        # floor keeps the derivative of the square root bounded for coincident points
        cost = np.sqrt(np.maximum(sq, 1e-10))
    value, d_cost = sinkhorn_cost(cost, lam, iterations)
    if ground_cost == "sqeuclidean":
        d_sq = d_cost
    else:
        d_sq = np.where(sq > 1e-10, d_cost / (2.0 * cost), 0.0)
    # d sq_ij / d x0_i = 2 (x0_i - x1_j)
    g0 = 2.0 * (d_sq.sum(axis=1)[:, None] * x0 - d_sq @ x1)
    g1 = 2.0 * (d_sq.sum(axis=0)[:, None] * x1 - d_sq.T @ x0)
    return value, g0, g1


def ipm_loss(phi_bc: Matrix, t: np.ndarray, cfg: IPMConfig = IPMConfig()) -> tuple[float, Matrix]:
    """Distance between the control and treated representation distributions."""
    t = np.asarray(t).ravel()
    if t.shape[0] != phi_bc.shape[0]:
        raise ContractError(f"{t.shape[0]} treatments for {phi_bc.shape[0]} representation rows")
    treated = t == 1
    control = ~treated
    if not treated.any() or not control.any():
        raise EmptyArmError("IPM is undefined when a treatment group is empty")
    x0, x1 = phi_bc[control], phi_bc[treated]
    if cfg.kind == "wasserstein":
        value, g0, g1 = wasserstein(x0, x1, cfg.sinkhorn_lambda, cfg.sinkhorn_iterations, cfg.ground_cost)
    else:
        value, g0, g1 = linear_mmd(x0, x1)
    grad = np.zeros_like(phi_bc)
    grad[control] = g0
    grad[treated] = g1
    return value, grad


def weight_regularizer(weights: list[Matrix]) -> tuple[float, list[Matrix]]:
    """Sum of squared weight entries; biases are not passed in."""
    value = float(sum(np.sum(w * w) for w in weights))
    return value, [2.0 * w for w in weights]


@dataclass(frozen=True)
class LossTerms:
    pred: float
    ipm: float
    recon: float
    pcc: float
    reg: float


def total_loss(terms: LossTerms, lw: LossWeights) -> float:
    return terms.pred + lw.alpha * terms.ipm + lw.beta * terms.recon + lw.gamma * terms.pcc + lw.lam * terms.reg
