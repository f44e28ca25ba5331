"""Small differentiable numeric kernel.

Dense float64 matrices (plain numpy arrays), affine layers with explicit
forward/backward passes, bias-corrected Adam and a central-difference
gradient checker. Backpropagation is hand-written per layer; there is no
tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Matrix = np.ndarray

ACTIVATIONS = ("elu", "relu", "identity")


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ContractError(ValueError):
    """A documented precondition was violated."""


def as_matrix(a) -> Matrix:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def activate(z: Matrix, kind: str) -> Matrix:
    if kind == "elu":
        # expm1 on the clipped branch avoids overflow warnings for large z
        return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "identity":
        return z
    raise ContractError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activate_grad(z: Matrix, kind: str) -> Matrix:
    """Derivative of the activation evaluated at pre-activation ``z``."""
    if kind == "elu":
        return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "identity":
        return np.ones_like(z)
    raise ContractError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


@dataclass
class ParamTensor:
    """A trainable matrix with its gradient accumulator and Adam moments."""

    value: Matrix
    grad: Matrix = field(init=False)
    adam_m: Matrix = field(init=False)
    adam_v: Matrix = field(init=False)

    def __post_init__(self):
        self.value = as_matrix(self.value).copy()
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def zero_grads(params) -> None:
    if hasattr(params, "zero_grad"):
        params.zero_grad()
        return
    for p in params:
        p.zero_grad()


@dataclass
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ContractError("beta1 and beta2 must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ContractError("epsilon must be positive")


class PackedParams:
    """Parameters whose arrays are views into four contiguous buffers.

    Packing lets one optimiser step and one gradient reset run as a few
    vectorised operations instead of a loop over layers. The tensors keep
    working as before; their arrays are simply rebound to slices.
    """

    def __init__(self, params: Sequence[ParamTensor]):
        self.params = list(params)
        total = sum(p.value.size for p in self.params)
        self.value, self.grad, self.adam_m, self.adam_v = (np.empty(total) for _ in range(4))
        start = 0
        for p in self.params:
            stop = start + p.value.size
            for name in ("value", "grad", "adam_m", "adam_v"):
                flat = getattr(self, name)
                flat[start:stop] = getattr(p, name).ravel()
                setattr(p, name, flat[start:stop].reshape(p.value.shape))
            start = stop

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def _adam_update(value, grad, m, v, cfg: AdamConfig, bc1: float, bc2: float) -> None:
    m *= cfg.beta1
    m += (1.0 - cfg.beta1) * grad
    v *= cfg.beta2
    v += (1.0 - cfg.beta2) * (grad * grad)
    denom = np.sqrt(v / bc2)
    denom += cfg.epsilon
    value -= (cfg.learning_rate / bc1) * m / denom


def adam_step(params: Sequence[ParamTensor] | PackedParams, cfg: AdamConfig) -> None:
    """Apply one bias-corrected Adam update in place.

    Gradients are read, not cleared; the caller zeroes them before the next
    accumulation. Packed and unpacked parameters give identical results.
    """
    cfg.step_count += 1
    t = cfg.step_count
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    if isinstance(params, PackedParams):
        _adam_update(params.value, params.grad, params.adam_m, params.adam_v, cfg, bc1, bc2)
        return
    for p in params:
        _adam_update(p.value, p.grad, p.adam_m, p.adam_v, cfg, bc1, bc2)


def init_weights(shape: tuple[int, int], rng: np.random.Generator, gain: float = 0.1) -> Matrix:
    """Scaled-normal initialisation, std = gain / sqrt(fan_in)."""
    fan_in = shape[0]
    return rng.standard_normal(shape) * (gain / np.sqrt(fan_in))


@dataclass
class LayerCache:
    x: Matrix
    pre: Matrix
    out: Matrix
    w: ParamTensor
    b: ParamTensor
    activation: str


def affine_forward(x: Matrix, w: ParamTensor, b: ParamTensor, activation: str = "elu") -> LayerCache:
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"layer input {x.shape} does not conform to weight {w.shape}")
    if b.shape != (1, w.shape[1]):
        raise DimensionError(f"bias {b.shape} does not conform to weight {w.shape}")
    pre = x @ w.value + b.value
    return LayerCache(x=x, pre=pre, out=activate(pre, activation), w=w, b=b, activation=activation)


def affine_backward(cache: LayerCache, upstream_grad: Matrix) -> Matrix:
    """Accumulate parameter gradients and return the gradient w.r.t. the input."""
    if upstream_grad.shape != cache.out.shape:
        raise DimensionError(
            f"upstream gradient {upstream_grad.shape} does not match layer output {cache.out.shape}"
        )
    if cache.activation == "identity":
        dpre = upstream_grad
    else:
        dpre = upstream_grad * activate_grad(cache.pre, cache.activation)
    cache.w.grad += cache.x.T @ dpre
    cache.b.grad += dpre.sum(axis=0, keepdims=True)
    return dpre @ cache.w.value.T


class Dense:
    """Affine layer ``act(x @ W + b)``."""

    def __init__(self, fan_in: int, fan_out: int, activation: str, rng: np.random.Generator, gain: float = 0.1):
        if activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {activation!r}")
        self.w = ParamTensor(init_weights((fan_in, fan_out), rng, gain))
        self.b = ParamTensor(np.zeros((1, fan_out)))
        self.activation = activation

    def forward(self, x: Matrix) -> LayerCache:
        return affine_forward(x, self.w, self.b, self.activation)

    def __call__(self, x: Matrix) -> Matrix:
        return self.forward(x).out


def stack_forward(layers: Sequence[Dense], x: Matrix) -> tuple[Matrix, list[LayerCache]]:
    caches = []
    for layer in layers:
        cache = layer.forward(x)
        caches.append(cache)
        x = cache.out
    return x, caches


def stack_backward(caches: Sequence[LayerCache], upstream_grad: Matrix) -> Matrix:
    g = upstream_grad
    for cache in reversed(caches):
        g = affine_backward(cache, g)
    return g


@dataclass
class GradCheckReport:
    passed: bool
    max_error: float
    n_checked: int
    worst: tuple[int, tuple[int, ...]] | None
    errors: list[float] = field(repr=False, default_factory=list)


def grad_check(
    loss_fn: Callable[[], tuple[float, Sequence[np.ndarray]]],
    params: Sequence[np.ndarray],
    step: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = 200,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn`` reads the arrays in ``params`` (which are perturbed in place)
    and returns ``(loss, grads)`` with ``grads[k]`` shaped like ``params[k]``.
    The per-coordinate error is ``|a - n| / max(1, |a|, |n|)``. When the total
    coordinate count exceeds ``max_coords`` a random subset is checked.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    loss0, grads = loss_fn()
    loss0_again, _ = loss_fn()
    if loss0 != loss0_again:
        raise ContractError(f"loss_fn is not deterministic: {loss0!r} != {loss0_again!r}")
    grads = [np.array(g, dtype=np.float64, copy=True) for g in grads]
    if len(grads) != len(params):
        raise ContractError("loss_fn must return one gradient per parameter")

    coords = [(k, idx) for k, p in enumerate(params) for idx in np.ndindex(p.shape)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng if rng is not None else np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    errors = []
    worst, max_err = None, 0.0
    for k, idx in coords:
        p = params[k]
        orig = p[idx]
        p[idx] = orig + step
        plus, _ = loss_fn()
        p[idx] = orig - step
        minus, _ = loss_fn()
        p[idx] = orig
        numeric = (plus - minus) / (2.0 * step)
        analytic = grads[k][idx]
        err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
        errors.append(err)
        if err > max_err or worst is None:
            max_err, worst = max(err, max_err), (k, idx)
    return GradCheckReport(passed=max_err <= tol, max_error=max_err, n_checked=len(coords), worst=worst, errors=errors)
