"""Minibatch training of RSB-Net with early stopping on the validation objective."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import losses
from .losses import EmptyArmError, IPMConfig, LossTerms, LossWeights
from .model import NetworkConfig, RSBNet
from .tensor import AdamConfig, ContractError, PackedParams, adam_step, zero_grads

log = logging.getLogger(__name__)

MAX_BATCH_REDRAWS = 20


class TrainingError(RuntimeError):
    pass


class FactualData(NamedTuple):
    x: np.ndarray
    t: np.ndarray
    y: np.ndarray


@dataclass(frozen=True)
class TrainConfig:
    loss_weights: LossWeights = field(default_factory=LossWeights)
    batch_size: int = 100
    max_iterations: int = 5000
    eval_interval: int = 100
    patience: int = 10
    learning_rate: float = 1e-3
    lr_decay: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    ipm: IPMConfig = field(default_factory=IPMConfig)
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 4:
            raise ContractError("batch_size must be >= 4")
        if self.eval_interval < 1 or self.max_iterations < self.eval_interval:
            raise ContractError("need 1 <= eval_interval <= max_iterations")
        if self.patience < 1:
            raise ContractError("patience must be >= 1")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ContractError("lr_decay must lie in (0, 1]")

    def adam(self) -> AdamConfig:
        return AdamConfig(self.learning_rate, self.beta1, self.beta2, self.adam_epsilon)

    def with_weights(self, **kw) -> "TrainConfig":
        return replace(self, loss_weights=replace(self.loss_weights, **kw))

    def to_dict(self) -> dict:
        return asdict(self)


def objective(
    net: RSBNet,
    data: FactualData,
    w: np.ndarray,
    lw: LossWeights,
    ipm: IPMConfig = IPMConfig(),
    backward: bool = True,
    skip_unweighted: bool = False,
) -> tuple[float, LossTerms]:
    """Total loss on one batch; with ``backward`` the gradients are accumulated into ``net``.

    ``skip_unweighted`` leaves out terms whose weight is zero (they are
    reported as 0); the total is unaffected.
    """
    cache = net.forward(data.x, data.t)
    pred, d_y = losses.prediction_loss(cache.y_hat, data.y, w)

    recon, d_xhat = 0.0, None
    if lw.beta > 0 or not skip_unweighted:
        recon, d_xhat = losses.recon_loss(cache.x_hat, cache.x)

    pcc, d_a, d_bc = 0.0, None, None
    if lw.gamma > 0 or not skip_unweighted:
        pcc, d_a, d_bc = losses.pcc_loss(cache.phi_a, cache.phi_bc)

    ipm_value, d_ipm = 0.0, None
    if lw.alpha > 0 or not skip_unweighted:
        ipm_value, d_ipm = losses.ipm_loss(cache.phi_bc, cache.t, ipm)

    weights = [p.value for p in net.weights()]
    reg, d_reg = losses.weight_regularizer(weights) if lw.lam > 0 or not skip_unweighted else (0.0, None)

    terms = LossTerms(pred=pred, ipm=ipm_value, recon=recon, pcc=pcc, reg=reg)
    total = losses.total_loss(terms, lw)

    if backward:
        g_bc = None
        if d_bc is not None and lw.gamma > 0:
            g_bc = lw.gamma * d_bc
        if d_ipm is not None and lw.alpha > 0:
            g_bc = lw.alpha * d_ipm if g_bc is None else g_bc + lw.alpha * d_ipm
        net.backward(
            cache,
            d_y_hat=d_y,
            d_x_hat=lw.beta * d_xhat if d_xhat is not None and lw.beta > 0 else None,
            d_phi_a=lw.gamma * d_a if d_a is not None and lw.gamma > 0 else None,
            d_phi_bc=g_bc,
        )
        if d_reg is not None and lw.lam > 0:
            for p, g in zip(net.weights(), d_reg):
                p.grad += lw.lam * g
    return total, terms


def sample_minibatch(train_idx: np.ndarray, batch_size: int, rng: np.random.Generator, t: np.ndarray) -> np.ndarray:
    """Uniform draw without replacement, redrawn while a treatment arm is missing.

    ``t`` is the treatment vector indexed by ``train_idx`` entries.
    """
    train_idx = np.asarray(train_idx)
    if batch_size > train_idx.size:
        raise ContractError(f"batch_size {batch_size} exceeds the {train_idx.size} training rows")
    for _ in range(MAX_BATCH_REDRAWS):
        batch = rng.choice(train_idx, size=batch_size, replace=False)
        arms = t[batch]
        if arms.any() and not arms.all():
            return batch
    raise TrainingError(
        f"{MAX_BATCH_REDRAWS} minibatch draws missed a treatment arm; use a larger batch_size"
    )


def validation_objective(
    net: RSBNet, data: FactualData, u: float, lw: LossWeights, ipm: IPMConfig = IPMConfig()
) -> tuple[float, LossTerms]:
    """Full objective on the validation rows, weighting samples with the training ``u``."""
    if data.x.shape[0] == 0:
        raise ContractError("validation split is empty")
    w = losses.sample_weights(data.t, u=u).w
    try:
        return objective(net, data, w, lw, ipm, backward=False)
    except EmptyArmError:
        # single-arm validation rows: the IPM term is undefined and dropped
        return objective(net, data, w, replace(lw, alpha=0.0), ipm, backward=False, skip_unweighted=True)


@dataclass
class TrainResult:
    net: RSBNet
    history: list[dict]
    best_valid: float
    best_iteration: int
    iterations_done: int
    u: float
    stopped_early: bool

    def history_jsonl(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.history)


def train(train_data: FactualData, valid_data: FactualData, net_cfg: NetworkConfig, cfg: TrainConfig) -> TrainResult:
    """Fit a fresh network and return it restored to the best validation checkpoint.

    History records are produced at every evaluation point and carry the
    minibatch loss terms of that step plus the validation objective.
    """
    t_train = np.asarray(train_data.t).ravel().astype(np.int64)
    if t_train.all() or not t_train.any():
        raise TrainingError("training split must contain both treated and control samples")
    n_train = t_train.size
    batch_size = min(cfg.batch_size, n_train)

    sw = losses.sample_weights(t_train)
    init_seq, batch_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    net = RSBNet(net_cfg, np.random.default_rng(init_seq))
    rng = np.random.default_rng(batch_seq)
    params = PackedParams(net.params())
    adam = cfg.adam()
    lw = cfg.loss_weights
    idx = np.arange(n_train)
    y_train = np.asarray(train_data.y, dtype=np.float64).reshape(-1, 1)

    history: list[dict] = []
    best_valid, best_iter, best_state = np.inf, 0, net.state_dict()
    since_best = 0
    stopped_early = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        batch = sample_minibatch(idx, batch_size, rng, t_train)
        data = FactualData(train_data.x[batch], t_train[batch], y_train[batch])
        zero_grads(params)
        total, terms = objective(net, data, sw.w[batch], lw, cfg.ipm, backward=True, skip_unweighted=True)
        if not np.isfinite(total):
            raise TrainingError(f"non-finite loss at iteration {it}: {asdict(terms)}")
        adam_step(params, adam)

        if it % cfg.eval_interval == 0 or it == cfg.max_iterations:
            rate = adam.learning_rate
            # step decay: the rate shrinks by lr_decay after every eval_interval steps
            adam.learning_rate *= cfg.lr_decay
            valid, vterms = validation_objective(net, valid_data, sw.u, lw, cfg.ipm)
            if not np.isfinite(valid):
                raise TrainingError(f"non-finite validation objective at iteration {it}: {asdict(vterms)}")
            history.append(
                {
                    "iteration": it,
                    "loss": total,
                    "learning_rate": rate,
                    **{f"train_{k}": v for k, v in asdict(terms).items()},
                    "valid_objective": valid,
                    **{f"valid_{k}": v for k, v in asdict(vterms).items()},
                }
            )
            if valid < best_valid:
                best_valid, best_iter, best_state = valid, it, net.state_dict()
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    stopped_early = True
                    break
    log.debug("stopped at iteration %d, best %.6g at %d", it, best_valid, best_iter)
    net.load_state_dict(best_state)
    return TrainResult(
        net=net,
        history=history,
        best_valid=float(best_valid),
        best_iteration=best_iter,
        iterations_done=it,
        u=sw.u,
        stopped_early=stopped_early,
    )
