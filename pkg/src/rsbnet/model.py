"""RSB-Net: a shared encoder whose output is split positionally into a
bias-only block (A) and an outcome-relevant block (BC), a decoder that
reconstructs the input from both blocks, and two outcome heads that only
ever see the BC block.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ACTIVATIONS, ContractError, Dense, DimensionError, LayerCache, Matrix, ParamTensor
from .tensor import stack_backward, stack_forward


class ConfigError(ContractError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    """Layer widths of the network.

    ``encoder_layers`` lists every encoder width including the
    representation layer, whose width must equal ``rep_dim_a + rep_dim_bc``.
    ``decoder_layers`` and ``head_layers`` list hidden widths only; the
    linear output layers (``input_dim`` and 1 units) are appended.
    """

    input_dim: int
    encoder_layers: tuple[int, ...] = (200, 200, 200)
    rep_dim_a: int = 50
    rep_dim_bc: int = 150
    decoder_layers: tuple[int, ...] = (200, 200)
    head_layers: tuple[int, ...] = (100, 100, 100)
    activation: str = "elu"
    init_gain: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "encoder_layers", tuple(int(w) for w in self.encoder_layers))
        object.__setattr__(self, "decoder_layers", tuple(int(w) for w in self.decoder_layers))
        object.__setattr__(self, "head_layers", tuple(int(w) for w in self.head_layers))
        if self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1")
        if self.rep_dim_a < 1 or self.rep_dim_bc < 1:
            raise ConfigError("rep_dim_a and rep_dim_bc must both be >= 1")
        if not self.encoder_layers or self.encoder_layers[-1] != self.rep_dim_a + self.rep_dim_bc:
            raise ConfigError(
                f"encoder output width {self.encoder_layers[-1:] or None} must equal "
                f"rep_dim_a + rep_dim_bc = {self.rep_dim_a + self.rep_dim_bc}"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if any(w < 1 for w in self.encoder_layers + self.decoder_layers + self.head_layers):
            raise ConfigError("layer widths must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("encoder_layers", "decoder_layers", "head_layers"):
            d[k] = list(d[k])
        return d


@dataclass
class ForwardCache:
    """Everything the backward pass needs from one training forward pass."""

    x: Matrix
    t: np.ndarray
    phi: Matrix
    x_hat: Matrix
    y_hat: Matrix
    enc: list[LayerCache]
    dec: list[LayerCache]
    rep_dim_a: int
    heads: dict[int, tuple[np.ndarray, list[LayerCache]]] = field(default_factory=dict)

    @property
    def phi_a(self) -> Matrix:
        return self.phi[:, : self.rep_dim_a]

    @property
    def phi_bc(self) -> Matrix:
        return self.phi[:, self.rep_dim_a :]


def _build_stack(widths, fan_in, activation, out_activation, rng, gain, prefix):
    layers = {}
    for k, w in enumerate(widths):
        act = out_activation if k == len(widths) - 1 else activation
        layers[f"{prefix}{k}"] = Dense(fan_in, w, act, rng, gain)
        fan_in = w
    return layers


class RSBNet:
    def __init__(self, config: NetworkConfig, seed: int | np.random.Generator = 0):
        self.config = config
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        c = config
        act = c.activation
        rep = c.rep_dim_a + c.rep_dim_bc
        # representation layer keeps the nonlinearity; output layers are linear
        self.encoder = _build_stack(c.encoder_layers, c.input_dim, act, act, rng, c.init_gain, "enc")
        self.decoder = _build_stack(
            c.decoder_layers + (c.input_dim,), rep, act, "identity", rng, c.init_gain, "dec"
        )
        self.head0 = _build_stack(c.head_layers + (1,), c.rep_dim_bc, act, "identity", rng, c.init_gain, "h0_")
        self.head1 = _build_stack(c.head_layers + (1,), c.rep_dim_bc, act, "identity", rng, c.init_gain, "h1_")

    # -- parameters ---------------------------------------------------------

    def layers(self) -> dict[str, Dense]:
        return {**self.encoder, **self.decoder, **self.head0, **self.head1}

    def params(self) -> list[ParamTensor]:
        out = []
        for layer in self.layers().values():
            out += [layer.w, layer.b]
        return out

    def weights(self) -> list[ParamTensor]:
        return [layer.w for layer in self.layers().values()]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for name, layer in self.layers().items():
            state[f"{name}.w"] = layer.w.value.copy()
            state[f"{name}.b"] = layer.b.value.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        layers = self.layers()
        expected = {f"{n}.{p}" for n in layers for p in "wb"}
        if set(state) != expected:
            raise ConfigError(f"checkpoint layers {sorted(set(state) ^ expected)} do not match the network")
        for name, layer in layers.items():
            for p in "wb":
                target = getattr(layer, p)
                value = np.asarray(state[f"{name}.{p}"], dtype=np.float64)
                if value.shape != target.shape:
                    raise ConfigError(f"{name}.{p}: checkpoint shape {value.shape} != {target.shape}")
                target.value[...] = value

    # -- inference ----------------------------------------------------------

    def _check_input(self, x: Matrix) -> Matrix:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise ConfigError(f"input of shape {x.shape} does not match input_dim={self.config.input_dim}")
        return x

    def representation(self, x: Matrix) -> Matrix:
        out, _ = stack_forward(list(self.encoder.values()), self._check_input(x))
        return out

    def encode(self, x: Matrix) -> tuple[Matrix, Matrix]:
        phi = self.representation(x)
        m = self.config.rep_dim_a
        return phi[:, :m], phi[:, m:]

    def decode(self, phi_a: Matrix, phi_bc: Matrix) -> Matrix:
        c = self.config
        if phi_a.shape[1] != c.rep_dim_a or phi_bc.shape[1] != c.rep_dim_bc or phi_a.shape[0] != phi_bc.shape[0]:
            raise ConfigError(f"representation blocks {phi_a.shape}, {phi_bc.shape} do not match the config")
        out, _ = stack_forward(list(self.decoder.values()), np.hstack([phi_a, phi_bc]))
        return out

    def _head(self, t: int) -> list[Dense]:
        if t == 0:
            return list(self.head0.values())
        if t == 1:
            return list(self.head1.values())
        raise ContractError(f"treatment must be 0 or 1, got {t!r}")

    def predict(self, phi_bc: Matrix, t: int) -> Matrix:
        if phi_bc.ndim != 2 or phi_bc.shape[1] != self.config.rep_dim_bc:
            raise ConfigError(f"phi_bc of shape {phi_bc.shape} does not match rep_dim_bc={self.config.rep_dim_bc}")
        out, _ = stack_forward(self._head(t), phi_bc)
        return out

    def predict_outcomes(self, x: Matrix) -> tuple[Matrix, Matrix]:
        """Both potential-outcome predictions from one encoder pass."""
        _, phi_bc = self.encode(x)
        return self.predict(phi_bc, 0), self.predict(phi_bc, 1)

    def predict_ite(self, x: Matrix) -> Matrix:
        y0, y1 = self.predict_outcomes(x)
        return y1 - y0

    # -- training passes ----------------------------------------------------

    def forward(self, x: Matrix, t: np.ndarray) -> ForwardCache:
        """Training forward pass; each row goes through the head of its own treatment."""
        x = self._check_input(x)
        t = np.asarray(t).ravel().astype(np.int64)
        if t.shape[0] != x.shape[0]:
            raise DimensionError(f"{t.shape[0]} treatments for {x.shape[0]} rows")
        if not np.isin(t, (0, 1)).all():
            raise ContractError("treatments must be 0 or 1")
        phi, enc = stack_forward(list(self.encoder.values()), x)
        x_hat, dec = stack_forward(list(self.decoder.values()), phi)
        phi_bc = phi[:, self.config.rep_dim_a :]
        y_hat = np.zeros((x.shape[0], 1))
        heads = {}
        for arm in (0, 1):
            rows = np.flatnonzero(t == arm)
            if rows.size == 0:
                continue
            out, caches = stack_forward(self._head(arm), phi_bc[rows])
            y_hat[rows] = out
            heads[arm] = (rows, caches)
        return ForwardCache(x=x, t=t, phi=phi, x_hat=x_hat, y_hat=y_hat, enc=enc, dec=dec, rep_dim_a=self.config.rep_dim_a, heads=heads)

    def backward(
        self,
        cache: ForwardCache,
        d_y_hat: Matrix | None = None,
        d_x_hat: Matrix | None = None,
        d_phi_a: Matrix | None = None,
        d_phi_bc: Matrix | None = None,
    ) -> None:
        """Accumulate parameter gradients for the given upstream gradients."""
        m = self.config.rep_dim_a
        d_phi = np.zeros_like(cache.phi)
        if d_y_hat is not None:
            for rows, caches in cache.heads.values():
                d_phi[rows, m:] += stack_backward(caches, d_y_hat[rows])
        if d_x_hat is not None:
            d_phi += stack_backward(cache.dec, d_x_hat)
        if d_phi_a is not None:
            d_phi[:, :m] += d_phi_a
        if d_phi_bc is not None:
            d_phi[:, m:] += d_phi_bc
        stack_backward(cache.enc, d_phi)

    # -- checkpoints --------------------------------------------------------

    def to_document(self) -> dict:
        layers = {}
        for name, value in self.state_dict().items():
            layers[name] = {"shape": list(value.shape), "values": value.ravel().tolist()}
        return {"format": "rsbnet-checkpoint/1", "config": self.config.to_dict(), "layers": layers}

    @classmethod
    def from_document(cls, doc: dict) -> "RSBNet":
        if doc.get("format") != "rsbnet-checkpoint/1":
            raise ConfigError(f"unsupported checkpoint format {doc.get('format')!r}")
        net = cls(NetworkConfig(**doc["config"]))
        state = {
            name: np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in doc["layers"].items()
        }
        net.load_state_dict(state)
        return net

    def save(self, path: str | Path) -> None:
        # json writes floats with repr(), which round-trips float64 exactly
        Path(path).write_text(json.dumps(self.to_document()))

    @classmethod
    def load(cls, path: str | Path) -> "RSBNet":
        return cls.from_document(json.loads(Path(path).read_text()))
