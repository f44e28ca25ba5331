"""Realization files, dataset bundles, splits and feature normalisation.

Canonical on-disk format: one CSV file per realization with the header
``x_1,...,x_d,t,y_f,y_cf[,mu0,mu1]``. Floats are written with ``repr`` so a
write/load round trip is bitwise exact. The ``mu0``/``mu1`` columns are
optional; without them true-effect metrics are reported as unavailable.

The commonly circulated IHDP archives (``ihdp_npci_1-100.train.npz`` and
``.test.npz``) hold arrays ``x`` (n, d, R), ``t``, ``yf``, ``ycf``, ``mu0``,
``mu1`` (n, R). :func:`convert_npz` writes them out in the canonical format;
pass both halves to restore the full 747-row sample.
"""

from __future__ import annotations

import glob
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .synthetic import Realization
from .tensor import ContractError

IHDP_COVARIATES = 25


class ParseError(ValueError):
    pass


@dataclass
class DatasetBundle:
    realizations: list[Realization]
    name: str = "dataset"
    feature_dim: int = field(init=False)

    def __post_init__(self):
        if not self.realizations:
            raise ContractError("a dataset needs at least one realization")
        first = self.realizations[0]
        self.feature_dim = first.x.shape[1]
        for k, r in enumerate(self.realizations):
            if r.x.shape != first.x.shape:
                raise ContractError(
                    f"realization {k} has shape {r.x.shape}, expected {first.x.shape}"
                )

    @property
    def n_samples(self) -> int:
        return self.realizations[0].n

    def __len__(self) -> int:
        return len(self.realizations)

    def __getitem__(self, k: int) -> Realization:
        return self.realizations[k]

    def summary(self) -> dict:
        t = self.realizations[0].t
        return {
            "name": self.name,
            "realizations": len(self),
            "samples": self.n_samples,
            "feature_dim": self.feature_dim,
            "treated": int(t.sum()),
            "control": int(t.size - t.sum()),
            "has_truth": all(r.has_truth for r in self.realizations),
        }


# -- canonical CSV format ---------------------------------------------------


def header(d: int, with_truth: bool) -> list[str]:
    cols = [f"x_{k + 1}" for k in range(d)] + ["t", "y_f", "y_cf"]
    return cols + (["mu0", "mu1"] if with_truth else [])


def write_realization(r: Realization, path: str | Path) -> None:
    cols = header(r.x.shape[1], r.has_truth)
    lines = [",".join(cols)]
    for i in range(r.n):
        row = [repr(float(v)) for v in r.x[i]] + [str(int(r.t[i])), repr(float(r.y_f[i])), repr(float(r.y_cf[i]))]
        if r.has_truth:
            row += [repr(float(r.mu0[i])), repr(float(r.mu1[i]))]
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_realization(path: str | Path) -> Realization:
    raw = Path(path).read_bytes()
    if not raw:
        raise ParseError(f"{path}: empty file")
    if not raw.endswith(b"\n"):
        raise ParseError(f"{path}: truncated file, no line terminator at byte offset {len(raw)}")
    lines = raw.split(b"\n")[:-1]
    cols = lines[0].decode("ascii").strip().split(",")
    xs = [c for c in cols if c.startswith("x_")]
    d = len(xs)
    if d == 0 or cols not in (header(d, True), header(d, False)):
        raise ParseError(f"{path}: unrecognised header {lines[0][:80]!r}")
    rows = []
    offset = len(lines[0]) + 1
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(b",")
        if len(fields) != len(cols):
            raise ParseError(
                f"{path}: row {lineno} (byte offset {offset}) has {len(fields)} fields, expected {len(cols)}"
            )
        try:
            values = [float(f) for f in fields]
        except ValueError as exc:
            raise ParseError(f"{path}: row {lineno} (byte offset {offset}): {exc}") from None
        if not all(math.isfinite(v) for v in values):
            raise ParseError(f"{path}: row {lineno} (byte offset {offset}) contains a non-finite value")
        if values[d] not in (0.0, 1.0):
            raise ParseError(f"{path}: row {lineno} (byte offset {offset}) has treatment {values[d]!r}")
        rows.append(values)
        offset += len(line) + 1
    if not rows:
        raise ParseError(f"{path}: no data rows")
    a = np.array(rows, dtype=np.float64)
    with_truth = len(cols) == d + 5
    return Realization(
        x=a[:, :d],
        t=a[:, d].astype(np.int64),
        y_f=a[:, d + 1],
        y_cf=a[:, d + 2],
        mu0=a[:, d + 3] if with_truth else None,
        mu1=a[:, d + 4] if with_truth else None,
    )


def write_bundle(bundle: DatasetBundle, directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, r in enumerate(bundle.realizations):
        p = directory / f"{bundle.name}_{k + 1:04d}.csv"
        write_realization(r, p)
        paths.append(p)
    return paths


def _resolve(path: str | Path) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.csv"))
    elif p.is_file():
        files = [p]
    else:
        files = sorted(Path(f) for f in glob.glob(str(path)))
    if not files:
        raise FileNotFoundError(f"no realization files match {path}")
    return files


def load(path: str | Path, format: str = "csv", name: str | None = None) -> DatasetBundle:
    """Load a bundle from a directory, glob or single file.

    ``format`` is ``"csv"`` (canonical files) or ``"npz"`` (IHDP-style arrays).
    """
    if format == "npz":
        paths = _resolve(path) if not str(path).endswith(".npz") or "*" in str(path) else [Path(path)]
        realizations = load_npz(paths)
        default_name = Path(paths[0]).stem
    elif format == "csv":
        files = _resolve(path)
        realizations = [read_realization(f) for f in files]
        default_name = files[0].stem.rsplit("_", 1)[0]
    else:
        raise ContractError(f"unknown dataset format {format!r}")
    shape = realizations[0].x.shape
    for k, r in enumerate(realizations):
        if r.x.shape != shape:
            raise ParseError(f"realization {k + 1} has covariates of shape {r.x.shape}, expected {shape}")
    return DatasetBundle(realizations, name=name or default_name)


def load_npz(paths: Sequence[str | Path]) -> list[Realization]:
    """Read IHDP-style ``.npz`` archives; several files are concatenated row-wise."""
    parts = [np.load(p) for p in paths]
    keys = ("x", "t", "yf", "ycf")
    for p, arc in zip(paths, parts):
        missing = [k for k in keys if k not in arc]
        if missing:
            raise ParseError(f"{p}: missing arrays {missing}")
    cat = {k: np.concatenate([a[k] for a in parts], axis=0) for k in parts[0].files}
    x = cat["x"]
    if x.ndim == 2:
        x = x[:, :, None]
    n_real = x.shape[2]
    col = lambda a, h: a[:, h] if a.ndim == 2 else a  # noqa: E731
    out = []
    for h in range(n_real):
        out.append(
            Realization(
                x=x[:, :, h],
                t=col(cat["t"], h),
                y_f=col(cat["yf"], h),
                y_cf=col(cat["ycf"], h),
                mu0=col(cat["mu0"], h) if "mu0" in cat else None,
                mu1=col(cat["mu1"], h) if "mu1" in cat else None,
            )
        )
    return out


def convert_npz(paths: Sequence[str | Path], directory: str | Path, name: str = "ihdp") -> list[Path]:
    return write_bundle(DatasetBundle(load_npz(paths), name=name), directory)


def check_ihdp(bundle: DatasetBundle) -> dict:
    """Validate the IHDP shape and report arm sizes."""
    if bundle.feature_dim != IHDP_COVARIATES:
        raise ContractError(f"IHDP data must have {IHDP_COVARIATES} covariates, found {bundle.feature_dim}")
    return bundle.summary()


# -- splits -----------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train_idx: np.ndarray
    valid_idx: np.ndarray
    test_idx: np.ndarray
    seed: int

    @property
    def within_idx(self) -> np.ndarray:
        return np.concatenate([self.train_idx, self.valid_idx])


def split_sizes(n: int) -> tuple[int, int, int]:
    """Train/valid/test sizes: test is 10% of n, valid 30% of the rest (half-up rounding)."""
    n_test = math.floor(0.10 * n + 0.5)
    n_valid = math.floor(0.30 * (n - n_test) + 0.5)
    return n - n_test - n_valid, n_valid, n_test


def derive_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0] >> 1)


def split(n: int, seed: int) -> SplitSpec:
    if n < 10:
        raise ContractError(f"need at least 10 samples to split, got {n}")
    n_train, n_valid, _ = split_sizes(n)
    perm = np.random.default_rng(seed).permutation(n)
    return SplitSpec(
        train_idx=np.sort(perm[:n_train]),
        valid_idx=np.sort(perm[n_train : n_train + n_valid]),
        test_idx=np.sort(perm[n_train + n_valid :]),
        seed=seed,
    )


def realization_split(n: int, seed: int, realization: int) -> SplitSpec:
    """A fresh split for each realization index under one experiment seed."""
    return split(n, derive_seed(seed, realization))


# -- normalisation ----------------------------------------------------------


@dataclass(frozen=True)
class Normalizer:
    kind: str
    shift: np.ndarray
    scale: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.shift) / self.scale


def fit_normalizer(x_train: np.ndarray, kind: str = "minmax") -> Normalizer:
    """Per-feature statistics from training rows; zero-range features map to 0."""
    x_train = np.asarray(x_train, dtype=np.float64)
    if x_train.shape[0] < 1:
        raise ContractError("normaliser needs at least one row")
    if kind == "minmax":
        shift = x_train.min(axis=0)
        spread = x_train.max(axis=0) - shift
    elif kind == "zscore":
        shift = x_train.mean(axis=0)
        spread = x_train.std(axis=0)
    elif kind == "none":
        shift = np.zeros(x_train.shape[1])
        spread = np.ones(x_train.shape[1])
    else:
        raise ContractError(f"unknown normalisation {kind!r}")
    # x - shift is 0 on the training rows of a zero-range column; inf scale keeps it 0 elsewhere too
    scale = np.where(spread > 0, spread, np.inf)
    return Normalizer(kind=kind, shift=shift, scale=scale)


@dataclass(frozen=True)
class OutcomeScaler:
    mean: float = 0.0
    std: float = 1.0

    @classmethod
    def fit(cls, y: np.ndarray) -> "OutcomeScaler":
        std = float(np.std(y))
        return cls(mean=float(np.mean(y)), std=std if std > 0 else 1.0)

    def transform(self, y):
        return (y - self.mean) / self.std

    def inverse(self, y):
        return y * self.std + self.mean

    def inverse_effect(self, tau):
        return tau * self.std
