"""Experiment orchestration: sweeps, per-realization evaluation and reports.

An experiment is described by a TOML document::

    seed = 0
    realizations = "1..50"        # 1-based, inclusive
    tuning_realizations = 10      # leading realizations used for the sweep
    compare = ["rsb", "cfr"]      # Welch comparison, first against second

    [dataset]
    kind = "synthetic"            # or "files" with path/format
    n_realizations = 50

    [params]                      # flat hyperparameters shared by all runs
    max_iterations = 3000

    [runs.rsb.sweep]
    gamma = [0.1, 1.0]

    [runs.cfr.params]
    beta = 0.0
    gamma = 0.0

Hyperparameters live in one flat namespace (see ``DEFAULT_PARAMS``).
Each job is keyed by ``(run, grid point, realization)`` and is a pure
function of that key and the experiment seed, so results are reproducible
and independent of the worker count.
"""

from __future__ import annotations

import itertools
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import dataio
from .dataio import DatasetBundle, OutcomeScaler
from .evaluation import EvalReport, aggregate, ate_error, pehe, pehe_nn, welch_t_test
from .losses import IPMConfig, LossWeights
from .model import NetworkConfig, RSBNet
from .synthetic import Realization, SyntheticConfig, generate
from .tensor import ContractError
from .trainer import FactualData, TrainConfig, TrainResult, train

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


DEFAULT_PARAMS: dict[str, Any] = {
    # network
    "encoder_layers": [200, 200, 200],
    "rep_dim_a": 50,
    "rep_dim_bc": 150,
    "decoder_layers": [200, 200],
    "head_layers": [100, 100, 100],
    "activation": "elu",
    "init_gain": 0.1,
    # loss weights
    "alpha": 1.0,
    "beta": 1.0,
    "gamma": 1.0,
    "lam": 1e-4,
    # IPM
    "ipm_kind": "wasserstein",
    "sinkhorn_lambda": 30.0,
    "sinkhorn_iterations": 50,
    "ground_cost": "euclidean",
    # optimisation
    "batch_size": 100,
    "max_iterations": 5000,
    "eval_interval": 100,
    "patience": 10,
    "learning_rate": 1e-3,
    "lr_decay": 1.0,
    "beta1": 0.9,
    "beta2": 0.999,
    "adam_epsilon": 1e-8,
    # preprocessing
    "normalization": "minmax",
    "standardize_outcome": False,
}

NETWORK_KEYS = ("encoder_layers", "rep_dim_a", "rep_dim_bc", "decoder_layers", "head_layers", "activation", "init_gain")


def build_configs(params: dict[str, Any], input_dim: int, seed: int) -> tuple[NetworkConfig, TrainConfig]:
    unknown = set(params) - set(DEFAULT_PARAMS)
    if unknown:
        raise ConfigError(f"unknown hyperparameters {sorted(unknown)}")
    p = {**DEFAULT_PARAMS, **params}
    try:
        net = NetworkConfig(input_dim=input_dim, **{k: p[k] for k in NETWORK_KEYS})
        cfg = TrainConfig(
            loss_weights=LossWeights(alpha=p["alpha"], beta=p["beta"], gamma=p["gamma"], lam=p["lam"]),
            batch_size=int(p["batch_size"]),
            max_iterations=int(p["max_iterations"]),
            eval_interval=int(p["eval_interval"]),
            patience=int(p["patience"]),
            learning_rate=float(p["learning_rate"]),
            lr_decay=float(p["lr_decay"]),
            beta1=float(p["beta1"]),
            beta2=float(p["beta2"]),
            adam_epsilon=float(p["adam_epsilon"]),
            ipm=IPMConfig(
                kind=p["ipm_kind"],
                sinkhorn_lambda=float(p["sinkhorn_lambda"]),
                sinkhorn_iterations=int(p["sinkhorn_iterations"]),
                ground_cost=p["ground_cost"],
            ),
            seed=seed,
        )
    except (ContractError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    if p["normalization"] not in ("minmax", "zscore", "none"):
        raise ConfigError(f"unknown normalization {p['normalization']!r}")
    return net, cfg


# -- configuration ----------------------------------------------------------


@dataclass
class RunSpec:
    name: str
    params: dict[str, Any] = field(default_factory=dict)
    sweep: dict[str, list] = field(default_factory=dict)

    def grid(self) -> list[dict[str, Any]]:
        keys = sorted(self.sweep)
        return [dict(zip(keys, combo)) for combo in itertools.product(*(self.sweep[k] for k in keys))]


@dataclass
class ExperimentConfig:
    dataset: dict[str, Any]
    runs: list[RunSpec]
    params: dict[str, Any] = field(default_factory=dict)
    realizations: tuple[int, int] | None = None
    tuning_realizations: int = 10
    compare: tuple[str, str] | None = None
    seed: int = 0
    out: str = "runs/experiment"
    workers: int = 1

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ExperimentConfig":
        doc = dict(doc)
        runs_doc = doc.pop("runs", None) or {"rsb": {}}
        runs = []
        for name, spec in runs_doc.items():
            extra = set(spec) - {"params", "sweep"}
            if extra:
                raise ConfigError(f"run {name!r}: unknown keys {sorted(extra)}")
            sweep = {k: list(v) for k, v in spec.get("sweep", {}).items()}
            if any(len(v) == 0 for v in sweep.values()):
                raise ConfigError(f"run {name!r}: empty sweep list")
            runs.append(RunSpec(name=name, params=dict(spec.get("params", {})), sweep=sweep))
        rng = doc.pop("realizations", None)
        compare = doc.pop("compare", None)
        known = {"dataset", "params", "tuning_realizations", "seed", "out", "workers"}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown top-level keys {sorted(extra)}")
        cfg = cls(
            dataset=dict(doc.get("dataset", {"kind": "synthetic"})),
            runs=runs,
            params=dict(doc.get("params", {})),
            realizations=parse_range(rng) if rng is not None else None,
            tuning_realizations=int(doc.get("tuning_realizations", 10)),
            compare=tuple(compare) if compare else None,
            seed=int(doc.get("seed", 0)),
            out=str(doc.get("out", "runs/experiment")),
            workers=int(doc.get("workers", 1)),
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc)

    def validate(self) -> None:
        names = [r.name for r in self.runs]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate run names")
        if self.compare is not None:
            if len(self.compare) != 2 or any(c not in names for c in self.compare):
                raise ConfigError(f"compare must name two configured runs, got {self.compare}")
        for run in self.runs:
            for key in list(run.params) + list(run.sweep) + list(self.params):
                if key not in DEFAULT_PARAMS:
                    raise ConfigError(f"run {run.name!r}: unknown hyperparameter {key!r}")
        if self.tuning_realizations < 1:
            raise ConfigError("tuning_realizations must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        kind = self.dataset.get("kind", "synthetic")
        if kind not in ("synthetic", "files"):
            raise ConfigError(f"unknown dataset kind {kind!r}")
        if kind == "files" and "path" not in self.dataset:
            raise ConfigError("dataset.kind = 'files' needs dataset.path")

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "out": self.out,
            "workers": self.workers,
            "realizations": None if self.realizations is None else f"{self.realizations[0]}..{self.realizations[1]}",
            "tuning_realizations": self.tuning_realizations,
            "compare": list(self.compare) if self.compare else None,
            "dataset": self.dataset,
            "params": {**DEFAULT_PARAMS, **self.params},
            "runs": {r.name: {"params": r.params, "sweep": r.sweep} for r in self.runs},
        }


def parse_range(spec) -> tuple[int, int]:
    """``"A..B"`` (1-based, inclusive) or a single integer."""
    if isinstance(spec, int):
        return spec, spec
    try:
        a, _, b = str(spec).partition("..")
        lo, hi = int(a), int(b or a)
    except ValueError:
        raise ConfigError(f"bad realization range {spec!r}; expected A..B") from None
    if lo < 1 or hi < lo:
        raise ConfigError(f"bad realization range {spec!r}")
    return lo, hi


def load_dataset(spec: dict[str, Any]) -> DatasetBundle:
    kind = spec.get("kind", "synthetic")
    if kind == "synthetic":
        keys = ("d_a", "d_b", "d_c", "n_samples", "n_realizations", "seed")
        extra = set(spec) - set(keys) - {"kind"}
        if extra:
            raise ConfigError(f"unknown synthetic dataset keys {sorted(extra)}")
        try:
            cfg = SyntheticConfig(**{k: int(spec[k]) for k in keys if k in spec})
        except ContractError as exc:
            raise ConfigError(str(exc)) from exc
        return DatasetBundle(generate(cfg), name="synthetic")
    try:
        return dataio.load(spec["path"], spec.get("format", "csv"), spec.get("name"))
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from exc


# -- one job ----------------------------------------------------------------


@dataclass
class Prepared:
    """A realization with its split, normalised covariates and outcome scaling."""

    r: Realization
    split: dataio.SplitSpec
    x: np.ndarray
    scaler: OutcomeScaler

    def factual(self, idx) -> FactualData:
        return FactualData(self.x[idx], self.r.t[idx], self.scaler.transform(self.r.y_f[idx]))


def prepare(r: Realization, seed: int, realization: int, params: dict[str, Any]) -> Prepared:
    p = {**DEFAULT_PARAMS, **params}
    sp = dataio.realization_split(r.n, seed, realization)
    norm = dataio.fit_normalizer(r.x[sp.train_idx], p["normalization"])
    scaler = OutcomeScaler.fit(r.y_f[sp.train_idx]) if p["standardize_outcome"] else OutcomeScaler()
    return Prepared(r=r, split=sp, x=norm.apply(r.x), scaler=scaler)


def predict_effects(net: RSBNet, prep: Prepared, idx) -> tuple[np.ndarray, np.ndarray]:
    """De-standardised potential-outcome predictions for rows ``idx``."""
    y0, y1 = net.predict_outcomes(prep.x[idx])
    return prep.scaler.inverse(y0.ravel()), prep.scaler.inverse(y1.ravel())


def evaluate_realization(net: RSBNet, prep: Prepared, realization: int) -> dict[str, Any]:
    """Within-sample (train+valid), out-of-sample (test) reports and the selection score."""
    r, sp = prep.r, prep.split
    within = sp.within_idx
    out: dict[str, Any] = {}
    for scope, query, pool in (
        ("within_sample", within, within),
        ("out_of_sample", sp.test_idx, None),
    ):
        y0, y1 = predict_effects(net, prep, query)
        tau_hat = y1 - y0
        out[scope] = EvalReport(
            sqrt_pehe=pehe(tau_hat, r.mu1[query], r.mu0[query]) if r.has_truth else None,
            ate_error=ate_error(tau_hat, r.mu1[query], r.mu0[query]) if r.has_truth else None,
            sqrt_pehe_nn=pehe_nn(prep.x, r.t, r.y_f, y1, y0, query_idx=query, pool_idx=pool),
            scope=scope,
            realization_id=realization,
        )
    y0, y1 = predict_effects(net, prep, sp.valid_idx)
    out["selection_pehe_nn"] = pehe_nn(prep.x, r.t, r.y_f, y1, y0, query_idx=sp.valid_idx, pool_idx=within)
    return out


def fit_realization(r: Realization, seed: int, realization: int, params: dict[str, Any]) -> tuple[TrainResult, Prepared]:
    prep = prepare(r, seed, realization, params)
    net_cfg, train_cfg = build_configs(params, r.x.shape[1], dataio.derive_seed(seed, 10_000 + realization))
    result = train(prep.factual(prep.split.train_idx), prep.factual(prep.split.valid_idx), net_cfg, train_cfg)
    return result, prep


def run_job(job: tuple[str, int, dict[str, Any], int, Realization, int]) -> dict[str, Any]:
    run, point_id, params, realization, r, seed = job
    result, prep = fit_realization(r, seed, realization, params)
    ev = evaluate_realization(result.net, prep, realization)
    return {
        "run": run,
        "grid_point": point_id,
        "realization": realization,
        "seed": seed,
        "params": params,
        "selection_pehe_nn": ev["selection_pehe_nn"],
        "within_sample": ev["within_sample"].to_dict(),
        "out_of_sample": ev["out_of_sample"].to_dict(),
        "best_iteration": result.best_iteration,
        "iterations_done": result.iterations_done,
        "best_valid_objective": result.best_valid,
        "history": result.history,
    }


def _execute(jobs, workers: int) -> list[dict[str, Any]]:
    if workers <= 1 or len(jobs) <= 1:
        results = [run_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_job, jobs))
    return sorted(results, key=lambda d: (d["run"], d["grid_point"], d["realization"]))


# -- reports ----------------------------------------------------------------


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _dump_lines(path: Path, records) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(rec, sort_keys=True) + "\n" for rec in records))


def reports_from_records(records: list[dict[str, Any]], scope: str) -> list[EvalReport]:
    return [EvalReport(**rec[scope]) for rec in records]


def aggregate_records(records: list[dict[str, Any]]) -> dict[str, Any]:
    return {scope: aggregate(reports_from_records(records, scope)).to_dict() for scope in ("within_sample", "out_of_sample")}


def compare_records(a: list[dict[str, Any]], b: list[dict[str, Any]], names: tuple[str, str], alpha: float = 0.05) -> dict[str, Any]:
    """Welch's t-test per scope and metric; negative t means the first run scores lower."""
    out: dict[str, Any] = {"a": names[0], "b": names[1], "alpha": alpha, "tests": {}}
    for scope in ("within_sample", "out_of_sample"):
        for metric in ("sqrt_pehe", "ate_error", "sqrt_pehe_nn"):
            va = [rec[scope][metric] for rec in a]
            vb = [rec[scope][metric] for rec in b]
            if any(v is None for v in va + vb):
                continue
            try:
                res = welch_t_test(va, vb, alpha)
            except ContractError as exc:
                out["tests"][f"{scope}.{metric}"] = {"error": str(exc)}
                continue
            better = None
            if res.significant:
                better = names[0] if res.mean_a < res.mean_b else names[1]
            out["tests"][f"{scope}.{metric}"] = {
                "mean_a": res.mean_a,
                "mean_b": res.mean_b,
                "t_stat": res.t_stat,
                "dof": res.dof,
                "p_value": res.p_value,
                "significant": res.significant,
                "better": better,
            }
    return out


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None, workers: int | None = None) -> dict[str, Any]:
    """Sweep each run on the tuning realizations, pick the grid point with the
    lowest mean validation sqrt(PEHE_nn), evaluate it on the full range and
    write reports. Returns the summary document that is also written to
    ``summary.json``.
    """
    out = Path(out_dir or cfg.out)
    workers = workers or cfg.workers
    bundle = load_dataset(cfg.dataset)
    lo, hi = cfg.realizations or (1, len(bundle))
    if hi > len(bundle):
        raise ConfigError(f"realization range {lo}..{hi} exceeds the {len(bundle)} realizations available")
    for run in cfg.runs:
        for point in run.grid():
            build_configs({**cfg.params, **run.params, **point}, bundle.feature_dim, 0)
    full = list(range(lo, hi + 1))
    tuning = full[: cfg.tuning_realizations]

    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "config.resolved.json", cfg.to_dict())

    def jobs_for(run: RunSpec, points: list[tuple[int, dict]], realizations: list[int]):
        return [
            (run.name, pid, {**cfg.params, **run.params, **point}, k, bundle[k - 1], cfg.seed)
            for pid, point in points
            for k in realizations
        ]

    summary: dict[str, Any] = {"seed": cfg.seed, "realizations": [lo, hi], "runs": {}}
    finals: dict[str, list[dict[str, Any]]] = {}
    for run in cfg.runs:
        points = list(enumerate(run.grid()))
        cache: dict[tuple[int, int], dict[str, Any]] = {}
        if len(points) > 1:
            for res in _execute(jobs_for(run, points, tuning), workers):
                cache[(res["grid_point"], res["realization"])] = res
        scores = []
        for pid, point in points:
            sel = [cache[(pid, k)]["selection_pehe_nn"] for k in tuning if (pid, k) in cache]
            scores.append({"grid_point": pid, "point": point, "mean_selection_pehe_nn": float(np.mean(sel)) if sel else None})
        best = min(points, key=lambda pp: (scores[pp[0]]["mean_selection_pehe_nn"] or 0.0, pp[0]))[0]
        _dump_lines(out / run.name / "sweep.jsonl", scores)

        todo = [k for k in full if (best, k) not in cache]
        for res in _execute(jobs_for(run, [(best, points[best][1])], todo), workers):
            cache[(best, res["realization"])] = res
        records = [cache[(best, k)] for k in full]
        finals[run.name] = records
        for rec in records:
            _dump_lines(out / run.name / "history" / f"r{rec['realization']:04d}.jsonl", rec["history"])
        _dump_lines(out / run.name / "realizations.jsonl", [{k: v for k, v in rec.items() if k != "history"} for rec in records])
        agg = aggregate_records(records) if len(records) >= 2 else None
        doc = {"run": run.name, "grid_point": best, "params": points[best][1], "aggregate": agg}
        _dump(out / run.name / "aggregate.json", doc)
        summary["runs"][run.name] = doc

    if cfg.compare and len(full) >= 2:
        a, b = cfg.compare
        comparison = compare_records(finals[a], finals[b], (a, b))
        _dump(out / "comparison.json", comparison)
        summary["comparison"] = comparison
    _dump(out / "summary.json", summary)
    return summary


def env_overrides(out: str | None, workers: int | None) -> tuple[str | None, int | None]:
    out = out or os.environ.get("RSBNET_OUT")
    if workers is None and os.environ.get("RSBNET_WORKERS"):
        workers = int(os.environ["RSBNET_WORKERS"])
    return out, workers
