"""Command-line entry point: ``rsbnet <subcommand> ...``.

Exit status is 0 on success, 2 on configuration or input errors and 1 on
runtime failures. ``RSBNET_OUT`` and ``RSBNET_WORKERS`` override the output
directory and worker count when the flags are absent.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import dataio, experiment
from .dataio import DatasetBundle, ParseError
from .experiment import ConfigError, ExperimentConfig
from .model import RSBNet
from .synthetic import SyntheticConfig, generate
from .tensor import ContractError

log = logging.getLogger("rsbnet")


def _read_toml(path):
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return experiment.tomllib.load(fh)
    except (OSError, experiment.tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _out(args, default: str) -> Path:
    out, _ = experiment.env_overrides(args.out, None)
    return Path(out or default)


def cmd_generate(args) -> int:
    spec = dict(_read_toml(args.config).get("dataset", {}))
    spec.pop("kind", None)
    for key in ("d_a", "d_b", "d_c", "n_samples", "n_realizations", "seed"):
        value = getattr(args, key)
        if value is not None:
            spec[key] = value
    try:
        cfg = SyntheticConfig(**spec)
    except (TypeError, ContractError) as exc:
        raise ConfigError(str(exc)) from exc
    out = _out(args, "data/synthetic")
    paths = dataio.write_bundle(DatasetBundle(generate(cfg), name=args.name), out)
    print(json.dumps({"files": len(paths), "directory": str(out), "samples": cfg.n_samples, "covariates": cfg.dim}))
    return 0


def cmd_convert(args) -> int:
    out = _out(args, f"data/{args.name}")
    paths = dataio.convert_npz(args.inputs, out, name=args.name)
    print(json.dumps({"files": len(paths), "directory": str(out)}))
    return 0


def _params(args) -> dict:
    doc = _read_toml(args.config)
    params = dict(doc.get("params", {}))
    for key, value in (args.param or []):
        params[key] = json.loads(value)
    return params


def cmd_train(args) -> int:
    bundle = dataio.load(args.data, args.format)
    k = args.realization
    if not 1 <= k <= len(bundle):
        raise ConfigError(f"realization {k} outside 1..{len(bundle)}")
    params = _params(args)
    experiment.build_configs(params, bundle.feature_dim, 0)
    result, prep = experiment.fit_realization(bundle[k - 1], args.seed, k, params)
    out = _out(args, "runs/train")
    out.mkdir(parents=True, exist_ok=True)
    result.net.save(out / "checkpoint.json")
    (out / "history.jsonl").write_text(result.history_jsonl())
    meta = {"seed": args.seed, "realization": k, "params": params, "best_iteration": result.best_iteration,
            "best_valid_objective": result.best_valid, "iterations_done": result.iterations_done}
    (out / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(json.dumps({"checkpoint": str(out / "checkpoint.json"), "best_iteration": result.best_iteration}))
    return 0


def cmd_evaluate(args) -> int:
    run_dir = Path(args.checkpoint)
    meta = json.loads((run_dir / "run.json").read_text())
    net = RSBNet.load(run_dir / "checkpoint.json")
    bundle = dataio.load(args.data, args.format)
    k = meta["realization"]
    prep = experiment.prepare(bundle[k - 1], meta["seed"], k, meta["params"])
    ev = experiment.evaluate_realization(net, prep, k)
    doc = {
        "seed": meta["seed"],
        "realization": k,
        "selection_pehe_nn": ev["selection_pehe_nn"],
        "within_sample": ev["within_sample"].to_dict(),
        "out_of_sample": ev["out_of_sample"].to_dict(),
    }
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_sweep(args) -> int:
    if args.config is None:
        raise ConfigError("sweep needs --config")
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.realizations is not None:
        cfg.realizations = experiment.parse_range(args.realizations)
    out, workers = experiment.env_overrides(args.out, args.workers)
    summary = experiment.run_experiment(cfg, out_dir=out, workers=workers)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _read_records(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    return [json.loads(line) for line in lines if line.strip()]


def cmd_report(args) -> int:
    records = [_read_records(p) for p in args.inputs]
    doc = {"inputs": [str(p) for p in args.inputs], "aggregate": [experiment.aggregate_records(r) for r in records]}
    if len(records) == 2:
        names = tuple(args.names) if args.names else (str(args.inputs[0]), str(args.inputs[1]))
        doc["comparison"] = experiment.compare_records(records[0], records[1], names, args.alpha)
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--out", help="output directory (or file for evaluate/report)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="rsbnet", description="RSB-Net treatment-effect experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write synthetic realization files")
    for key in ("d_a", "d_b", "d_c", "n_samples", "n_realizations"):
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=int)
    p.add_argument("--name", default="synthetic")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("convert", parents=[common], help="convert IHDP-style .npz archives")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--name", default="ihdp")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("train", parents=[common], help="train on one realization")
    p.add_argument("--data", required=True)
    p.add_argument("--format", default="csv", choices=("csv", "npz"))
    p.add_argument("--realization", type=int, default=1)
    p.add_argument("--param", nargs=2, action="append", metavar=("KEY", "JSON"), help="override a hyperparameter")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a stored checkpoint")
    p.add_argument("--checkpoint", required=True, help="directory written by 'train'")
    p.add_argument("--data", required=True)
    p.add_argument("--format", default="csv", choices=("csv", "npz"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", parents=[common], help="run a full experiment")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--realizations", default=None, help="A..B, 1-based inclusive")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", parents=[common], help="aggregate realization records and compare two runs")
    p.add_argument("inputs", nargs="+", help="realizations.jsonl files (one or two)")
    p.add_argument("--names", nargs=2)
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.seed is None and args.command == "train":
        args.seed = 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractError, ParseError, FileNotFoundError, KeyError) as exc:
        print(f"rsbnet: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"rsbnet: runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
