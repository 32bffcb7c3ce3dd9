"""Command-line entry point: ``gridtopo <verb> ...``."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import harness
from .errors import ConfigError, GridTopoError
from .graphs import TopologyEstimate
from .grid import Feeder
from .simulate import MeasurementSet

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ESTIMATOR = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _add_common(p, seed_required=True):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seed", type=int, required=seed_required, help="master seed (required)")
    p.add_argument("--feeder", help="feeder JSON file (overrides the random feeder)")
    p.add_argument("--n-buses", type=int, help="random feeder size")
    p.add_argument("--T", type=int, dest="T", help="number of samples")
    p.add_argument("--noise-sd", type=float, help="measurement noise standard deviation")
    p.add_argument("--observed", help="'all', 'leaves' or a comma-separated bus list")
    p.add_argument("--param", action="append", default=[], metavar="KEY=VALUE", help="method hyperparameter")
    p.add_argument("--out", help="output directory")


def _config_from_args(args, method=None) -> harness.ExperimentConfig:
    data = {}
    if args.config:
        try:
            with open(args.config) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config!r}: {exc}") from exc
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    if method is not None:
        data["method"] = method
    data.setdefault("method", "ls")
    if args.feeder:
        try:
            data["feeder"] = Feeder.load(args.feeder).to_dict()
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read feeder {args.feeder!r}: {exc}") from exc
    if args.n_buses is not None:
        data.setdefault("random_feeder", {})["n_buses"] = args.n_buses
    if args.T is not None:
        data.setdefault("measurement", {})["T"] = args.T
    if args.noise_sd is not None:
        data.setdefault("measurement", {})["noise_sd"] = args.noise_sd
    if args.observed:
        obs = args.observed
        data["observed"] = obs if obs in ("all", "leaves") else [int(b) for b in obs.split(",")]
    params = dict(data.get("params", {}))
    for item in args.param:
        if "=" not in item:
            raise ConfigError(f"--param expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        params[k] = _parse_value(v)
    data["params"] = params
    return harness.ExperimentConfig.from_dict(data)


def _write(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def cmd_simulate(args) -> int:
    cfg = _config_from_args(args)
    rng = harness.trial_rng(cfg["seed"], 0)
    feeder = harness._feeder_for(cfg, rng)
    model = harness._model_for(cfg, feeder, rng)
    T = cfg["measurement"]["T"]
    noise = cfg["measurement"]["noise_sd"]
    data = harness.TrialData(feeder, model, T, noise, rng, harness.observed_buses(cfg, feeder))
    if args.kind == "phasor":
        U, I = data.phasors()
        ms = MeasurementSet("phasor", list(range(1, feeder.n_nodes)), U=U, I=I, noise_sd=noise)
    elif args.kind == "magnitude":
        ms = data.magnitudes()
    else:
        ms = data.probing(cfg["measurement"].get("magnitude", 0.05))
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    feeder.save(os.path.join(out, "feeder.json"))
    _write(os.path.join(out, "injections.json"), json.dumps(model.to_dict(), indent=1, default=harness._json_default))
    ms.to_csv(os.path.join(out, "measurements.csv"))
    print(json.dumps({"feeder": os.path.join(out, "feeder.json"), "measurements": os.path.join(out, "measurements.csv"), "T": ms.T}))
    return EXIT_OK


def _single(args, allowed) -> int:
    if args.method not in allowed:
        raise ConfigError(f"unknown method {args.method!r}; choose from {sorted(allowed)}")
    cfg = _config_from_args(args, args.method)
    T = cfg["measurement"]["T"]
    noise = cfg["measurement"]["noise_sd"]
    record = harness.run_trial(cfg, 0, T, noise, 0)
    text = json.dumps(record, indent=1, sort_keys=True, default=harness._json_default)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write(os.path.join(args.out, "result.json"), text)
    print(text)
    if record["status"] != "ok":
        print(f"estimator failed: {record['error']}", file=sys.stderr)
        return EXIT_ESTIMATOR
    return EXIT_OK


def cmd_identify(args) -> int:
    return _single(args, harness.IDENTIFY_METHODS)


def cmd_detect(args) -> int:
    return _single(args, harness.DETECT_METHODS)


def cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    over = {}
    if args.seeds is not None:
        over.setdefault("sweep", {})["seeds"] = args.seeds
    if args.T_grid:
        over.setdefault("sweep", {})["T"] = [int(v) for v in args.T_grid.split(",")]
    if args.noise_grid:
        over.setdefault("sweep", {})["noise_sd"] = [float(v) for v in args.noise_grid.split(",")]
    if over:
        cfg = cfg.override(**over)
    report = harness.run_experiment(cfg, out_dir=args.out, threads=args.threads)
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        truth = Feeder.load(args.truth)
        with open(args.estimate) as fh:
            est = json.load(fh)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read inputs: {exc}") from exc
    edges = est["edges"] if isinstance(est, dict) else est
    estimate = TopologyEstimate([tuple(e[:2]) for e in edges], "file")
    observed = None
    if args.observed:
        observed = list(truth.leaves) if args.observed == "leaves" else [int(b) for b in args.observed.split(",")]
    try:
        score = harness.score_topology(estimate, truth, args.mode, observed=observed)
    except GridTopoError as exc:
        print(f"scoring failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATOR
    print(json.dumps(score, indent=1, sort_keys=True, default=harness._json_default))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gridtopo", description="Distribution grid topology and line parameter estimation.")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="simulate a feeder and write measurements")
    _add_common(p)
    p.add_argument("--kind", choices=["phasor", "magnitude", "probing"], default="phasor")
    p.set_defaults(func=cmd_simulate)

    for verb, methods, func in (
        ("identify", harness.IDENTIFY_METHODS, cmd_identify),
        ("detect", harness.DETECT_METHODS, cmd_detect),
    ):
        p = sub.add_parser(verb, help=f"run one seeded {verb} trial")
        p.add_argument("method", help=", ".join(methods))
        _add_common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("sweep", help="run a seeded sweep and write report.json and sweep.csv")
    _add_common(p)
    p.add_argument("--seeds", type=int, help="number of seeds per grid cell")
    p.add_argument("--T-grid", dest="T_grid", help="comma-separated sample counts")
    p.add_argument("--noise-grid", help="comma-separated noise levels")
    p.add_argument("--threads", type=int, help="worker threads (default $GRIDTOPO_THREADS or 1)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("evaluate", help="score an estimate file against a feeder file")
    p.add_argument("--estimate", required=True, help="JSON with an 'edges' list")
    p.add_argument("--truth", required=True, help="feeder JSON file")
    p.add_argument("--mode", choices=["exact", "kron-collapsed"], default="exact")
    p.add_argument("--observed", help="observed buses for kron-collapsed mode ('leaves' or a list)")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GridTopoError, np.linalg.LinAlgError) as exc:
        print(f"estimator failure: {exc}", file=sys.stderr)
        return EXIT_ESTIMATOR


if __name__ == "__main__":
    sys.exit(main())
