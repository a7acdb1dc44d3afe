"""``tep <experiment> --config <path> [--seed N] [--out DIR]``.

Exit codes: 0 success, 1 configuration error, 2 some EP fit did not converge.
``TEP_THREADS`` caps the number of worker processes.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .experiments import EXPERIMENTS, RUNNERS, ConfigError, ExperimentConfig, dump_config, load_config, max_workers

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGENCE = 0, 1, 2


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if np.isfinite(f) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tep", description="Expectation propagation experiments for the t-exponential family.")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", required=True, help="TOML config file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="override the output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    d = cfg.to_dict()
    d["experiment"] = args.experiment
    if args.seed is not None:
        d["seed"] = args.seed
    if args.out is not None:
        d["output_dir"] = args.out
    return ExperimentConfig.from_dict(d)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        max_workers()  # validate TEP_THREADS early
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = RUNNERS[cfg.experiment](cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.toml")
    path = out / f"{cfg.experiment}.json"
    with open(path, "w") as fh:
        json.dump(_jsonable(report), fh, indent=2, sort_keys=True)
    print(_summary(report))
    print(f"report: {path}")
    return EXIT_OK if report.get("all_converged", True) else EXIT_NONCONVERGENCE


def _summary(report) -> str:
    exp = report["experiment"]
    if exp == "bpm-permutation":
        return f"ADF spread {report['spread_adf']:.4g} rad, EP spread {report['spread_ep']:.4g} rad"
    if exp == "stp-robustness":
        lines = [f"seed {r['seed']}: StP rotation {r['stp_rotation']:.4g} rad, GP rotation {r['gp_rotation']:.4g} rad"
                 for r in report["runs"]]
        lines.append(f"StP more robust in {report['stp_wins']}/{len(report['runs'])} seeds")
        return "\n".join(lines)
    return "\n".join(f"{k}: {v}" for k, v in report["checks"].items())


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
