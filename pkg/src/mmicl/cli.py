"""Command line entry point: ``mmicl run`` and ``mmicl check``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import experiments
from .checks import run_checks

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmicl", description="In-context regression experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment and write its results")
    run.add_argument("--config", type=Path, help="JSON config file")
    run.add_argument("--experiment", choices=experiments.EXPERIMENTS, help="override the config's experiment")
    run.add_argument("--seed", type=int, help="override the config's seed")
    run.add_argument("--out", type=Path, default=Path("."), help="output directory (default: .)")
    run.add_argument("--format", choices=("csv", "json"), default="csv")

    check = sub.add_parser("check", help="run the invariant suite")
    check.add_argument("--seed", type=int, default=0)

    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_config(path, experiment=None, seed=None) -> experiments.ExperimentConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise experiments.ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise experiments.ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise experiments.ConfigError("config must be a JSON object")
    if experiment is not None:
        raw["experiment"] = experiment
    if seed is not None:
        raw["seed"] = seed
    return experiments.ExperimentConfig.from_dict(raw)


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config, args.experiment, args.seed)
        experiments.n_workers()
    except experiments.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    start = time.perf_counter()
    result = experiments.run(cfg)
    out = args.out / f"{cfg.experiment}.{args.format}"
    meta = args.out / f"{cfg.experiment}.meta.json"
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        experiments.emit(result, out, args.format)
        meta.write_text(experiments._json(result.metadata) + "\n", encoding="utf-8")
    except OSError as exc:
        print(f"output error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    # wall time stays out of the files so reruns are byte-identical
    print(f"wrote {out} and {meta} in {time.perf_counter() - start:.1f} s", file=sys.stderr)
    return EXIT_OK


def cmd_check(args) -> int:
    failed = 0
    for name, ok, detail in run_checks(args.seed):
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        failed += not ok
    return EXIT_INVARIANT if failed else EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        return cmd_run(args)
    return cmd_check(args)


if __name__ == "__main__":
    sys.exit(main())
