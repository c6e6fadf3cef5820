"""Command-line entry point: ``qwrlab {run,sweep-bitflip,verify-theorems,summarize}``.

Exit codes: 0 success, 1 other failure, 2 configuration error, 3 divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .exceptions import ConfigError, TrainingDivergenceError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


def _load_config(path):
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError("config", f"no such file: {path}") from None
    except ValueError as exc:
        raise ConfigError("config", f"{path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be a JSON object")
    return data


def _cmd_run(args):
    from .experiment import ExperimentSpec, run_experiment

    data = _load_config(args.config)
    if args.algorithm:
        data["algorithm"] = args.algorithm
    if args.seed is not None:
        data["seeds"] = [args.seed]
    if args.offline:
        # an env given alongside an offline dataset is only used for evaluation
        if data.get("env") is not None and data.get("eval_env") is None:
            data["eval_env"] = data["env"]
        data["env"] = None
        data["dataset"] = args.offline
    spec = ExperimentSpec.from_dict(data)
    dirs = run_experiment(spec, args.out)
    for d in dirs:
        print(d)
    return EXIT_OK


def _cmd_sweep(args):
    from .experiment import BITFLIP_N, DEFAULT_SEEDS, bitflip_sweep_spec, run_bitflip_figure

    data = _load_config(args.config)
    for key in data:
        if key not in ("values", "seeds", "algorithms", "trainer"):
            raise ConfigError(key, "unknown sweep field")
    seeds = [args.seed] if args.seed is not None else data.get("seeds", list(DEFAULT_SEEDS))
    algorithms = [args.algorithm] if args.algorithm else data.get("algorithms", ["qwr", "awr"])
    sweep = bitflip_sweep_spec(seeds=seeds, values=data.get("values", BITFLIP_N),
                               algorithms=algorithms, trainer=data.get("trainer"))
    rows = run_bitflip_figure(sweep, args.out)
    for alg, n, seed, ret in rows:
        print(f"{alg}\tN={n}\tseed={seed}\t{ret:.3f}")
    return EXIT_OK


def _cmd_verify(args):
    from .theory import verify_theorems

    report = verify_theorems(seed=args.seed or 0)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "theorems.json").write_text(text + "\n")
    print(text)
    return EXIT_OK if report["passed"] else EXIT_FAIL


def _cmd_summarize(args):
    from .experiment import summarize, write_summary

    rows = summarize(args.runs, metric=args.metric)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        with open(Path(args.out) / "summary.csv", "w", newline="") as fh:
            write_summary(rows, fh)
    else:
        write_summary(rows, sys.stdout)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="qwrlab", description="QWR / AWR experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one experiment over its seeds")
    run.add_argument("--config", metavar="PATH")
    run.add_argument("--seed", type=int, metavar="N")
    run.add_argument("--out", metavar="DIR", default="runs")
    run.add_argument("--algorithm", choices=["qwr", "awr"])
    run.add_argument("--offline", metavar="DATASET.jsonl")
    run.set_defaults(func=_cmd_run)

    sweep = sub.add_parser("sweep-bitflip", help="QWR vs AWR across BitFlip sizes")
    sweep.add_argument("--config", metavar="PATH")
    sweep.add_argument("--seed", type=int, metavar="N")
    sweep.add_argument("--out", metavar="DIR", default="runs/bitflip")
    sweep.add_argument("--algorithm", choices=["qwr", "awr"])
    sweep.set_defaults(func=_cmd_sweep)

    verify = sub.add_parser("verify-theorems", help="tabular fixed-point checks, JSON report")
    verify.add_argument("--seed", type=int, metavar="N")
    verify.add_argument("--out", metavar="DIR")
    verify.set_defaults(func=_cmd_verify)

    summ = sub.add_parser("summarize", help="per-iteration median and IQR across runs")
    summ.add_argument("runs", nargs="+", metavar="RUN_DIR")
    summ.add_argument("--out", metavar="DIR")
    summ.add_argument("--metric", default="eval_return_mean")
    summ.set_defaults(func=_cmd_summarize)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
