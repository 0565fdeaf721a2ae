"""Command-line entry point: load a config, seed, run, log, checkpoint, report."""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import build_experiment, parse_config
from .engine import run_experiment, run_test_only
from .errors import ConfigSyntaxError, KDKitError, ValidationError
from .logs import LogWriter


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="kdkit",
        description="Run a knowledge-distillation experiment from a config file.",
    )
    p.add_argument("--config", required=True, help="path to the experiment config")
    p.add_argument("--log", default=None,
                   help="log file path (default: <config name>.log in the working directory)")
    p.add_argument("--seed", type=int, default=42, help="root random seed (default 42)")
    p.add_argument("--device", default=None,
                   help="compute device (default: KDKIT_DEVICE env var, else cpu)")
    p.add_argument("--test-only", action="store_true",
                   help="skip training; evaluate the student checkpoint on the test split")
    p.add_argument("--resume", default=None, metavar="CKPT",
                   help="initialize the student from this checkpoint before training")
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    device = args.device or os.environ.get("KDKIT_DEVICE") or "cpu"
    log_path = args.log or os.path.splitext(os.path.basename(args.config))[0] + ".log"

    try:
        with open(args.config, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 2
    try:
        config = build_experiment(parse_config(text))
    except ValidationError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except (ConfigSyntaxError, KDKitError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.test_only:
            metrics = run_test_only(config, seed=args.seed, device=device)
            print(json.dumps(metrics, indent=2))
            return 0
        with LogWriter(log_path, console=True) as log:
            report = run_experiment(config, seed=args.seed, device=device, log=log,
                                    resume_ckpt=args.resume)
        with open(log_path + ".report.json", "w", encoding="utf-8") as f:
            json.dump(report.summary_tree(), f, indent=2)
        return 0
    except Exception as exc:  # runtime failure after a valid config
        print(f"run failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
