"""
Turnpike Lab
Configuration-driven Navier-Stokes optimal control and turnpike experiments

Usage:
    python app.py run --config configs/turnpike.cfg [--out runs] [--seed 0] [--threads 3]
    python app.py validate --config configs/turnpike.cfg
    python app.py plot-data --run runs/turnpike_<stamp> [--render]
"""

# ===== IMPORTS & LOGGING =====
import argparse
import logging
import sys
from typing import List, Optional

from core.errors import ConfigError
from core.experiments.loader import load_config, validate_config
from core.experiments.service import ExperimentRunner, plot_data
from src.config import get_runtime_config


def configure_logging() -> None:
    level = get_runtime_config().log_level
    logging.basicConfig(level=getattr(logging, level), format="%(asctime)s %(levelname)s %(name)s: %(message)s")


# ===== COMMANDS =====

def command_run(args: argparse.Namespace) -> int:
    """
    Load the config and run its experiment.

    Returns:
        int: 0 on success, 2 on a failed regime gate, 1 on any error
    """
    runtime = get_runtime_config()
    overrides = {"seed": args.seed, "threads": args.threads, "output_dir": args.out}
    try:
        config = load_config(args.config, overrides=overrides)
    except ConfigError as e:
        print(f"Invalid config: {e}")
        return 1
    runner = ExperimentRunner(
        config,
        output_root=args.out or config.output_dir or runtime.output_root,
        threads=args.threads or config.threads or runtime.threads,
    )
    code = runner.run()
    status = {0: "completed", 1: "failed", 2: "regime gate failed"}[code]
    print(f"{config.experiment}: {status} ({runner.output_dir})")
    return code


def command_validate(args: argparse.Namespace) -> int:
    diagnostics = validate_config(args.config)
    if not diagnostics:
        print(f"{args.config}: OK")
        return 0
    for item in diagnostics:
        print(f"[{item['level']}] {item['key']}: {item['message']}")
    return 1 if any(item["level"] == "error" for item in diagnostics) else 0


def command_plot_data(args: argparse.Namespace) -> int:
    try:
        written = plot_data(args.run, args.out, render=args.render)
    except FileNotFoundError as e:
        print(e)
        return 1
    for path in written:
        print(f"   {path}")
    print(f"{len(written)} file(s) written")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="turnpike-lab", description="Navier-Stokes turnpike experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the experiment named in a config")
    run.add_argument("--config", required=True)
    run.add_argument("--out", default=None, help="output root (overrides config and environment)")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--threads", type=int, default=None)
    run.set_defaults(func=command_run)

    validate = sub.add_parser("validate", help="check a config without running solvers")
    validate.add_argument("--config", required=True)
    validate.set_defaults(func=command_validate)

    plot = sub.add_parser("plot-data", help="re-emit CSV extracts of a run directory")
    plot.add_argument("--run", required=True)
    plot.add_argument("--out", default=None)
    plot.add_argument("--render", action="store_true", help="also write semilog PNGs")
    plot.set_defaults(func=command_plot_data)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging()
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
