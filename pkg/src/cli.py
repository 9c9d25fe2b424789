"""
Command-line surface.

Subcommands:
    run      federated or centralized experiment from a config file
    sweep    cartesian parameter sweep from a sweep-mode config file
    synth    write the synthetic fixture (CSV + schema)
    explain  Shapley export for a saved checkpoint

Exit status: 0 success, 2 invalid config, 3 dataset or file error, 1 any
other failure.
"""

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from loguru import logger
from pydantic import ValidationError

from .config import LOG_LEVEL, format_validation_error, load_experiment_config
from .dataio import DatasetError
from .experiment import explain_checkpoint, run_experiment, run_sweep
from .synthetic import AnomalyRule, generate_synthetic

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INVALID_CONFIG = 2
EXIT_DATASET_ERROR = 3


def configure_logging(level: str = LOG_LEVEL) -> None:
    logger.remove()
    logger.add(sys.stderr, level=level.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedids",
        description="Federated intrusion-detection experiments with Shapley explanations",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
    # Write the synthetic fixture next to the example configs
    fedids synth --out configs/data --n-samples 1000 --n-features 5 --seed 0

    # Federated run, overriding the config's seed and output directory
    fedids run --config configs/synthetic_federated.json --seed 3 --out runs

    # Same data, centralized baseline
    fedids run --config configs/synthetic_federated.json --mode centralized

    # Local-epochs sweep
    fedids sweep --config configs/synthetic_sweep_epochs.json

    # Explain a saved model
    fedids explain --config configs/synthetic_federated.json --checkpoint runs/<run_id>/model.npz
        """,
    )
    parser.add_argument("--log-level", type=str, default=LOG_LEVEL, help=f"Log level (default: {LOG_LEVEL})")
    sub = parser.add_subparsers(dest="command", required=True)

    def _experiment_flags(p: argparse.ArgumentParser, with_mode: bool) -> None:
        p.add_argument("--config", type=str, required=True, help="Experiment config (JSON)")
        p.add_argument("--out", type=str, default=None, help="Output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, default=None, help="Seed (overrides seed)")
        if with_mode:
            p.add_argument(
                "--mode",
                type=str,
                choices=["federated", "centralized"],
                default=None,
                help="Training mode (overrides mode)",
            )

    _experiment_flags(sub.add_parser("run", help="Run one experiment"), with_mode=True)
    _experiment_flags(sub.add_parser("sweep", help="Run a parameter sweep"), with_mode=False)

    explain = sub.add_parser("explain", help="Explain a saved checkpoint")
    _experiment_flags(explain, with_mode=False)
    explain.add_argument("--checkpoint", type=str, required=True, help="model.npz written by a run")

    synth = sub.add_parser("synth", help="Write the synthetic dataset and schema")
    synth.add_argument("--out", type=str, required=True, help="Destination directory")
    synth.add_argument("--n-samples", type=int, default=1000, help="Data rows, >= 10 (default: 1000)")
    synth.add_argument("--n-features", type=int, default=5, help="Feature columns, >= 2 (default: 5)")
    synth.add_argument("--seed", type=int, default=0, help="Generator seed (default: 0)")
    synth.add_argument("--threshold", type=float, default=0.0, help="Attack iff f0 > threshold (default: 0)")
    synth.add_argument("--noise", type=float, default=0.05, help="Label flip probability (default: 0.05)")
    synth.add_argument("--name", type=str, default="synthetic", help="File stem (default: synthetic)")
    return parser


def _load(args: argparse.Namespace, mode: Optional[str] = None):
    overrides = {"output_dir": args.out, "seed": args.seed, "mode": mode}
    config = load_experiment_config(args.config, overrides)
    return config, Path(args.config).resolve().parent


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "synth":
        csv_path, schema_path = generate_synthetic(
            args.n_samples,
            args.n_features,
            args.seed,
            args.out,
            rule=AnomalyRule(threshold=args.threshold, noise=args.noise),
            name=args.name,
        )
        print(csv_path)
        print(schema_path)
        return EXIT_OK

    if args.command == "run":
        config, base_dir = _load(args, args.mode)
        if config.mode == "sweep":
            result = run_sweep(config, base_dir)
        else:
            result = run_experiment(config, base_dir)
        print(result.run_dir)
        return EXIT_OK

    if args.command == "sweep":
        config, base_dir = _load(args)
        if config.mode != "sweep":
            logger.error(f"{args.config}: mode is '{config.mode}', the sweep command needs mode 'sweep'")
            return EXIT_INVALID_CONFIG
        result = run_sweep(config, base_dir)
        print(result.run_dir)
        return EXIT_OK

    config, base_dir = _load(args)
    result = explain_checkpoint(args.checkpoint, config, base_dir)
    print(result.run_dir)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)

    try:
        return _dispatch(args)
    except ValidationError as exc:
        lines = format_validation_error(exc)
        logger.error(f"Invalid config {getattr(args, 'config', '')} ({len(lines)} error(s)):\n" + "\n".join(lines))
        return EXIT_INVALID_CONFIG
    except (DatasetError, FileNotFoundError) as exc:
        logger.error(f"Dataset error: {exc}")
        return EXIT_DATASET_ERROR
    except Exception as exc:
        logger.exception(f"Command '{args.command}' failed: {exc}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
