#!/usr/bin/env python3
"""
Command-line interface for data weighting experiments.
"""
import argparse
import logging
import sys
from typing import List, Optional

from .config import METHODS, TASKS, load_config
from .errors import DataWeighterError
from .harness import run_experiment


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    """Parse command-line arguments; unset flags stay None so config files win."""
    parser = argparse.ArgumentParser(
        description="Learn per-instance data weights for pre-training on a mixed-domain source set.",
    )
    parser.add_argument(
        '--config',
        help='Flat key=value config file'
    )

    # Method options
    method_group = parser.add_argument_group('Method Options')
    method_group.add_argument('--method', choices=METHODS, help='Weighting method (default: bdw)')
    method_group.add_argument('--task', choices=TASKS, help='Pre-training task (default: vae)')
    method_group.add_argument('--epochs', type=int, help='Number of epochs')
    method_group.add_argument('--alpha', type=float, help='Inner (model) learning rate')
    method_group.add_argument('--eta', type=float, help='Outer (weight) learning rate')
    method_group.add_argument('--batch-size', type=int, help='Source mini-batch size')
    method_group.add_argument('--seed', type=int, help='Seed for every random stream')

    # Pruning options
    prune_group = parser.add_argument_group('Pruning Options')
    prune_group.add_argument('--lambda', dest='lam', type=float, help='CDF threshold')
    prune_group.add_argument('--rho', type=float, help='Density threshold')
    prune_group.add_argument('--no-prune', action='store_true', help="Don't prune between epochs")

    # Input/output options
    io_group = parser.add_argument_group('Input/Output')
    io_group.add_argument('--data-dir', help='Directory holding one IDX folder per domain')
    io_group.add_argument('--out', dest='out_dir', help='Directory to write the report to')
    io_group.add_argument('--synthetic', action='store_true',
                          help='Use generated bars/discs/dots domains instead of IDX files')
    io_group.add_argument('--target-val', type=int,
                          help='Target training images held out to pick the best epoch (rotation task)')
    io_group.add_argument('--verbose', action='store_true', help='Log every batch')

    return parser.parse_args(argv)


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the CLI."""
    args = parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    overrides = {
        "method": args.method,
        "task": args.task,
        "epochs": args.epochs,
        "alpha": args.alpha,
        "eta": args.eta,
        "batch_size": args.batch_size,
        "seed": args.seed,
        "lam": args.lam,
        "rho": args.rho,
        "data_dir": args.data_dir,
        "out_dir": args.out_dir,
        "prune_enabled": False if args.no_prune else None,
        "synthetic": True if args.synthetic else None,
        "target_val": args.target_val,
    }
    try:
        cfg = load_config(args.config, overrides)
        report = run_experiment(cfg)
    except KeyboardInterrupt:
        print("\nOperation cancelled by user.")
        return 0
    except (DataWeighterError, OSError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1

    summary = report.summary
    print(f"{cfg.method} on {cfg.task}: final test loss {summary.get('final_test_loss')}, "
          f"{summary.get('final_active')} of {summary.get('source_size')} source images active")
    if summary.get("selected_epoch") is not None:
        print(f"selected epoch {summary['selected_epoch']}: test accuracy {summary.get('selected_test_accuracy')}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
