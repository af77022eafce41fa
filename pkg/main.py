#!/usr/bin/env python3
"""
Command-line entry point for the Markov LSA inference toolkit.
Runs assumption diagnostics, the Monte Carlo experiments and environment export.
"""

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from src.config import config
from src.exceptions import LsaToolkitError
from src.harness import (
    build_environment,
    diagnose,
    load_config,
    require_assumptions,
    run_coverage,
    run_kolmogorov,
    run_variance_decay,
)
from src.storage import storage

logger = logging.getLogger("lsa")

EXPERIMENTS = {
    "kolmogorov": run_kolmogorov,
    "coverage": run_coverage,
    "variance-decay": run_variance_decay,
}


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        description="Inference for Polyak-Ruppert averaged LSA with Markov noise"
    )
    commands = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("diagnose", "check the ergodicity, stability and noise assumptions"),
        ("kolmogorov", "Kolmogorov distance decay of the PR statistic"),
        ("coverage", "coverage of OBM bootstrap confidence intervals"),
        ("variance-decay", "accuracy of the OBM variance estimate"),
        ("gen-env", "write the generated environment as JSON"),
    ):
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--config", required=True, help="experiment TOML file")
        sub.add_argument("--out", default=None, help="output path (default under LSA_OUTPUT_DIR)")
        sub.add_argument("--seed", type=int, default=None, help="replaces experiment.base_seed")
        sub.add_argument("--threads", type=int, default=None, help="worker processes")
        sub.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                         help="dotted TOML key, e.g. experiment.replicates=100")
    return parser.parse_args(argv)


def run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.override, seed=args.seed, threads=args.threads)

    if args.command == "gen-env":
        mdp, policy, features = build_environment(cfg)
        storage.save_environment(storage.resolve(args.out, "env.json"), mdp, policy, features)
        return 0

    if args.command == "diagnose":
        report = diagnose(cfg)
        payload = report.model_dump(mode="json")
        if args.out is None:
            print(json.dumps(payload, indent=2))
        else:
            storage.save_json(args.out, payload)
        require_assumptions(report)
        return 0

    out_path = storage.resolve(args.out, f"{args.command}.csv")
    EXPERIMENTS[args.command](cfg, out_path)
    logger.info(f"Wrote {out_path}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=config.log_level(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config.validate_config()
    except ValueError as e:
        logger.error(f"Invalid environment settings: {e}")
        return 2

    args = parse_args(argv)
    try:
        return run(args)
    except LsaToolkitError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected failure: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
