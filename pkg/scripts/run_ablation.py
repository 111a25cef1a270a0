#!/usr/bin/env python3
"""Run the {mutual KD} x {learnability-guided selection} ablation grid.

Writes ablation.csv with one row per grid cell: per-seed held-out Dice,
seed means, and distillation sample-evaluation counts.
"""

import argparse
import sys

from dsfed.cli import main as cli_main


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="out/ablation")
    parser.add_argument("--rounds", type=int, default=10)
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0, help="first seed of the range")
    parser.add_argument("--jobs", type=int, default=1)
    args = parser.parse_args()
    return cli_main([
        "ablate",
        "--out", args.out,
        "--seeds", str(args.seeds),
        "--jobs", str(args.jobs),
        "--set", f"federation.n_rounds={args.rounds}",
        "--set", f"federation.seed={args.seed}",
    ])


if __name__ == "__main__":
    sys.exit(main())
