#!/usr/bin/env python3
"""Run the default federated experiment and print the summary.

Equivalent to `dsfed run` with a round budget sized for a desk machine;
writes manifest.json, report.json, rounds.csv and ledger.csv to --out.
"""

import argparse
import sys

from dsfed.cli import main as cli_main


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="out/default")
    parser.add_argument("--rounds", type=int, default=10)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--jobs", type=int, default=1)
    args = parser.parse_args()
    return cli_main([
        "run",
        "--out", args.out,
        "--jobs", str(args.jobs),
        "--set", f"federation.n_rounds={args.rounds}",
        "--set", f"federation.seed={args.seed}",
    ])


if __name__ == "__main__":
    sys.exit(main())
