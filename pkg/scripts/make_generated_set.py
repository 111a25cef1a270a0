#!/usr/bin/env python3
"""Fit every client's conditional generator and materialize the generated set.

Writes dtilde.bin (reusable via data.dtilde_path) and fidelity.csv, the
pairwise generated-vs-real Fréchet distance table.
"""

import argparse
import sys

from dsfed.cli import main as cli_main


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="out/generated")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    return cli_main([
        "gen-data",
        "--out", args.out,
        "--set", f"federation.seed={args.seed}",
    ])


if __name__ == "__main__":
    sys.exit(main())
