#!/usr/bin/env python3
"""Run the selection-rate and lambda sensitivity sweeps.

Writes sweep.csv per parameter under --out/<param>/.
"""

import argparse
import os
import sys

from dsfed.cli import main as cli_main

SWEEPS = {
    "selection_rate": "0.2,0.5,0.8,1.0",
    "lambda": "0.1,0.3,0.5,0.7,0.9",
}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="out/sweeps")
    parser.add_argument("--rounds", type=int, default=10)
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0, help="first seed of the range")
    parser.add_argument("--jobs", type=int, default=1)
    args = parser.parse_args()
    for param, values in SWEEPS.items():
        code = cli_main([
            "sweep",
            "--param", param,
            "--values", values,
            "--seeds", str(args.seeds),
            "--out", os.path.join(args.out, param),
            "--jobs", str(args.jobs),
            "--set", f"federation.n_rounds={args.rounds}",
            "--set", f"federation.seed={args.seed}",
        ])
        if code != 0:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
