"""Sequence-length sweep of the expected-norm bounds.

Runs ``diagsink bounds-sweep`` and prints a compact table of how the
off-diagonal bound and the measured sensitivities scale with T.

    python scripts/run_bounds_sweep.py --out runs/bounds --samples 100
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from diagsink.cli import main as cli_main


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/bounds")
    ap.add_argument("--samples", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--T", type=int, nargs="+", default=[2, 4, 8, 16, 32, 64])
    args = ap.parse_args()
    argv = ["bounds-sweep", "--out", args.out, "--samples", str(args.samples), "--seed", str(args.seed), "--T", *map(str, args.T)]
    code = cli_main(argv)
    rows = list(csv.DictReader((Path(args.out) / "bounds.csv").open()))
    print(f"\n{'T':>4} {'T*bound':>10} {'T*measured':>11} {'diag':>8} {'diag_bound':>10} {'diag_safe':>10}")
    for r in rows:
        T = int(r["T"])
        print(
            f"{T:>4} {T * float(r['offdiag_bound']):>10.4f} {T * float(r['measured_offdiag_mean']):>11.4f} "
            f"{float(r['measured_diag']):>8.4f} {float(r['diag_bound']):>10.4f} {float(r['diag_bound_safe']):>10.4f}"
        )
    return code


if __name__ == "__main__":
    sys.exit(main())
