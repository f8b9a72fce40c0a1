"""Train the residual / no-residual / mask variants and compare diagonal attention mass.

    python scripts/run_sink_experiment.py --out runs/sink --epochs 20 --seeds 0 1 2 3
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from diagsink.cli import main as cli_main
from diagsink.io import read_matrix_csv


def final(vdir: Path, column: str) -> float:
    rows = list(csv.DictReader((vdir / "diag_mass.csv").open()))
    last = max(int(r["epoch"]) for r in rows)
    return float(np.mean([float(r[column]) for r in rows if int(r["epoch"]) == last]))


def test_mae(vdir: Path) -> float:
    return float(np.mean([float(r["MAE_mean"]) for r in csv.DictReader((vdir / "metrics.csv").open())]))


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/sink")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    ap.add_argument("--variants", nargs="+", default=["no_residual", "no_reg", "mask"])
    args = ap.parse_args()
    out = Path(args.out)
    status = 0
    for v in args.variants:
        status |= cli_main(["train", "--variant", v, "--epochs", str(args.epochs), "--seeds", *map(str, args.seeds), "--out", str(out)])
    print(f"\n{'variant':<12} {'diag_ratio':>10} {'train_loss':>10} {'test_mae':>9} {'max_diag':>9}")
    for v in args.variants:
        vdir = out / v
        max_diag = max(np.diagonal(read_matrix_csv(f.read_text())).max() for f in vdir.glob("seed_*/attention/head*.csv"))
        print(f"{v:<12} {final(vdir, 'diag_ratio'):>10.4f} {final(vdir, 'train_loss'):>10.4f} {test_mae(vdir):>9.4f} {max_diag:>9.4f}")
    return status


if __name__ == "__main__":
    sys.exit(main())
