"""Regenerate the small golden files in tests/fixtures.

    python scripts/make_fixtures.py [--check]

With --check nothing is written; the exit status is 1 if any file differs.
"""

from __future__ import annotations

import argparse
import sys
import tempfile
from pathlib import Path

import numpy as np

from diagsink import config as C
from diagsink.attention import AttnWeights, Regularizer, attn_forward
from diagsink.data import SyntheticConfig, export_csv, gen_synthetic
from diagsink.io import matrix_csv, pgm_p2, save_checkpoint
from diagsink.model import ModelConfig, TnSModel

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


def build() -> dict[str, bytes]:
    files: dict[str, bytes] = {}
    files["dataset.csv"] = export_csv(gen_synthetic(SyntheticConfig(n_nodes=3, length=24, seed=1))).encode()
    rng = np.random.default_rng(2)
    w = AttnWeights.init(4, 4, 4, rng)
    X = rng.uniform(-1, 1, (6, 4))
    files["attention_none.csv"] = matrix_csv(attn_forward(X, w).Alpha).encode()
    masked = attn_forward(X, w, Regularizer.mask()).Alpha
    files["attention_mask.csv"] = matrix_csv(masked).encode()
    files["attention_mask.pgm"] = pgm_p2(masked).encode()
    files["config.toml"] = C.dumps(C.load()).encode()
    model = TnSModel.init(ModelConfig(n_nodes=2, window=3, horizon=2, d_model=8, n_heads=8, d_k=2, d_v=2, d_emb=2), np.random.default_rng(3))
    with tempfile.TemporaryDirectory() as tmp:
        save_checkpoint(Path(tmp) / "m.ckpt", model, seed=3, meta={"fixture": True})
        files["model.ckpt"] = (Path(tmp) / "m.ckpt").read_bytes()
    return files


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--check", action="store_true")
    args = ap.parse_args()
    stale = []
    for name, data in build().items():
        path = FIXTURES / name
        if args.check:
            if not path.exists() or path.read_bytes() != data:
                stale.append(name)
        else:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(data)
    for name in stale:
        print(f"stale fixture: {name}")
    return 1 if stale else 0


if __name__ == "__main__":
    sys.exit(main())
