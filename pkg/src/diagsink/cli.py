"""Command-line entry point: ``diagsink {gradcheck,bounds-sweep,train,attn-export}``.

Exit codes: 0 success, 1 tolerance / bound / run failure or unreadable
checkpoint, 2 usage, config or dataset error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np

from . import config as C
from .bounds import bound_violations, diag_mass, reports_csv, sweep_T_detailed
from .checks import attention_jacobian_suite, model_gradient_suite, path_identity_suite, softmax_suite
from .data import CsvFormatError, SeriesDataset, gen_synthetic, ingest_csv, window_arrays
from .io import CheckpointError, code_hash, fmt, load_checkpoint, matrix_csv, pgm_p2, save_checkpoint, table_csv, write_atomic
from .rng import derive_seed
from .train import VARIANTS, ExperimentResult, evaluate, prepare_splits, run_experiment

log = logging.getLogger("diagsink")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _add_common(p: argparse.ArgumentParser, default_out: str) -> None:
    p.add_argument("--config", help="TOML config file (dotted keys or tables)")
    p.add_argument("--out", default=default_out, help=f"output directory (default {default_out})")
    p.add_argument("--seed", type=int, help="root seed (run.seed)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diagsink", description="Temporal-attention sensitivity toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="analytic vs finite-difference derivative suites")
    _add_common(g, "runs/gradcheck")
    g.add_argument("--tolerance", type=float, help="one tolerance for every suite")
    g.add_argument("--T", type=int, help="fix the sequence length of every attention configuration")
    g.add_argument("--configs", type=int, help="number of attention configurations")
    g.add_argument("--coords", type=int, help="number of model coordinates")

    b = sub.add_parser("bounds-sweep", help="expected-norm bounds over a sweep of sequence lengths")
    _add_common(b, "runs/bounds")
    b.add_argument("--T", type=int, nargs="+", help="sequence lengths, ascending")
    b.add_argument("--samples", type=int, help="random instances per length")

    t = sub.add_parser("train", help="train forecasting variants over several seeds")
    _add_common(t, "runs/train")
    t.add_argument("--variant", help=f"one of {', '.join(VARIANTS)} or 'all'")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seeds", type=int, nargs="+")
    t.add_argument("--csv", help="wide CSV dataset instead of the synthetic generator")

    e = sub.add_parser("attn-export", help="export per-head attention from a checkpoint")
    _add_common(e, "runs/export")
    e.add_argument("--checkpoint", help="checkpoint written by 'train'")
    e.add_argument("--split", choices=["train", "val", "test"])
    return parser


def resolve_config(args: argparse.Namespace) -> dict[str, Any]:
    overrides: dict[str, Any] = {}
    for item in args.set:
        k, v = C.parse_override(item)
        overrides[k] = v
    flag_map = {
        "seed": "run.seed",
        "tolerance": None,
        "T": "gradcheck.T" if args.command == "gradcheck" else "sweep.T_values",
        "configs": "gradcheck.configs",
        "coords": "gradcheck.model_coords",
        "samples": "sweep.samples",
        "variant": "train.variant",
        "epochs": "train.epochs",
        "seeds": "train.seeds",
        "checkpoint": "export.checkpoint",
        "split": "export.split",
    }
    for flag, key in flag_map.items():
        val = getattr(args, flag, None)
        if val is None:
            continue
        if flag == "tolerance":
            for k in ("gradcheck.attention_tol", "gradcheck.softmax_tol", "gradcheck.model_tol"):
                overrides[k] = val
        else:
            overrides[key] = val
    if getattr(args, "csv", None):
        overrides["data.source"] = "csv"
        overrides["data.csv"] = args.csv
    return C.load(args.config, overrides)


def write_snapshot(out: Path, cfg: dict[str, Any]) -> None:
    write_atomic(out / "config.toml", C.dumps(cfg))


def cmd_gradcheck(cfg: dict[str, Any], out: Path) -> int:
    root = cfg["run.seed"]
    n, T = cfg["gradcheck.configs"], cfg["gradcheck.T"] or None
    suites = [
        attention_jacobian_suite(root, n, cfg["gradcheck.attention_tol"], T),
        path_identity_suite(root, n, T),
        softmax_suite(root, n, cfg["gradcheck.softmax_tol"], T),
        model_gradient_suite(root, cfg["gradcheck.model_coords"], cfg["gradcheck.model_tol"]),
    ]
    rows = []
    for s in suites:
        print(s.line())
        if not s.passed:
            print(f"  worst: {s.worst}")
            for f in s.failures[:20]:
                print(f"  failing: {f}")
            if len(s.failures) > 20:
                print(f"  ... {len(s.failures) - 20} more")
        rows.append([s.name, s.max_rel_err, s.tolerance, s.passed, len(s.failures), s.worst])
    write_atomic(out / "gradcheck.csv", table_csv(["suite", "max_rel_err", "tolerance", "pass", "failures", "worst"], rows))
    return EXIT_OK if all(s.passed for s in suites) else EXIT_FAIL


def cmd_bounds_sweep(cfg: dict[str, Any], out: Path) -> int:
    sc = C.sweep_config(cfg)
    try:
        detailed = sweep_T_detailed(sc)
    except ValueError as e:
        raise UsageError(str(e)) from None
    aggs = [a for a, _ in detailed]
    write_atomic(out / "bounds.csv", reports_csv(aggs))
    write_atomic(out / "samples.csv", reports_csv([r for _, per in detailed for r in per]))
    write_atomic(out / "bound_vs_T.dat", "".join(f"{a.T} {fmt(a.offdiag_bound)}\n" for a in aggs))
    write_atomic(out / "measured_vs_T.dat", "".join(f"{a.T} {fmt(a.measured_offdiag_mean)}\n" for a in aggs))
    for a in aggs:
        print(
            f"T={a.T}: offdiag_bound={a.offdiag_bound:.6g} measured_offdiag={a.measured_offdiag_mean:.6g} "
            f"diag_bound={a.diag_bound:.6g} diag_bound_safe={a.diag_bound_safe:.6g} measured_diag={a.measured_diag:.6g} "
            f"violations={a.violations}"
        )
    if len(aggs) > 1:
        for a, b in zip(aggs, aggs[1:]):
            print(f"decay T={a.T}->{b.T}: bound ratio={b.offdiag_bound / a.offdiag_bound:.4f} measured ratio={b.measured_offdiag_mean / a.measured_offdiag_mean:.4f}")
    bad = [(a.T, s, r) for a, per in detailed for s, r in enumerate(per) if r.violations]
    for T, s, r in bad:
        print(f"violation: sweep_seed={sc.seed} T={T} sample={s} instance_seed={derive_seed(sc.seed, 'sweep', T, s)} checks={','.join(bound_violations(r))}")
    return EXIT_FAIL if bad else EXIT_OK


def load_dataset(cfg: dict[str, Any]) -> SeriesDataset:
    if cfg["data.source"] == "csv":
        if not cfg["data.csv"]:
            raise UsageError("data.source is 'csv' but data.csv is empty")
        try:
            ds = ingest_csv(cfg["data.csv"])
        except OSError as e:
            raise UsageError(f"cannot read dataset: {e}") from None
    elif cfg["data.source"] == "synthetic":
        ds = gen_synthetic(C.synthetic_config(cfg))
    else:
        raise UsageError(f"data.source must be 'synthetic' or 'csv', got {cfg['data.source']!r}")
    ds.time_of_day = cfg["data.time_of_day"]
    return ds


def _horizon_table(res: ExperimentResult) -> str:
    header = ["horizon"] + [f"{m}_{s}" for m in ("MAE", "RMSE", "MAPE") for s in ("mean", "std")]
    rows = []
    for h in res.horizons:
        rows.append([h] + [getattr(res, s)[m][h - 1] for m in ("MAE", "RMSE", "MAPE") for s in ("mean", "std")])
    return table_csv(header, rows)


def export_attention(att: np.ndarray, out: Path) -> list[tuple[float, float, float]]:
    stats = []
    for h, a in enumerate(att):
        write_atomic(out / f"head{h}.csv", matrix_csv(a))
        write_atomic(out / f"head{h}.pgm", pgm_p2(a))
        stats.append(diag_mass(a))
    rows = [[h, *s] for h, s in enumerate(stats)]
    write_atomic(out / "diag_mass.csv", table_csv(["head", "mean_diag", "mean_offdiag", "ratio"], rows))
    return stats


def cmd_train(cfg: dict[str, Any], out: Path) -> int:
    name = cfg["train.variant"]
    variants = list(VARIANTS) if name == "all" else [name]
    if any(v not in VARIANTS for v in variants):
        raise UsageError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)} or 'all'")
    try:
        tc = C.train_config(cfg)
    except ValueError as e:
        raise UsageError(str(e)) from None
    ds = load_dataset(cfg)
    mc = C.model_config(cfg, ds.n_nodes, ds.d_x)
    splits = prepare_splits(ds, mc.window, mc.horizon, cfg["data.stride"])
    labels = cfg["train.seeds"]
    status = EXIT_OK
    for variant in variants:
        t0 = time.perf_counter()
        try:
            res = run_experiment(variant, tc, ds, mc, splits)
        except ValueError as e:
            raise UsageError(str(e)) from None
        wall = time.perf_counter() - t0
        vdir = out / variant
        write_atomic(vdir / "metrics.csv", _horizon_table(res))
        curve_rows, seeds_meta, failed = [], [], []
        for label, s in zip(labels, res.seeds):
            sdir = vdir / f"seed_{label}"
            meta = {"config": cfg, "variant": variant, "seed_label": label}
            save_checkpoint(sdir / "final.ckpt", s.final_model, s.seed, meta)
            save_checkpoint(sdir / "best.ckpt", s.best_model, s.seed, {**meta, "best_epoch": s.best_epoch})
            if s.test:
                H = len(s.test["MAE"])
                write_atomic(
                    sdir / "metrics.csv",
                    table_csv(["horizon", "MAE", "RMSE", "MAPE"], [[h + 1, s.test["MAE"][h], s.test["RMSE"][h], s.test["MAPE"][h]] for h in range(H)]),
                )
            export_attention(s.attention, sdir / "attention")
            for row in s.history:
                curve_rows.append([label] + [row[k] for k in ("epoch", "train_loss", "val_mae", "mean_diag", "mean_offdiag", "diag_ratio")])
            seeds_meta.append({"seed": label, "derived_seed": s.seed, "failed": s.failed, "best_epoch": s.best_epoch})
            if s.failed:
                failed.append(label)
        write_atomic(
            vdir / "diag_mass.csv",
            table_csv(["seed", "epoch", "train_loss", "val_mae", "mean_diag", "mean_offdiag", "diag_ratio"], curve_rows),
        )
        manifest = {
            "variant": variant,
            "config": cfg,
            "seeds": seeds_meta,
            "failed_runs": failed,
            "code_hash": code_hash(),
            "wall_time_s": round(wall, 3) if cfg["run.record_wall_time"] else None,
        }
        write_atomic(vdir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        ok = res.ok
        summary = f"test_mae={res.test_mae():.6g} diag_ratio={res.diag_ratio():.6g}" if ok else "all seeds failed"
        print(f"{variant}: {summary} seeds={len(ok)}/{len(res.seeds)} failed={failed}")
        if not ok:
            status = EXIT_FAIL
    return status


def cmd_attn_export(cfg: dict[str, Any], out: Path) -> int:
    path = cfg["export.checkpoint"]
    if not path:
        raise UsageError("no checkpoint given (--checkpoint or export.checkpoint)")
    try:
        model, header = load_checkpoint(path)
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    saved = header.get("meta", {}).get("config")
    if not isinstance(saved, dict):
        print(f"error: {path}: checkpoint carries no dataset configuration", file=sys.stderr)
        return EXIT_FAIL
    data_cfg = C.merge(C.DEFAULTS, {k: v for k, v in saved.items() if k.startswith(("data.", "run."))})
    ds = load_dataset(data_cfg)
    if ds.n_nodes != model.cfg.n_nodes or ds.d_x != model.cfg.d_x:
        print(f"error: {path}: model does not match its recorded dataset", file=sys.stderr)
        return EXIT_FAIL
    x, _ = window_arrays(ds, model.cfg.window, model.cfg.horizon, data_cfg["data.stride"], cfg["export.split"])
    _, att = evaluate(model, x)
    for h, (d, off, r) in enumerate(export_attention(att, out)):
        print(f"head {h}: mean_diag={d:.6g} mean_offdiag={off:.6g} ratio={r:.6g}")
    return EXIT_OK


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "bounds-sweep": cmd_bounds_sweep,
    "train": cmd_train,
    "attn-export": cmd_attn_export,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(args.out)
        write_snapshot(out, cfg)
        return COMMANDS[args.command](cfg, out)
    except (C.ConfigError, UsageError, CsvFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
