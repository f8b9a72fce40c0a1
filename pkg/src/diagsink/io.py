"""File formats: matrix CSV, P2 heatmaps, checkpoints and atomic writes.

Checkpoint layout (all integers little-endian)::

    bytes 0..7    magic b"DSCKPT01"
    bytes 8..11   uint32 format version (currently 1)
    bytes 12..19  uint64 length L of the JSON header
    next L bytes  UTF-8 JSON header: version, model config, regularizer,
                  output scaling, seed, free-form metadata, and a tensor table
                  [{"name", "shape", "offset", "count"}] with offsets in units
                  of float64 values into the data block
    rest          float64 data block, little-endian ("<f8"), C order
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .attention import Regularizer
from .model import ModelConfig, TnSModel

MAGIC = b"DSCKPT01"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_atomic(path: str | Path, data: str | bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def table_csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    return buf.getvalue()


def matrix_csv(m: np.ndarray) -> str:
    """Headerless CSV, one matrix row per line, 17 significant digits."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in np.asarray(m, dtype=np.float64):
        w.writerow([format(float(v), ".17g") for v in row])
    return buf.getvalue()


def read_matrix_csv(text: str) -> np.ndarray:
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    return np.array([[float(v) for v in r] for r in rows], dtype=np.float64)


def pgm_p2(alpha: np.ndarray) -> str:
    """Grayscale P2 heatmap: row i = query step, column j = key step.

    Weights in [0, max] map linearly onto [255, 0], so zero is white and the
    largest weight is black.
    """
    a = np.asarray(alpha, dtype=np.float64)
    top = a.max()
    scaled = np.zeros_like(a) if top <= 0 else a / top
    pix = np.rint(255.0 * (1.0 - np.clip(scaled, 0.0, 1.0))).astype(int)
    lines = ["P2", f"{a.shape[1]} {a.shape[0]}", "255"]
    lines += [" ".join(str(v) for v in row) for row in pix]
    return "\n".join(lines) + "\n"


def read_pgm_p2(text: str) -> np.ndarray:
    tokens = text.split()
    if tokens[0] != "P2":
        raise ValueError("not a P2 file")
    w, h = int(tokens[1]), int(tokens[2])
    return np.array([int(t) for t in tokens[4 : 4 + w * h]]).reshape(h, w)


def save_checkpoint(path: str | Path, model: TnSModel, seed: int, meta: dict | None = None) -> None:
    table, blobs, offset = [], [], 0
    for name, arr in model.params.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        table.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        blobs.append(a.tobytes())
        offset += a.size
    header = {
        "version": CKPT_VERSION,
        "model": asdict(model.cfg),
        "reg": asdict(model.reg),
        "out_scale": model.out_scale,
        "out_shift": model.out_shift,
        "seed": seed,
        "meta": meta or {},
        "tensors": table,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    write_atomic(path, MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hb)) + hb + b"".join(blobs))


def load_checkpoint(path: str | Path) -> tuple[TnSModel, dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    if len(raw) < 20 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[20 : 20 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from None
    data = raw[20 + hlen :]
    n_vals = len(data) // 8
    if len(data) % 8:
        raise CheckpointError(f"{path}: truncated data block")
    values = np.frombuffer(data, dtype="<f8")
    params = {}
    for t in header["tensors"]:
        end = t["offset"] + t["count"]
        if end > n_vals:
            raise CheckpointError(f"{path}: tensor {t['name']} runs past the end of the file")
        params[t["name"]] = values[t["offset"] : end].astype(np.float64).reshape(t["shape"])
    try:
        cfg = ModelConfig(**header["model"])
        model = TnSModel(cfg, params, Regularizer(**header["reg"]), header["out_scale"], header["out_shift"])
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: inconsistent checkpoint ({e})") from None
    return model, header


def code_hash() -> str:
    """sha256 over the package sources, in sorted file order."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for f in sorted(root.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()
