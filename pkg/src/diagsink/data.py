"""Spatio-temporal series: synthetic generator, wide-CSV I/O and windowing."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .rng import numpy_rng

log = logging.getLogger(__name__)

STEPS_PER_DAY = 288


class CsvFormatError(ValueError):
    pass


@dataclass
class SyntheticConfig:
    n_nodes: int = 20
    length: int = 2016
    seed: int = 0
    graph_density: float = 0.2
    noise_std: float = 0.1
    diffusion: float = 0.5


@dataclass
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean


@dataclass
class SeriesDataset:
    """Values of shape (N, L, d_x) with chronological train/val/test ranges.

    Split ranges are half-open ``(start, stop)`` time indices. Windows are cut
    inside a single split, so no sample straddles a split boundary.
    """

    values: np.ndarray
    timestamps: list[str] | None = None
    splits: dict[str, tuple[int, int]] = field(default_factory=dict)
    scaler: Scaler | None = None
    missing_zero: bool = False
    time_of_day: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 2:
            self.values = self.values[:, :, None]
        if not self.splits:
            self.splits = chrono_splits(self.length)
        if self.scaler is None:
            self.scaler = fit_scaler(self.values, self.splits["train"], self.missing_zero)

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    @property
    def d_x(self) -> int:
        return self.values.shape[2] + (1 if self.time_of_day else 0)

    def inputs(self) -> np.ndarray:
        """Normalized model inputs, with the time-of-day channel appended if enabled."""
        z = self.scaler.normalize(self.values)
        if self.time_of_day:
            tod = (np.arange(self.length) % STEPS_PER_DAY) / STEPS_PER_DAY
            z = np.concatenate([z, np.broadcast_to(tod[None, :, None], (self.n_nodes, self.length, 1))], axis=2)
        return z


def chrono_splits(length: int, fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)) -> dict[str, tuple[int, int]]:
    a = int(round(length * fractions[0]))
    b = a + int(round(length * fractions[1]))
    return {"train": (0, a), "val": (a, b), "test": (b, length)}


def fit_scaler(values: np.ndarray, train: tuple[int, int], missing_zero: bool = False) -> Scaler:
    part = values[:, train[0] : train[1], :]
    if missing_zero:
        part = np.where(part == 0.0, np.nan, part)
    mean = np.nanmean(part, axis=(0, 1))
    std = np.nanstd(part, axis=(0, 1))
    std = np.where(std > 0, std, 1.0)
    return Scaler(mean, std)


def gen_synthetic(cfg: SyntheticConfig) -> SeriesDataset:
    """Daily sinusoids mixed over a random graph plus Gaussian noise.

    Each node has its own level, amplitude and phase. With adjacency ``A``
    (row-normalized, random edges with the given density, no self loops) the
    signal is ``s + diffusion * A s + noise``. A single node has no diffusion
    term.
    """
    if cfg.n_nodes < 1:
        raise ValueError("need at least one node")
    if cfg.length < 2:
        raise ValueError(f"series length {cfg.length} too short")
    rng = numpy_rng(cfg.seed, "synthetic")
    N, L = cfg.n_nodes, cfg.length
    level = rng.uniform(40.0, 70.0, size=N)
    amp = rng.uniform(5.0, 15.0, size=N)
    phase = rng.uniform(0.0, 2 * np.pi, size=N)
    t = np.arange(L)
    base = level[:, None] + amp[:, None] * np.sin(2 * np.pi * t[None, :] / STEPS_PER_DAY + phase[:, None])
    adj = (rng.uniform(size=(N, N)) < cfg.graph_density).astype(np.float64)
    np.fill_diagonal(adj, 0.0)
    deg = adj.sum(axis=1, keepdims=True)
    adj = np.divide(adj, deg, out=np.zeros_like(adj), where=deg > 0)
    signal = base + cfg.diffusion * (adj @ base)
    noise = rng.normal(0.0, 1.0, size=(N, L)) * cfg.noise_std
    values = signal + noise
    return SeriesDataset(values[:, :, None], timestamps=[str(k) for k in range(L)])


def export_csv(ds: SeriesDataset) -> str:
    """Wide CSV: header ``timestamp,node_0,...``, one row per time step, 17 significant digits."""
    if ds.values.shape[2] != 1:
        raise ValueError("wide CSV holds a single feature per sensor")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["timestamp"] + [f"node_{n}" for n in range(ds.n_nodes)])
    stamps = ds.timestamps or [str(k) for k in range(ds.length)]
    for k in range(ds.length):
        w.writerow([stamps[k]] + [format(v, ".17g") for v in ds.values[:, k, 0]])
    return buf.getvalue()


def ingest_csv(path: str | Path, missing_zero: bool = True) -> SeriesDataset:
    """Read a wide CSV (header row, then timestamp + one column per sensor)."""
    text = Path(path).read_text()
    rows = list(csv.reader(io.StringIO(text)))
    rows = [r for r in rows if r]
    if len(rows) < 2:
        raise CsvFormatError(f"{path}: empty file (need a header and at least one data row)")
    header = rows[0]
    n = len(header) - 1
    if n < 1:
        raise CsvFormatError(f"{path}: line 1: header needs a timestamp column and at least one sensor")
    stamps, data = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != n + 1:
            raise CsvFormatError(f"{path}: line {lineno}: expected {n + 1} cells, found {len(row)}")
        vals = []
        for col, cell in enumerate(row[1:], start=2):
            try:
                v = float(cell)
            except ValueError:
                raise CsvFormatError(f"{path}: line {lineno}, column {col}: non-numeric cell {cell!r}") from None
            if not math.isfinite(v):
                raise CsvFormatError(f"{path}: line {lineno}, column {col}: non-finite value {cell!r}")
            vals.append(v)
        stamps.append(row[0])
        data.append(vals)
    values = np.asarray(data, dtype=np.float64).T[:, :, None]
    return SeriesDataset(values, timestamps=stamps, missing_zero=missing_zero)


def window_count(length: int, w_in: int, h_out: int, stride: int = 1) -> int:
    span = w_in + h_out
    if length < span:
        return 0
    return (length - span) // stride + 1


def window(
    ds: SeriesDataset, w_in: int, h_out: int, stride: int = 1, split: str | None = None
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (input [N, w_in, d_x] normalized, target [N, h_out] raw units)."""
    if w_in < 1 or h_out < 1 or stride < 1:
        raise ValueError("window, horizon and stride must all be >= 1")
    lo, hi = ds.splits[split] if split else (0, ds.length)
    count = window_count(hi - lo, w_in, h_out, stride)
    if count == 0:
        log.warning("split %s has %d steps, shorter than window + horizon = %d", split, hi - lo, w_in + h_out)
        return
    z = ds.inputs()
    raw = ds.values[:, :, 0]
    for k in range(count):
        s = lo + k * stride
        yield z[:, s : s + w_in, :], raw[:, s + w_in : s + w_in + h_out]


def window_arrays(
    ds: SeriesDataset, w_in: int, h_out: int, stride: int = 1, split: str | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked windows: inputs (S, N, w_in, d_x) and targets (S, N, h_out)."""
    pairs = list(window(ds, w_in, h_out, stride, split))
    if not pairs:
        return np.zeros((0, ds.n_nodes, w_in, ds.d_x)), np.zeros((0, ds.n_nodes, h_out))
    xs, ys = zip(*pairs)
    return np.stack(xs), np.stack(ys)


def target_mask(targets: np.ndarray, missing_zero: bool) -> np.ndarray:
    if missing_zero:
        return (targets != 0.0).astype(np.float64)
    return np.ones_like(targets)
