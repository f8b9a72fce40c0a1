"""AdamW training with warm-up + cosine decay, masked metrics, multi-seed runs."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import NO_REG, Regularizer
from .bounds import diag_mass
from .data import SeriesDataset, target_mask, window_arrays
from .model import GradientSet, ModelConfig, TnSModel, backward_from_pred, masked_mae, model_forward
from .rng import derive_seed, numpy_rng

log = logging.getLogger(__name__)

VARIANTS = ("no_residual", "no_reg", "mask", "dropout", "penalty")
MAPE_FLOOR = 1e-8


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    epochs: int = 150
    warmup_epochs: int = 5
    batch_size: int = 16
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3])
    horizons_report: list[int] = field(default_factory=lambda: [3, 6, 12])
    penalty: float = -0.1
    dropout_p: float = 0.2
    eval_batch: int = 64

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("epochs and warmup_epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def variant_setup(variant: str, cfg: TrainConfig) -> tuple[bool, Regularizer]:
    """(residual, regularizer) for one of the five compared variants."""
    if variant == "no_residual":
        return False, NO_REG
    if variant == "no_reg":
        return True, NO_REG
    if variant == "mask":
        return True, Regularizer.mask()
    if variant == "dropout":
        return True, Regularizer.dropout(cfg.dropout_p)
    if variant == "penalty":
        return True, Regularizer.penalty(cfg.penalty)
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def lr_schedule(step: int, total_steps: int, warmup_steps: int, lr0: float) -> float:
    """Linear warm-up from 0 to lr0, then half-cosine decay to 0 at total_steps."""
    if step < warmup_steps:
        return lr0 * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return lr0
    progress = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(
    params: dict[str, np.ndarray],
    grads: GradientSet,
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """In-place AdamW update with decoupled weight decay and bias correction."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p *= 1.0 - lr * weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def metrics(pred, target, mask=None) -> dict[str, np.ndarray]:
    """Per-horizon-step MAE, RMSE and MAPE (percent) over masked entries.

    Inputs are (S, N, H). MAPE additionally skips |target| < 1e-8. A horizon
    step with nothing left to average reports NaN.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    mask = np.ones_like(target) if mask is None else np.asarray(mask, dtype=np.float64)
    axes = tuple(range(pred.ndim - 1))
    err = pred - target
    n = mask.sum(axis=axes)
    pm = mask * (np.abs(target) >= MAPE_FLOOR)
    npct = pm.sum(axis=axes)
    if (n == 0).any() or (npct == 0).any():
        log.warning("empty mask at some horizon step; reporting NaN there")
    with np.errstate(invalid="ignore", divide="ignore"):
        mae = np.sum(mask * np.abs(err), axis=axes) / n
        rmse = np.sqrt(np.sum(mask * err * err, axis=axes) / n)
        ratio = np.divide(np.abs(err), np.abs(target), out=np.zeros_like(err), where=pm > 0)
        mape = 100.0 * np.sum(ratio, axis=axes) / npct
    return {"MAE": mae, "RMSE": rmse, "MAPE": mape}


@dataclass
class SeedResult:
    seed: int
    failed: bool
    test: dict[str, np.ndarray]
    history: list[dict[str, float]]
    attention: np.ndarray
    best_epoch: int
    final_model: TnSModel
    best_model: TnSModel

    @property
    def final_diag_ratio(self) -> float:
        return diag_mass(self.attention)[2]


@dataclass
class ExperimentResult:
    variant: str
    horizons: list[int]
    seeds: list[SeedResult]
    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]

    @property
    def ok(self) -> list[SeedResult]:
        return [s for s in self.seeds if not s.failed]

    def test_mae(self) -> float:
        """Mean over surviving seeds and every horizon step of the test MAE."""
        return float(np.mean([np.mean(s.test["MAE"]) for s in self.ok]))

    def diag_ratio(self) -> float:
        return float(np.mean([s.final_diag_ratio for s in self.ok]))


@dataclass
class Splits:
    x: dict[str, np.ndarray]
    y: dict[str, np.ndarray]
    mask: dict[str, np.ndarray]


def prepare_splits(ds: SeriesDataset, window: int, horizon: int, stride: int = 1) -> Splits:
    x, y, mask = {}, {}, {}
    for name in ("train", "val", "test"):
        x[name], y[name] = window_arrays(ds, window, horizon, stride, name)
        mask[name] = target_mask(y[name], ds.missing_zero)
    return Splits(x, y, mask)


def evaluate(model: TnSModel, x: np.ndarray, batch: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Predictions for all samples and the attention averaged over samples and nodes."""
    c = model.cfg
    preds = []
    att = np.zeros((c.n_heads, c.window, c.window))
    for s in range(0, len(x), batch):
        pred, cache = model_forward(x[s : s + batch], model)
        preds.append(pred)
        att += cache.attention().sum(axis=(0, 1))
    n = max(len(x), 1) * c.n_nodes
    if not preds:
        return np.zeros((0, c.n_nodes, c.horizon)), att
    return np.concatenate(preds), att / n


def train_seed(
    variant: str, cfg: TrainConfig, model_cfg: ModelConfig, splits: Splits, seed: int, out_scale: float, out_shift: float
) -> SeedResult:
    residual, reg = variant_setup(variant, cfg)
    mcfg = replace(model_cfg, residual=residual)
    model = TnSModel.init(mcfg, numpy_rng(seed, "init"), reg)
    model.out_scale, model.out_shift = out_scale, out_shift
    xt, yt, mt = splits.x["train"], splits.y["train"], splits.mask["train"]
    n_batches = math.ceil(len(xt) / cfg.batch_size) if len(xt) else 0
    total = cfg.epochs * n_batches
    warm_epochs = min(cfg.warmup_epochs, max(cfg.epochs - 1, 0))
    warm = warm_epochs * n_batches
    state = AdamState.zeros_like(model.params)
    history: list[dict[str, float]] = []
    best, best_mae, best_epoch, failed = model.copy(), math.inf, 0, False
    step = 0
    for epoch in range(cfg.epochs):
        order = numpy_rng(seed, "shuffle", epoch).permutation(len(xt))
        losses = []
        for b in range(n_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            pred, cache = model_forward(xt[idx], model, train_mode=True, seed=derive_seed(seed, "step", step))
            loss, dpred = masked_mae(pred, yt[idx], mt[idx])
            if not math.isfinite(loss):
                failed = True
                break
            grads = backward_from_pred(dpred, model, cache)
            lr = lr_schedule(step, total, warm, cfg.lr0)
            adamw_step(model.params, grads, state, lr, cfg.betas, cfg.eps, cfg.weight_decay)
            losses.append(loss)
            step += 1
        if failed:
            log.warning("variant %s seed %d diverged in epoch %d", variant, seed, epoch)
            break
        pred_val, att = evaluate(model, splits.x["val"], cfg.eval_batch)
        val_mae = float(np.nanmean(metrics(pred_val, splits.y["val"], splits.mask["val"])["MAE"])) if len(pred_val) else math.nan
        d, off, ratio = diag_mass(att)
        history.append(
            {
                "epoch": epoch + 1,
                "train_loss": float(np.mean(losses)) if losses else math.nan,
                "val_mae": val_mae,
                "mean_diag": d,
                "mean_offdiag": off,
                "diag_ratio": ratio,
            }
        )
        if val_mae < best_mae:
            best, best_mae, best_epoch = model.copy(), val_mae, epoch + 1
    pred_test, _ = evaluate(best, splits.x["test"], cfg.eval_batch)
    test = metrics(pred_test, splits.y["test"], splits.mask["test"]) if len(pred_test) else {}
    _, att_final = evaluate(model, splits.x["test"], cfg.eval_batch)
    return SeedResult(seed, failed, test, history, att_final, best_epoch, model, best)


def aggregate(variant: str, horizons: list[int], seeds: list[SeedResult]) -> ExperimentResult:
    ok = [s for s in seeds if not s.failed]
    mean, std = {}, {}
    for name in ("MAE", "RMSE", "MAPE"):
        if ok:
            stack = np.stack([s.test[name] for s in ok])
            mean[name], std[name] = stack.mean(axis=0), stack.std(axis=0)
        else:
            mean[name] = std[name] = np.full(max(horizons), math.nan)
    return ExperimentResult(variant, horizons, seeds, mean, std)


def run_experiment(
    variant: str,
    cfg: TrainConfig,
    ds: SeriesDataset,
    model_cfg: ModelConfig | None = None,
    splits: Splits | None = None,
) -> ExperimentResult:
    if model_cfg is None:
        model_cfg = ModelConfig(n_nodes=ds.n_nodes, d_x=ds.d_x)
    if model_cfg.n_nodes != ds.n_nodes or model_cfg.d_x != ds.d_x:
        raise ValueError("model dimensions do not match the dataset")
    bad = [h for h in cfg.horizons_report if not 1 <= h <= model_cfg.horizon]
    if bad:
        raise ValueError(f"reported horizons {bad} outside 1..{model_cfg.horizon}")
    variant_setup(variant, cfg)
    if splits is None:
        splits = prepare_splits(ds, model_cfg.window, model_cfg.horizon)
    scale, shift = float(ds.scaler.std[0]), float(ds.scaler.mean[0])
    seeds = [train_seed(variant, cfg, model_cfg, splits, s, scale, shift) for s in cfg.seeds]
    return aggregate(variant, cfg.horizons_report, seeds)
