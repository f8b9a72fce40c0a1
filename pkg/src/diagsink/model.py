"""Toy Time&Space forecaster: temporal attention, then one graph convolution.

Per node the (W_in, d_x) history is embedded to d_model, gets a positional
encoding and goes through multi-head temporal attention. Each time step is
then mixed across nodes with a learned forward/backward adjacency::

    out_t = relu(A_fwd Y_t Wg + A_bwd Y_t Wg2 + bg)

and a linear readout maps the flattened (W_in * d_model) node history to the
H_out forecast. Reverse-mode gradients are written out by hand.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .attention import NO_REG, AttnTrace, AttnWeights, Regularizer, attn_backward, attn_forward, sinusoid_table
from .linalg import ShapeError, softmax_rows
from .rng import derive_seed

log = logging.getLogger(__name__)

GradientSet = dict[str, np.ndarray]


@dataclass
class ModelConfig:
    n_nodes: int = 20
    d_x: int = 1
    window: int = 12
    horizon: int = 12
    d_model: int = 16
    n_heads: int = 8
    d_k: int = 8
    d_v: int = 8
    d_emb: int = 8
    residual: bool = True
    pe: str = "sinusoidal"
    share_gcn_weight: bool = False


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    b = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-b, b, size=shape)


def learned_adjacency(E1, E2) -> tuple[np.ndarray, np.ndarray]:
    """Row-stochastic (A_fwd, A_bwd) = softmax(relu(E1 E2^T)), softmax(relu(E2 E1^T))."""
    E1 = np.asarray(E1, dtype=np.float64)
    E2 = np.asarray(E2, dtype=np.float64)
    if E1.shape != E2.shape or E1.ndim != 2:
        raise ShapeError(f"node embeddings must share an (N, d_emb) shape, got {E1.shape}, {E2.shape}")
    logits = E1 @ E2.T
    return softmax_rows(np.maximum(logits, 0.0)), softmax_rows(np.maximum(logits.T, 0.0))


def _softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    return p * (dp - np.sum(dp * p, axis=-1, keepdims=True))


class TnSModel:
    def __init__(
        self,
        cfg: ModelConfig,
        params: dict[str, np.ndarray],
        reg: Regularizer = NO_REG,
        out_scale: float = 1.0,
        out_shift: float = 0.0,
    ):
        self.cfg = cfg
        self.params = params
        self.reg = reg
        self.out_scale = float(out_scale)
        self.out_shift = float(out_shift)
        self._check_shapes()

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator, reg: Regularizer = NO_REG) -> "TnSModel":
        c = cfg
        p: dict[str, np.ndarray] = {"emb": _uniform(rng, (c.d_model, c.d_x), c.d_x)}
        heads = [AttnWeights.init(c.d_model, c.d_k, c.d_v, rng) for _ in range(c.n_heads)]
        p["Wq"] = np.stack([w.Wq for w in heads])
        p["Wk"] = np.stack([w.Wk for w in heads])
        p["Wv"] = np.stack([w.Wv for w in heads])
        p["Wo"] = _uniform(rng, (c.d_model, c.n_heads * c.d_v), c.n_heads * c.d_v)
        p["E1"] = _uniform(rng, (c.n_nodes, c.d_emb), c.d_emb)
        p["E2"] = _uniform(rng, (c.n_nodes, c.d_emb), c.d_emb)
        p["Wg"] = _uniform(rng, (c.d_model, c.d_model), c.d_model)
        if not c.share_gcn_weight:
            p["Wg2"] = _uniform(rng, (c.d_model, c.d_model), c.d_model)
        p["bg"] = np.zeros(c.d_model)
        p["Wout"] = _uniform(rng, (c.horizon, c.window * c.d_model), c.window * c.d_model)
        p["bout"] = np.zeros(c.horizon)
        model = cls(cfg, p, reg)
        model.check_param_ratio()
        return model

    @classmethod
    def zeros(cls, cfg: ModelConfig, reg: Regularizer = NO_REG) -> "TnSModel":
        shapes = cls.param_shapes(cfg)
        return cls(cfg, {k: np.zeros(s) for k, s in shapes.items()}, reg)

    @staticmethod
    def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
        c = cfg
        s: dict[str, tuple[int, ...]] = {"emb": (c.d_model, c.d_x)}
        s["Wq"] = s["Wk"] = (c.n_heads, c.d_k, c.d_model)
        s["Wv"] = (c.n_heads, c.d_v, c.d_model)
        s["Wo"] = (c.d_model, c.n_heads * c.d_v)
        s["E1"] = s["E2"] = (c.n_nodes, c.d_emb)
        s["Wg"] = (c.d_model, c.d_model)
        if not c.share_gcn_weight:
            s["Wg2"] = (c.d_model, c.d_model)
        s["bg"] = (c.d_model,)
        s["Wout"] = (c.horizon, c.window * c.d_model)
        s["bout"] = (c.horizon,)
        return s

    def _check_shapes(self) -> None:
        want = self.param_shapes(self.cfg)
        if set(want) != set(self.params):
            raise ShapeError(f"parameter names {sorted(self.params)} do not match {sorted(want)}")
        for k, s in want.items():
            self.params[k] = np.asarray(self.params[k], dtype=np.float64)
            if self.params[k].shape != s:
                raise ShapeError(f"{k}: expected {s}, got {self.params[k].shape}")
        if self.cfg.n_heads < 1:
            raise ShapeError("need at least one head")

    @property
    def heads(self) -> list[AttnWeights]:
        p = self.params
        return [AttnWeights(p["Wq"][h], p["Wk"][h], p["Wv"][h]) for h in range(self.cfg.n_heads)]

    @property
    def stacked_heads(self) -> AttnWeights:
        return AttnWeights(self.params["Wq"], self.params["Wk"], self.params["Wv"])

    def block_sizes(self) -> tuple[int, int]:
        """(temporal attention parameters, graph block parameters)."""
        ta = sum(self.params[k].size for k in ("Wq", "Wk", "Wv", "Wo"))
        graph = sum(self.params[k].size for k in ("E1", "E2", "Wg", "Wg2", "bg") if k in self.params)
        return ta, graph

    def check_param_ratio(self) -> float:
        ta, graph = self.block_sizes()
        ratio = ta / graph
        if not 3.0 <= ratio <= 5.0:
            log.warning("attention/graph parameter ratio %.2f is outside 4 +/- 1", ratio)
        return ratio

    def copy(self) -> "TnSModel":
        return TnSModel(self.cfg, {k: v.copy() for k, v in self.params.items()}, self.reg, self.out_scale, self.out_shift)


@dataclass
class ForwardCache:
    x: np.ndarray
    Z: np.ndarray
    trace: AttnTrace
    Hcat: np.ndarray
    Yt: np.ndarray
    A_fwd: np.ndarray
    A_bwd: np.ndarray
    AY_fwd: np.ndarray
    AY_bwd: np.ndarray
    S: np.ndarray
    Gn: np.ndarray

    def attention(self) -> np.ndarray:
        """Per-head attention, shape (B, N, heads, W, W)."""
        return self.trace.Alpha


def model_forward(x, model: TnSModel, train_mode: bool = False, seed: int = 0) -> tuple[np.ndarray, ForwardCache]:
    """Predictions (B, N, H_out) in output units plus the cache for backward."""
    c, p = model.cfg, model.params
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != (c.n_nodes, c.window, c.d_x):
        raise ShapeError(f"batch must be (B, {c.n_nodes}, {c.window}, {c.d_x}), got {x.shape}")
    B = x.shape[0]
    Z = x @ p["emb"].T
    if c.pe == "sinusoidal":
        Z = Z + sinusoid_table(c.window, c.d_model)
    elif c.pe != "none":
        raise ValueError(f"unknown positional encoding {c.pe!r}")
    # heads ride along as a broadcast axis: (B, N, heads, W, d)
    reg = model.reg.with_seed(derive_seed(seed, "dropout")) if model.reg.kind == "dropout" else model.reg
    trace = attn_forward(Z[:, :, None], model.stacked_heads, reg, residual=False, train_mode=train_mode)
    Hcat = trace.H.transpose(0, 1, 3, 2, 4).reshape(B, c.n_nodes, c.window, c.n_heads * c.d_v)
    Y = Hcat @ p["Wo"].T
    if c.residual:
        Y = Y + Z
    Yt = Y.transpose(0, 2, 1, 3)
    A_fwd, A_bwd = learned_adjacency(p["E1"], p["E2"])
    AY_fwd = A_fwd @ Yt
    AY_bwd = A_bwd @ Yt
    Wg2 = p["Wg"] if c.share_gcn_weight else p["Wg2"]
    S = AY_fwd @ p["Wg"] + AY_bwd @ Wg2 + p["bg"]
    G = np.maximum(S, 0.0)
    Gn = G.transpose(0, 2, 1, 3).reshape(B, c.n_nodes, c.window * c.d_model)
    P = Gn @ p["Wout"].T + p["bout"]
    pred = P * model.out_scale + model.out_shift
    return pred, ForwardCache(x, Z, trace, Hcat, Yt, A_fwd, A_bwd, AY_fwd, AY_bwd, S, Gn)


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def backward_from_pred(dpred: np.ndarray, model: TnSModel, cache: ForwardCache) -> GradientSet:
    c, p = model.cfg, model.params
    B = dpred.shape[0]
    g: GradientSet = {}
    dP = dpred * model.out_scale
    g["Wout"] = _flat(dP).T @ _flat(cache.Gn)
    g["bout"] = _flat(dP).sum(axis=0)
    dG = (dP @ p["Wout"]).reshape(B, c.n_nodes, c.window, c.d_model).transpose(0, 2, 1, 3)
    dS = dG * (cache.S > 0)
    g["bg"] = _flat(dS).sum(axis=0)
    Wg2 = p["Wg"] if c.share_gcn_weight else p["Wg2"]
    if c.share_gcn_weight:
        g["Wg"] = _flat(cache.AY_fwd + cache.AY_bwd).T @ _flat(dS)
    else:
        g["Wg"] = _flat(cache.AY_fwd).T @ _flat(dS)
        g["Wg2"] = _flat(cache.AY_bwd).T @ _flat(dS)
    dAY_f = dS @ p["Wg"].T
    dAY_b = dS @ Wg2.T
    Yt = cache.Yt
    dA_f = np.einsum("bwnd,bwmd->nm", dAY_f, Yt)
    dA_b = np.einsum("bwnd,bwmd->nm", dAY_b, Yt)
    dYt = cache.A_fwd.T @ dAY_f + cache.A_bwd.T @ dAY_b
    logits = p["E1"] @ p["E2"].T
    dL_f = _softmax_backward(cache.A_fwd, dA_f) * (logits > 0)
    dL_b = _softmax_backward(cache.A_bwd, dA_b) * (logits.T > 0)
    g["E1"] = dL_f @ p["E2"] + dL_b.T @ p["E2"]
    g["E2"] = dL_f.T @ p["E1"] + dL_b @ p["E1"]
    dY = dYt.transpose(0, 2, 1, 3)
    g["Wo"] = _flat(dY).T @ _flat(cache.Hcat)
    dHcat = dY @ p["Wo"]
    dZ = dY.copy() if c.residual else np.zeros_like(dY)
    dH = dHcat.reshape(B, c.n_nodes, c.window, c.n_heads, c.d_v).transpose(0, 1, 3, 2, 4)
    dZh, gw = attn_backward(cache.trace, model.stacked_heads, dH)
    dZ += dZh[:, :, 0]
    g["Wq"], g["Wk"], g["Wv"] = gw.Wq, gw.Wk, gw.Wv
    g["emb"] = _flat(dZ).T @ _flat(cache.x)
    return {k: g[k] for k in p}


def masked_mae(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Masked MAE and its subgradient (sign convention: 0 at ties)."""
    if mask is None:
        mask = np.ones_like(target)
    count = mask.sum()
    if count == 0:
        return 0.0, np.zeros_like(pred)
    diff = pred - target
    loss = float(np.sum(mask * np.abs(diff)) / count)
    return loss, mask * np.sign(diff) / count


def model_backward(
    x, targets, model: TnSModel, mask=None, train_mode: bool = False, seed: int = 0, loss: str = "MAE"
) -> tuple[float, GradientSet]:
    if loss != "MAE":
        raise ValueError(f"unsupported loss {loss!r}")
    pred, cache = model_forward(x, model, train_mode, seed)
    value, dpred = masked_mae(pred, np.asarray(targets, dtype=np.float64), mask)
    return value, backward_from_pred(dpred, model, cache)
