"""Temporal softmax attention with diagonal regularizers.

All functions accept a single sequence ``X`` of shape (T, d_model) or a stack
(..., T, d_model); the trailing two axes are always (time, feature). Weight
matrices follow the column-vector convention ``q_i = Wq @ x_i``, so in row
form ``Q = X @ Wq.T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import NEG_LARGE, ShapeError, softmax_rows
from .rng import derive_seed, uniform_stream

REG_KINDS = ("none", "mask", "dropout", "penalty")
PE_SCHEMES = ("none", "sinusoidal")


@dataclass
class AttnWeights:
    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray

    def __post_init__(self):
        self.Wq = np.asarray(self.Wq, dtype=np.float64)
        self.Wk = np.asarray(self.Wk, dtype=np.float64)
        self.Wv = np.asarray(self.Wv, dtype=np.float64)
        # Leading axes, if any, stack independent heads.
        if self.Wq.ndim < 2 or self.Wk.shape != self.Wq.shape:
            raise ShapeError(f"Wq {self.Wq.shape} and Wk {self.Wk.shape} must match")
        if self.Wv.shape[:-2] != self.Wq.shape[:-2] or self.Wv.shape[-1] != self.Wq.shape[-1]:
            raise ShapeError(f"Wv {self.Wv.shape} incompatible with Wq {self.Wq.shape}")

    @property
    def d_model(self) -> int:
        return self.Wq.shape[-1]

    @property
    def d_k(self) -> int:
        return self.Wq.shape[-2]

    @property
    def d_v(self) -> int:
        return self.Wv.shape[-2]

    @classmethod
    def init(cls, d_model: int, d_k: int, d_v: int, rng: np.random.Generator) -> "AttnWeights":
        """Uniform in [-1/sqrt(d_model), 1/sqrt(d_model)], drawn Wq, Wk, Wv in order."""
        b = 1.0 / np.sqrt(d_model)
        return cls(
            rng.uniform(-b, b, size=(d_k, d_model)),
            rng.uniform(-b, b, size=(d_k, d_model)),
            rng.uniform(-b, b, size=(d_v, d_model)),
        )

    @classmethod
    def zeros(cls, d_model: int, d_k: int, d_v: int) -> "AttnWeights":
        return cls(np.zeros((d_k, d_model)), np.zeros((d_k, d_model)), np.zeros((d_v, d_model)))


@dataclass(frozen=True)
class Regularizer:
    kind: str = "none"
    p: float = 0.0
    lam: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in REG_KINDS:
            raise ValueError(f"unknown regularizer {self.kind!r}; expected one of {REG_KINDS}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"dropout probability {self.p} outside [0, 1]")
        if not np.isfinite(self.lam):
            raise ValueError("penalty must be finite")

    @classmethod
    def mask(cls) -> "Regularizer":
        return cls("mask")

    @classmethod
    def dropout(cls, p: float, seed: int = 0) -> "Regularizer":
        return cls("dropout", p=p, seed=seed)

    @classmethod
    def penalty(cls, lam: float) -> "Regularizer":
        return cls("penalty", lam=lam)

    def with_seed(self, seed: int) -> "Regularizer":
        return Regularizer(self.kind, self.p, self.lam, seed)

    @property
    def deterministic(self) -> bool:
        return self.kind != "dropout"


NO_REG = Regularizer()


@dataclass
class AttnTrace:
    """Intermediates of one forward pass.

    ``E`` holds the scores after any pre-softmax regularizer, ``Alpha`` the
    weights actually used to form ``H`` (after dropout, if it was applied) and
    ``out`` is ``H`` or ``H + X`` for the residual variant.
    """

    X: np.ndarray
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    E: np.ndarray
    Alpha: np.ndarray
    H: np.ndarray
    out: np.ndarray
    residual: bool = False
    reg: Regularizer = NO_REG
    dropout_scale: np.ndarray | None = field(default=None, repr=False)
    soft: np.ndarray | None = field(default=None, repr=False)

    @property
    def T(self) -> int:
        return self.X.shape[-2]


def _check_square(E: np.ndarray) -> None:
    if E.ndim < 2 or E.shape[-1] != E.shape[-2]:
        raise ShapeError(f"expected square score matrices, got {E.shape}")


def apply_diag_penalty(E, lam: float) -> np.ndarray:
    E = np.array(E, dtype=np.float64)
    _check_square(E)
    idx = np.arange(E.shape[-1])
    E[..., idx, idx] += lam
    return E


def apply_diag_mask(E) -> np.ndarray:
    E = np.array(E, dtype=np.float64)
    _check_square(E)
    if E.shape[-1] < 2:
        raise ValueError("diagonal mask needs T >= 2; a 1x1 masked row has no support")
    idx = np.arange(E.shape[-1])
    E[..., idx, idx] = NEG_LARGE
    return E


def diag_dropout_scale(batch_shape: tuple[int, ...], T: int, p: float, seed: int) -> np.ndarray:
    """Multipliers for the diagonal: 0 with probability p, else 1/(1-p).

    Draws come from the splitmix64 stream of ``seed`` in C order over
    ``batch_shape + (T,)``. A diagonal entry is dropped when its uniform draw
    is below ``p``. For p = 1 every entry is dropped and no scaling is applied.
    """
    n = int(np.prod(batch_shape, dtype=np.int64)) * T
    u = uniform_stream(seed, n).reshape(tuple(batch_shape) + (T,))
    keep = u >= p
    if p >= 1.0:
        return np.zeros_like(u)
    return keep / (1.0 - p)


def apply_diag_dropout(Alpha, p: float, seed: int) -> np.ndarray:
    Alpha = np.array(Alpha, dtype=np.float64)
    _check_square(Alpha)
    if p == 0.0:
        return Alpha
    T = Alpha.shape[-1]
    scale = diag_dropout_scale(Alpha.shape[:-2], T, p, seed)
    idx = np.arange(T)
    Alpha[..., idx, idx] *= scale
    return Alpha


def sinusoid_table(T: int, d_model: int) -> np.ndarray:
    """PE[t, 2k] = sin(t / 10000^(2k/d)), PE[t, 2k+1] = cos(t / 10000^(2k/d))."""
    if d_model % 2:
        raise ValueError(f"sinusoidal encoding needs an even d_model, got {d_model}")
    t = np.arange(T, dtype=np.float64)[:, None]
    freq = np.power(10000.0, -np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    pe = np.empty((T, d_model))
    pe[:, 0::2] = np.sin(t * freq)
    pe[:, 1::2] = np.cos(t * freq)
    return pe


def positional_encode(X, scheme: str = "sinusoidal") -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if scheme == "none":
        return X.copy()
    if scheme != "sinusoidal":
        raise ValueError(f"unknown positional encoding {scheme!r}")
    return X + sinusoid_table(X.shape[-2], X.shape[-1])


def attn_forward(
    X,
    w: AttnWeights,
    reg: Regularizer = NO_REG,
    residual: bool = False,
    train_mode: bool = False,
) -> AttnTrace:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim < 2 or X.shape[-1] != w.d_model:
        raise ShapeError(f"input {X.shape} does not end in d_model={w.d_model}")
    if X.shape[-2] < 1:
        raise ShapeError("sequence length must be >= 1")
    if residual and w.d_v != w.d_model:
        raise ShapeError(f"residual needs d_v == d_model, got {w.d_v} != {w.d_model}")
    Q = X @ np.swapaxes(w.Wq, -1, -2)
    K = X @ np.swapaxes(w.Wk, -1, -2)
    V = X @ np.swapaxes(w.Wv, -1, -2)
    E = Q @ np.swapaxes(K, -1, -2) / np.sqrt(w.d_k)
    if reg.kind == "mask":
        E = apply_diag_mask(E)
    elif reg.kind == "penalty":
        E = apply_diag_penalty(E, reg.lam)
    Alpha = softmax_rows(E)
    scale = soft = None
    if reg.kind == "dropout" and train_mode and reg.p > 0.0:
        T = X.shape[-2]
        scale = diag_dropout_scale(Alpha.shape[:-2], T, reg.p, reg.seed)
        soft = Alpha.copy()
        idx = np.arange(T)
        Alpha[..., idx, idx] *= scale
    H = Alpha @ V
    out = H + X if residual else H
    return AttnTrace(X, Q, K, V, E, Alpha, H, out, residual, reg, scale, soft)


def attn_backward(trace: AttnTrace, w: AttnWeights, d_out) -> tuple[np.ndarray, AttnWeights]:
    """Reverse-mode pass: returns (dL/dX, gradients packed as AttnWeights).

    Dropout multipliers are treated as constants. Masked entries have zero
    weight, so their score gradient vanishes without special casing.
    """
    d_out = np.asarray(d_out, dtype=np.float64)
    A, V, Q, K, X = trace.Alpha, trace.V, trace.Q, trace.K, trace.X
    dV = np.swapaxes(A, -1, -2) @ d_out
    dA = d_out @ np.swapaxes(V, -1, -2)
    P = A
    if trace.dropout_scale is not None:
        P = trace.soft
        idx = np.arange(trace.T)
        dA[..., idx, idx] *= trace.dropout_scale
    dE = P * (dA - np.sum(dA * P, axis=-1, keepdims=True))
    c = 1.0 / np.sqrt(w.d_k)
    dQ = dE @ K * c
    dK = np.swapaxes(dE, -1, -2) @ Q * c
    grads = AttnWeights(
        _weight_grad(dQ, X, w.Wq.shape),
        _weight_grad(dK, X, w.Wk.shape),
        _weight_grad(dV, X, w.Wv.shape),
    )
    dX = dQ @ w.Wq + dK @ w.Wk + dV @ w.Wv
    if trace.residual:
        dX = dX + d_out
    return _sum_to(dX, X.shape), grads


def _weight_grad(g: np.ndarray, x: np.ndarray, wshape: tuple[int, ...]) -> np.ndarray:
    """sum over samples and time of g^T x, kept per stacked head.

    ``g`` is (..., T, k) and ``x`` is (..., T, d); the weight's leading axes
    line up with the batch axes directly before T.
    """
    lead = len(wshape) - 2
    batch = np.broadcast_shapes(g.shape[:-1], x.shape[:-1])
    g = np.broadcast_to(g, batch + g.shape[-1:])
    x = np.broadcast_to(x, batch + x.shape[-1:])
    nb = len(batch)
    axes = list(range(nb - 1 - lead, nb - 1))
    g = np.moveaxis(g, axes, range(lead)).reshape(wshape[:lead] + (-1, g.shape[-1]))
    x = np.moveaxis(x, axes, range(lead)).reshape(wshape[:lead] + (-1, x.shape[-1]))
    return np.swapaxes(g, -1, -2) @ x


def _sum_to(a: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast result back down to ``shape``."""
    lead = a.ndim - len(shape)
    if lead:
        a = a.sum(axis=tuple(range(lead)))
    axes = tuple(k for k, n in enumerate(shape) if n == 1 and a.shape[k] != 1)
    if axes:
        a = a.sum(axis=axes, keepdims=True)
    return a


def multihead_forward(
    X,
    heads: list[AttnWeights],
    Wo,
    reg: Regularizer = NO_REG,
    residual: bool = False,
    train_mode: bool = False,
) -> tuple[np.ndarray, list[AttnTrace]]:
    """Concatenate per-head outputs along features and project with ``Wo``.

    ``Wo`` has shape (d_model, n_heads * d_v). The residual, when enabled, is
    added after the projection. Dropout heads get independent seeds derived
    from ``reg.seed`` and the head index.
    """
    if not heads:
        raise ShapeError("need at least one head")
    X = np.asarray(X, dtype=np.float64)
    Wo = np.asarray(Wo, dtype=np.float64)
    d_model = heads[0].d_model
    if any(h.d_model != d_model for h in heads):
        raise ShapeError("all heads must share d_model")
    width = sum(h.d_v for h in heads)
    if Wo.shape != (d_model, width):
        raise ShapeError(f"Wo must be {(d_model, width)}, got {Wo.shape}")
    traces = []
    for n, w in enumerate(heads):
        r = reg.with_seed(derive_seed(reg.seed, "head", n)) if reg.kind == "dropout" else reg
        traces.append(attn_forward(X, w, r, residual=False, train_mode=train_mode))
    Hcat = np.concatenate([t.H for t in traces], axis=-1)
    Y = Hcat @ Wo.T
    if residual:
        Y = Y + X
    return Y, traces
