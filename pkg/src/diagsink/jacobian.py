"""Closed-form Jacobians dh_i/dx_j of a single attention layer.

The total splits into three additive pieces:

* value path  ``alpha_ij Wv``
* key path    ``(alpha_ij / sqrt(d_k)) (v_j - h_i) (Wk^T q_i)^T``
* query path  ``(delta_ij / sqrt(d_k)) sum_m alpha_im v_m (Wq^T (k_m - kbar_i))^T``

with ``kbar_i = sum_k alpha_ik k_k``. Everything is read off a stored
:class:`~diagsink.attention.AttnTrace` of a single (T, d_model) sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttnTrace, AttnWeights, Regularizer, attn_forward
from .linalg import ShapeError, outer

DEFAULT_STEP = 1e-5


@dataclass
class JacobianParts:
    i: int
    j: int
    value: np.ndarray
    key: np.ndarray
    query: np.ndarray
    total_no_res: np.ndarray
    total_with_res: np.ndarray | None


def _check(trace: AttnTrace, w: AttnWeights, i: int, j: int) -> None:
    if trace.X.ndim != 2:
        raise ShapeError("Jacobians are defined on a single (T, d_model) trace")
    if trace.dropout_scale is not None:
        raise ValueError("no analytic Jacobian through sampled diagonal dropout")
    T = trace.T
    if not (0 <= i < T and 0 <= j < T):
        raise IndexError(f"indices ({i}, {j}) out of range for T={T}")
    if trace.Q.shape[1] != w.d_k or trace.V.shape[1] != w.d_v:
        raise ShapeError("trace was not produced by these weights")


def jac_value(trace: AttnTrace, w: AttnWeights, i: int, j: int) -> np.ndarray:
    _check(trace, w, i, j)
    return trace.Alpha[i, j] * w.Wv


def jac_key(trace: AttnTrace, w: AttnWeights, i: int, j: int) -> np.ndarray:
    _check(trace, w, i, j)
    a = trace.Alpha[i, j] / np.sqrt(w.d_k)
    return a * outer(trace.V[j] - trace.H[i], w.Wk.T @ trace.Q[i])


def key_average(trace: AttnTrace, i: int) -> np.ndarray:
    return trace.Alpha[i] @ trace.K


def jac_query(trace: AttnTrace, w: AttnWeights, i: int, j: int) -> np.ndarray:
    _check(trace, w, i, j)
    if i != j:
        return np.zeros((w.d_v, w.d_model))
    centered = (trace.K - key_average(trace, i)) @ w.Wq  # row m: (Wq^T (k_m - kbar_i))^T
    return (trace.Alpha[i][:, None] * trace.V).T @ centered / np.sqrt(w.d_k)


def jac_total(trace: AttnTrace, w: AttnWeights, i: int, j: int, residual: bool = False) -> JacobianParts:
    if residual and w.d_v != w.d_model:
        raise ShapeError("residual Jacobian needs d_v == d_model")
    value = jac_value(trace, w, i, j)
    key = jac_key(trace, w, i, j)
    query = jac_query(trace, w, i, j)
    total = value + key + query
    with_res = None
    if w.d_v == w.d_model:
        with_res = total + np.eye(w.d_model) if i == j else total.copy()
    if residual and with_res is None:
        raise ShapeError("residual Jacobian needs d_v == d_model")
    return JacobianParts(i, j, value, key, query, total, with_res)


def softmax_jacobian_row(alpha_row) -> np.ndarray:
    """d alpha_m / d e_k = alpha_m (delta_mk - alpha_k)."""
    a = np.asarray(alpha_row, dtype=np.float64)
    return np.diag(a) - np.outer(a, a)


def finite_diff_jacobian(
    X,
    w: AttnWeights,
    reg: Regularizer,
    residual: bool,
    i: int,
    j: int,
    step: float = DEFAULT_STEP,
) -> np.ndarray:
    """Central-difference Jacobian of output row i with respect to input row j."""
    if step <= 0:
        raise ValueError("step must be positive")
    if not reg.deterministic:
        raise ValueError("finite differences need a deterministic regularizer (dropout excluded)")
    X = np.array(X, dtype=np.float64)
    T, d = X.shape
    if not (0 <= i < T and 0 <= j < T):
        raise IndexError(f"indices ({i}, {j}) out of range for T={T}")
    cols = []
    for c in range(d):
        Xp, Xm = X.copy(), X.copy()
        Xp[j, c] += step
        Xm[j, c] -= step
        fp = attn_forward(Xp, w, reg, residual).out[i]
        fm = attn_forward(Xm, w, reg, residual).out[i]
        cols.append((fp - fm) / (2 * step))
    return np.stack(cols, axis=1)


def rel_error(analytic, reference, floor: float = 1e-3) -> float:
    """Largest entrywise |a - r| / max(|a|, |r|, floor).

    With ``floor = atol / rtol`` this is below ``rtol`` exactly when every
    entry satisfies ``|a - r| <= max(rtol * max(|a|, |r|), atol)``.
    """
    a = np.asarray(analytic, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if a.size == 0:
        return 0.0
    den = np.maximum(np.maximum(np.abs(a), np.abs(r)), floor)
    return float(np.max(np.abs(a - r) / den))


def jac_row(trace: AttnTrace, w: AttnWeights, i: int, residual: bool = False) -> np.ndarray:
    """All totals dh_i/dx_j for j = 0..T-1 stacked as (T, d_v, d_model)."""
    _check(trace, w, i, 0)
    a = trace.Alpha[i]
    tot = a[:, None, None] * w.Wv
    left = (trace.V - trace.H[i]) * (a / np.sqrt(w.d_k))[:, None]
    tot = tot + left[:, :, None] * (w.Wk.T @ trace.Q[i])[None, None, :]
    tot[i] += jac_query(trace, w, i, i)
    if residual:
        if w.d_v != w.d_model:
            raise ShapeError("residual Jacobian needs d_v == d_model")
        tot[i] += np.eye(w.d_model)
    return tot
