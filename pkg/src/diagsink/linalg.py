"""Dense float64 helpers: products, stable softmax, outer products and norms.

Matrices and vectors are plain ``numpy`` arrays. Functions validate shapes and
raise :class:`ShapeError` instead of relying on numpy broadcasting.
"""

from __future__ import annotations

import numpy as np

# Stand-in for -inf in masked score entries. Softmax treats anything at or
# below NEG_LARGE / 2 as masked and assigns it exactly zero weight.
NEG_LARGE = -1.0e30

_SQUARINGS = 32


class ShapeError(ValueError):
    pass


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(s) -> np.ndarray:
    """Softmax over the last axis with max subtraction.

    Entries equal to ``NEG_LARGE`` underflow to weight exactly 0 as long as
    the row has one live entry. A row made only of masked entries has empty
    support and raises ``ValueError``.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    m = s.max(axis=-1, keepdims=True)
    if (m <= NEG_LARGE / 2).any():
        raise ValueError("softmax row has every entry masked (empty support)")
    ex = np.exp(s - m)
    ex /= ex.sum(axis=-1, keepdims=True)
    return ex


def softmax_row(s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {s.shape}")
    return softmax_rows(s)


def outer(a, b) -> np.ndarray:
    return np.multiply.outer(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))


def vec_norm2(v) -> float:
    return float(np.sqrt(np.sum(np.square(np.asarray(v, dtype=np.float64)))))


def _start_vectors(n: int) -> np.ndarray:
    # All-ones first; an alternating ramp covers tops orthogonal to all-ones.
    ones = np.ones(n) / np.sqrt(n)
    ramp = np.arange(1, n + 1, dtype=np.float64) * np.where(np.arange(n) % 2, -1.0, 1.0)
    ramp /= np.linalg.norm(ramp)
    return np.stack([ones, ramp], axis=1)


def spectral_norms(m) -> np.ndarray:
    """Largest singular value of each matrix in a stack of shape (..., r, c).

    Power iteration on the Gram matrix, accelerated by repeated squaring so
    that near-degenerate top eigenvalues still converge. The iterate is read
    out through a Rayleigh quotient against the unsquared Gram matrix.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim < 2:
        raise ShapeError(f"expected (..., r, c), got {m.shape}")
    batch = m.shape[:-2]
    m = m.reshape((-1,) + m.shape[-2:])
    # normalise before squaring so tiny or huge entries neither underflow nor overflow
    mag = np.abs(m).max(axis=(1, 2))
    out = np.zeros(len(m))
    live = mag > 0
    if not live.any():
        return out.reshape(batch)
    m = m[live] / mag[live, None, None]
    if m.shape[1] < m.shape[2]:
        gram = m @ m.transpose(0, 2, 1)
    else:
        gram = m.transpose(0, 2, 1) @ m
    n = gram.shape[-1]
    scale = np.abs(gram).max(axis=(1, 2))
    g = gram / scale[:, None, None]
    p = g.copy()
    for _ in range(_SQUARINGS):
        p = p @ p
        p /= np.abs(p).max(axis=(1, 2), keepdims=True)
    v = p @ _start_vectors(n)
    gv = g @ v
    num = np.einsum("bik,bik->bk", v, gv)
    den = np.einsum("bik,bik->bk", v, v)
    with np.errstate(invalid="ignore", divide="ignore"):
        rq = np.where(den > 0, num / den, 0.0)
    lam = rq.max(axis=1) * scale
    out[live] = np.sqrt(np.maximum(lam, 0.0)) * mag[live]
    return out.reshape(batch)


def spectral_norm(m) -> float:
    return float(spectral_norms(as_matrix(m)))


def frobenius_norm(m) -> float:
    return float(np.sqrt(np.sum(np.square(np.asarray(m, dtype=np.float64)))))


def matrix_norm(m, kind: str = "spectral") -> float:
    if kind == "spectral":
        return spectral_norm(m)
    if kind == "frobenius":
        return frobenius_norm(m)
    raise ValueError(f"unknown norm {kind!r}")


def matrix_norms(m, kind: str = "spectral") -> np.ndarray:
    if kind == "spectral":
        return spectral_norms(m)
    if kind == "frobenius":
        return np.sqrt(np.sum(np.square(np.asarray(m, dtype=np.float64)), axis=(-2, -1)))
    raise ValueError(f"unknown norm {kind!r}")


def identity_norm(d: int, kind: str = "spectral") -> float:
    return 1.0 if kind == "spectral" else float(np.sqrt(d))
