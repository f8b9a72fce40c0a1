"""Seed derivation and the splitmix64 stream used for dropout draws.

splitmix64 is counter based: draw ``k`` of a stream seeded with ``s`` is
``mix(s + (k + 1) * GAMMA)`` where ``mix`` is the finalizer below. This makes
the stream trivially vectorizable and reproducible in any language with
wrapping 64-bit unsigned arithmetic.
"""

from __future__ import annotations

import hashlib

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """Finalizer applied to ``x + GAMMA`` (one step of the scalar generator)."""
    z = (x + GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def splitmix64_stream(seed: int, n: int) -> np.ndarray:
    """First ``n`` outputs of the splitmix64 generator seeded with ``seed``."""
    with np.errstate(over="ignore"):
        k = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(seed & MASK64) + k * np.uint64(GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
        return z ^ (z >> np.uint64(31))


def uniform_stream(seed: int, n: int) -> np.ndarray:
    """``n`` doubles in [0, 1) built from the top 53 bits of each draw."""
    bits = splitmix64_stream(seed, n) >> np.uint64(11)
    return bits.astype(np.float64) * (1.0 / (1 << 53))


def name_hash(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")


def derive_seed(root: int, *parts: int | str) -> int:
    """Mix a root seed with component names / indices into a child seed.

    Each part is folded in with xor followed by one splitmix64 step, so the
    result depends on the order of the parts.
    """
    s = root & MASK64
    for part in parts:
        v = name_hash(part) if isinstance(part, str) else int(part) & MASK64
        s = splitmix64(s ^ v)
    return s


def numpy_rng(root: int, *parts: int | str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *parts))
