"""Per-block online L-BFGS state.

A :class:`CurvatureMemory` keeps the last ``capacity`` pairs ``(v, r)`` of
variable variation and stochastic-gradient variation for one block, plus the
scaling ``eta`` of the initial matrix ``eta * I``.  :func:`two_loop_step`
applies the implied inverse-Hessian approximation to a gradient in
``O(capacity * block_length)`` operations.
"""
from __future__ import annotations

from collections import deque
from typing import NamedTuple

import numpy as np

from .errors import DimensionError

CURVATURE_FLOOR = 1e-12


class CurvaturePair(NamedTuple):
    v: np.ndarray
    r: np.ndarray
    rho: float


class CurvatureMemory:
    def __init__(self, dim: int, capacity: int):
        if capacity < 0:
            raise ValueError("memory capacity must be non-negative")
        self.dim = int(dim)
        self.capacity = int(capacity)
        self.pairs: deque = deque(maxlen=self.capacity)
        self.eta = 1.0
        self.rejected = 0

    def __len__(self):
        return len(self.pairs)

    def snapshot(self):
        """Immutable view ``(pairs, eta)`` for readers running without the owner's lock."""
        return tuple(self.pairs), self.eta

    def __repr__(self):
        return f"CurvatureMemory(dim={self.dim}, pairs={len(self.pairs)}/{self.capacity}, eta={self.eta:.3g})"


def admit_pair(memory: CurvatureMemory, v, r) -> bool:
    """Store ``(v, r)`` if it carries positive curvature.

    Pairs with ``v.r <= 1e-12 |v| |r|`` are rejected and leave the memory
    (including ``eta``) untouched.
    """
    v = np.array(v, dtype=float)
    r = np.array(r, dtype=float)
    if v.shape != (memory.dim,) or r.shape != (memory.dim,):
        raise DimensionError(f"curvature pair must have length {memory.dim}")
    vr = float(v @ r)
    if not np.isfinite(vr) or vr <= CURVATURE_FLOOR * np.linalg.norm(v) * np.linalg.norm(r):
        memory.rejected += 1
        return False
    if memory.capacity:
        memory.pairs.append(CurvaturePair(v, r, 1.0 / vr))
    memory.eta = vr / float(r @ r)
    return True


def two_loop_step(memory: CurvatureMemory, g, flops: list | None = None) -> np.ndarray:
    """Return ``B_hat @ g`` for the block's current inverse-Hessian approximation.

    ``flops``, when given, is a one-element list that accumulates an
    operation count (multiply-adds counted as two).
    """
    g = np.asarray(g, dtype=float)
    if g.shape != (memory.dim,):
        raise DimensionError(f"gradient must have length {memory.dim}")
    pairs, eta = memory.snapshot()
    return _two_loop(pairs, eta, g, flops)


def _two_loop(pairs, eta, g, flops=None):
    n = g.shape[0]
    count = 0
    p = g.copy()
    alpha = [0.0] * len(pairs)
    for k in range(len(pairs) - 1, -1, -1):  # newest to oldest
        v, r, rho = pairs[k]
        alpha[k] = rho * float(v @ p)
        p -= alpha[k] * r
        count += 4 * n + 1
    q = eta * p
    count += n
    for k, (v, r, rho) in enumerate(pairs):  # oldest to newest
        beta = rho * float(r @ q)
        q += (alpha[k] - beta) * v
        count += 4 * n + 2
    if flops is not None:
        flops[0] += count
    return q
