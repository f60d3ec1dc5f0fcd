"""Small dense float64 helpers shared by every other module.

Matrices are plain ``numpy.ndarray`` objects (C order, float64). The
functions here add the shape checks and fixed reduction orders the rest of
the package relies on, plus the doubly-stochasticity and conditioning
metrics.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

RMS_EPS = 1e-6
MAX_PERM_ORDER = 8


class DomainError(ValueError):
    """Input lies outside the mathematical domain of an operation."""


class CapacityError(ValueError):
    """Requested size exceeds a hard guard (e.g. factorial blow-up)."""


def as_mat(a) -> np.ndarray:
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a, b = as_mat(a), as_mat(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def row_sums(m) -> np.ndarray:
    """Row sums accumulated strictly left to right."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-1] == 0:
        return np.zeros(m.shape[:-1])
    # cumsum is sequential, unlike np.sum which uses pairwise blocks
    return np.cumsum(m, axis=-1)[..., -1]


def col_sums(m) -> np.ndarray:
    """Column sums accumulated strictly top to bottom."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-2] == 0:
        return np.zeros(m.shape[:-2] + m.shape[-1:])
    return np.cumsum(m, axis=-2)[..., -1, :]


@dataclass(frozen=True)
class DSError:
    """l1 distance of the row and column sums from the all-ones vector."""

    row_l1: float
    col_l1: float

    @property
    def total(self) -> float:
        return self.row_l1 + self.col_l1


def ds_error(m) -> DSError:
    m = as_mat(m)
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"ds_error needs a square matrix, got {m.shape}")
    row = float(np.abs(row_sums(m) - 1.0).sum())
    col = float(np.abs(col_sums(m) - 1.0).sum())
    return DSError(row, col)


def ds_error_batch(m) -> np.ndarray:
    """Total l1 error for a stack of square matrices, shape ``(..., n, n)``."""
    m = np.asarray(m, dtype=np.float64)
    return (np.abs(row_sums(m) - 1.0).sum(-1)
            + np.abs(col_sums(m) - 1.0).sum(-1))


def is_doubly_stochastic(m, tol: float = 1e-12) -> bool:
    m = as_mat(m)
    return bool(m.shape[0] == m.shape[1] and (m >= -tol).all()
                and ds_error(m).total <= tol)


def relative_range(m) -> float:
    """Smallest strictly positive entry over the largest entry.

    Small values flag inputs on which Sinkhorn-Knopp scaling converges
    slowly.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0 or (m < 0).any():
        raise DomainError("relative_range needs a nonnegative, nonempty matrix")
    pos = m[m > 0]
    if pos.size == 0:
        raise DomainError("relative_range needs at least one positive entry")
    return float(pos.min() / pos.max())


def rmsnorm(v, eps: float = RMS_EPS) -> np.ndarray:
    """RMS normalization over the last axis, no learnable gain."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] == 0:
        raise ValueError("rmsnorm of an empty vector")
    ms = np.mean(v * v, axis=-1, keepdims=True)
    return v / np.sqrt(ms + eps)


def sigmoid_map(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def softmax_map(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def permutation_tuples(n: int) -> list[tuple[int, ...]]:
    """One-line notations of all permutations of ``range(n)``, lexicographic."""
    if n < 1:
        raise ValueError("permutation order must be >= 1")
    if n > MAX_PERM_ORDER:
        raise CapacityError(
            f"n={n} would need {math.factorial(n)} permutations (limit n<={MAX_PERM_ORDER})")
    return list(itertools.permutations(range(n)))


def perm_matrix(perm) -> np.ndarray:
    n = len(perm)
    p = np.zeros((n, n))
    p[np.arange(n), list(perm)] = 1.0
    return p


def enumerate_permutations(n: int) -> list[np.ndarray]:
    """All n! permutation matrices; index 0 is the identity.

    Row ``i`` of the k-th matrix has its single 1 in column ``perm_k[i]``.
    """
    return [perm_matrix(p) for p in permutation_tuples(n)]
