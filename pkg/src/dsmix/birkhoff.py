"""Doubly stochastic matrices as convex combinations of permutation matrices.

``combine`` is the construction used by the permutation-basis residual
block. ``birkhoff_decompose`` goes the other way with a greedy
bottleneck search and serves as an independent check on ``combine``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .matcore import DomainError, ds_error, as_mat, perm_matrix, permutation_tuples

SUPPORT_EPS = 1e-12
DECOMPOSE_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class PermBasis:
    """All permutations of order ``n`` and their stacked 0/1 flattening.

    ``combo_matrix[k]`` is the row-major flattening of ``perms[k]``, so a
    weight row ``a`` of length n! maps to ``(a @ combo_matrix).reshape(n, n)``.
    """

    n: int
    one_line: np.ndarray  # (n!, n) int, perm k sends row i to column one_line[k, i]
    combo_matrix: np.ndarray  # (n!, n*n)

    @property
    def size(self) -> int:
        return self.one_line.shape[0]

    @property
    def perms(self) -> list[np.ndarray]:
        return [perm_matrix(p) for p in self.one_line]


@lru_cache(maxsize=None)
def build_basis(n: int) -> PermBasis:
    tuples = permutation_tuples(n)
    one_line = np.array(tuples, dtype=np.intp).reshape(len(tuples), n)
    combo = np.zeros((len(tuples), n * n))
    rows = np.arange(n)
    for k, p in enumerate(one_line):
        combo[k, rows * n + p] = 1.0
    one_line.setflags(write=False)
    combo.setflags(write=False)
    return PermBasis(n, one_line, combo)


def combine(basis: PermBasis, w) -> np.ndarray:
    """Weighted sum of permutation matrices, as one matrix product.

    Accepts a single weight vector or a stack ``(..., n!)``.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] != basis.size:
        raise ValueError(f"expected {basis.size} weights for n={basis.n}, got {w.shape[-1]}")
    flat = w @ basis.combo_matrix
    return flat.reshape(w.shape[:-1] + (basis.n, basis.n))


def random_simplex(rng: np.random.Generator, k: int, size=None) -> np.ndarray:
    """Uniform draws from the probability simplex of dimension ``k``."""
    shape = (k,) if size is None else tuple(np.atleast_1d(size)) + (k,)
    e = rng.exponential(size=shape)
    return e / e.sum(axis=-1, keepdims=True)


def birkhoff_decompose(m, basis: PermBasis | None = None) -> np.ndarray:
    """Greedy Birkhoff decomposition returning weights over ``basis``.

    Each round picks, among permutations lying inside the current support,
    the one whose smallest covered entry is largest (lowest index on ties)
    and peels that amount off. The result is one valid decomposition; it is
    not unique.
    """
    m = as_mat(m)
    n = m.shape[0]
    if m.shape[1] != n:
        raise ValueError(f"birkhoff_decompose needs a square matrix, got {m.shape}")
    if basis is None:
        basis = build_basis(n)
    elif basis.n != n:
        raise ValueError(f"basis has n={basis.n}, matrix has n={n}")
    err = ds_error(m)
    if err.total > DECOMPOSE_TOL or (m < -SUPPORT_EPS).any():
        raise DomainError(
            f"matrix is not doubly stochastic (l1 error {err.total:.3e}, min entry {m.min():.3e})")

    rest = m.copy()
    weights = np.zeros(basis.size)
    rows = np.arange(n)
    # each round clears at least one support entry
    for _ in range(n * n):
        covered = rest[rows, basis.one_line]  # (n!, n)
        mins = covered.min(axis=1)
        k = int(np.argmax(mins))
        if mins[k] <= SUPPORT_EPS:
            break
        weights[k] += mins[k]
        rest[rows, basis.one_line[k]] -= mins[k]
    leftover = float(np.abs(rest).max())
    if leftover > 1e-10:
        raise DomainError(f"decomposition stalled with residual entry {leftover:.3e}")
    return weights


def max_terms(n: int) -> int:
    """Carathéodory bound on the number of permutations needed."""
    return (n - 1) ** 2 + 1


def describe_weights(basis: PermBasis, w, eps: float = 0.0) -> list[dict]:
    """Nonzero terms as ``{"index", "perm", "weight"}`` records."""
    w = np.asarray(w, dtype=np.float64)
    return [{"index": int(k), "perm": [int(j) for j in basis.one_line[k]], "weight": float(w[k])}
            for k in np.flatnonzero(w > eps)]
