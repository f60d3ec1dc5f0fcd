"""Sinkhorn-Knopp alternating normalization with a per-iteration trace.

One iteration is a column pass followed by a row pass, so every result has
exact unit row sums while the column sums carry whatever error is left.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .matcore import DSError, DomainError, as_mat, ds_error

ZERO_SUM = 1e-300


@dataclass(frozen=True)
class SKStep:
    """Intermediates of one iteration, kept for the backward pass."""

    col_sum: np.ndarray
    col_normalized: np.ndarray
    row_sum: np.ndarray
    out: np.ndarray


@dataclass
class SKReport:
    result: np.ndarray
    iterations_run: int
    l1_trace: list[DSError]
    converged: bool
    steps: list[SKStep] = field(default_factory=list, repr=False)

    @property
    def final_error(self) -> DSError:
        return self.l1_trace[-1]


def adverse_matrix(alpha: float = 1e-13) -> np.ndarray:
    """3x3 strictly positive matrix on which 20 SK iterations stall."""
    a = float(alpha)
    return np.array([[0.5, a, a],
                     [0.5, a, a],
                     [a, 1.0, 1.0]])


def _check_sums(sums: np.ndarray, kind: str) -> None:
    bad = np.flatnonzero(~(sums >= ZERO_SUM))
    if bad.size:
        raise DomainError(f"{kind} {int(bad[0])} has sum {sums[bad[0]]!r}; cannot normalize")


def _step(m: np.ndarray) -> SKStep:
    c = m.sum(0)
    _check_sums(c, "column")
    q = m / c[None, :]
    r = q.sum(1)
    _check_sums(r, "row")
    return SKStep(c, q, r, q / r[:, None])


def sk_step(m) -> np.ndarray:
    """One column pass then one row pass."""
    m = as_mat(m)
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"sk_step needs a square matrix, got {m.shape}")
    if (m < 0).any():
        raise DomainError("sk_step needs nonnegative entries")
    return _step(m).out


def sk_normalize(m, max_iters: int = 20, tol: float = 0.0) -> SKReport:
    """Run up to ``max_iters`` iterations, stopping once the l1 error <= tol.

    The error is measured after each row pass. With the default ``tol=0``
    the whole budget runs unless the matrix becomes exactly doubly
    stochastic.
    """
    m = as_mat(m)
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"sk_normalize needs a square matrix, got {m.shape}")
    if (m < 0).any():
        raise DomainError("sk_normalize needs nonnegative entries")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if tol < 0:
        raise ValueError("tol must be >= 0")

    steps, trace = [], []
    cur = m
    converged = False
    for _ in range(max_iters):
        st = _step(cur)
        steps.append(st)
        cur = st.out
        err = ds_error(cur)
        trace.append(err)
        if err.total <= tol:
            converged = True
            break
    return SKReport(cur, len(steps), trace, converged, steps)


def sk_forward_batch(m: np.ndarray, iters: int) -> tuple[np.ndarray, list[SKStep]]:
    """Fixed-budget SK over a stack ``(..., n, n)`` of positive matrices.

    No early exit and no zero-sum guard: callers feed ``exp`` outputs,
    which are strictly positive.
    """
    steps = []
    cur = m
    for _ in range(iters):
        c = cur.sum(-2)
        q = cur / c[..., None, :]
        r = q.sum(-1)
        out = q / r[..., :, None]
        steps.append(SKStep(c, q, r, out))
        cur = out
    return cur, steps


def sk_backward(steps: list[SKStep], grad_out: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product through a stored unrolled SK run.

    For ``y = x / s`` with ``s`` the sum along an axis,
    ``dx = (dy - sum(dy * y)) / s`` along that axis.
    """
    g = grad_out
    for st in reversed(steps):
        # row pass: out = q / r[:, None]
        g = (g - (g * st.out).sum(-1, keepdims=True)) / st.row_sum[..., :, None]
        # column pass: q = m / c[None, :]
        g = (g - (g * st.col_normalized).sum(-2, keepdims=True)) / st.col_sum[..., None, :]
    return g
