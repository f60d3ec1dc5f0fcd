"""Wall-clock timing of a single block forward pass per variant.

Only the ordering of the medians is meaningful; absolute numbers depend on
the machine and the numpy build.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .birkhoff import build_basis
from .hyperblock import SK_ITERS, Variant, forward_cached, identity_branch, random_params

WARMUP = 20


@dataclass(frozen=True)
class BenchResult:
    variant: str
    n: int
    C: int
    batch: int
    reps: int
    sk_iters: int
    median_ns: float
    q1_ns: float
    q3_ns: float

    def to_dict(self) -> dict:
        return asdict(self)


def bench_block(variant, n: int = 4, C: int = 768, reps: int = 1000, batch: int = 8,
                sk_iters: int = SK_ITERS, seed: int = 0) -> BenchResult:
    """Median ns per forward call of one block on a ``(batch, n, C)`` state.

    The branch is the identity so the timing isolates the mixing maps.
    """
    if reps < 1 or batch < 1:
        raise ValueError("reps and batch must be >= 1")
    variant = Variant.parse(variant)
    rng = np.random.default_rng(seed)
    p = random_params(variant, n, C, rng)
    x = rng.normal(size=(batch, n, C))
    basis = build_basis(n) if variant is Variant.MHC_LITE else None
    for _ in range(WARMUP):
        forward_cached(p, x, identity_branch, sk_iters, basis)
    t = np.empty(reps)
    for i in range(reps):
        t0 = time.perf_counter_ns()
        forward_cached(p, x, identity_branch, sk_iters, basis)
        t[i] = time.perf_counter_ns() - t0
    q1, med, q3 = np.quantile(t, [0.25, 0.5, 0.75])
    return BenchResult(variant.value, n, C, batch, reps, sk_iters,
                       float(med), float(q1), float(q3))
