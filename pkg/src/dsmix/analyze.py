"""Stability diagnostics over populations of residual matrices.

Populations are summarized with boxplot statistics (quartiles by linear
interpolation, outliers beyond 1.5 IQR). Reports are written as JSON (an
array of groups) or CSV (one row per group).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .hyperblock import (
    SK_ITERS,
    BlockParams,
    Variant,
    block_forward,
    init_params,
    random_params,
    zero_branch,
)
from .matcore import DomainError

NU_THRESHOLD = 13 * math.log(10)  # ln(1/nu) above which 20 SK iterations tend to stall
STAT_FIELDS = ("label", "n", "min", "q1", "median", "q3", "max", "outliers")


@dataclass
class StabilityStats:
    label: str
    n: int
    min: float
    q1: float
    median: float
    q3: float
    max: float
    outliers: list[float]
    extras: dict = field(default_factory=dict)

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1

    def to_dict(self) -> dict:
        d = asdict(self)
        if not d["extras"]:
            del d["extras"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StabilityStats":
        return cls(d["label"], int(d["n"]), float(d["min"]), float(d["q1"]), float(d["median"]),
                   float(d["q3"]), float(d["max"]), [float(v) for v in d["outliers"]],
                   dict(d.get("extras", {})))


def boxplot_stats(values, label: str) -> StabilityStats:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError(f"empty population for {label!r}")
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75], method="linear")
    lo, hi = q1 - 1.5 * (q3 - q1), q3 + 1.5 * (q3 - q1)
    out = np.sort(v[(v < lo) | (v > hi)])
    return StabilityStats(label, int(v.size), float(v.min()), float(q1), float(med), float(q3),
                          float(v.max()), [float(x) for x in out])


def _stack(matrices) -> np.ndarray:
    arrs = [np.asarray(m, dtype=np.float64) for m in matrices]
    if not arrs:
        raise ValueError("no matrices given")
    shape = arrs[0].shape
    if len(shape) != 2 or shape[0] != shape[1]:
        raise ValueError(f"expected square matrices, got {shape}")
    for a in arrs:
        if a.shape != shape:
            raise ValueError(f"mixed matrix sizes {shape} and {a.shape}")
    return np.stack(arrs)


def log_inv_nu(matrices) -> np.ndarray:
    """ln(1/nu) for each strictly positive matrix."""
    s = _stack(matrices)
    if not (s > 0).all():
        raise DomainError("nu_scan needs strictly positive matrices")
    flat = s.reshape(s.shape[0], -1)
    return np.log(flat.max(1)) - np.log(flat.min(1))


def nu_scan(pre_sk_matrices, label: str = "log_inv_nu") -> StabilityStats:
    """Boxplot of ln(1/nu) with the fraction of matrices above ln(1e13)."""
    vals = log_inv_nu(pre_sk_matrices)
    st = boxplot_stats(vals, label)
    st.extras = {"threshold": NU_THRESHOLD,
                 "fraction_above": float(np.mean(vals >= NU_THRESHOLD))}
    return st


def colsum_stats(matrices, label: str = "colsum") -> StabilityStats:
    s = _stack(matrices)
    return boxplot_stats(s.sum(axis=-2), label)


def depth_product(per_layer, n: int | None = None) -> np.ndarray:
    """``H_L @ ... @ H_1`` for layers given in order ``H_1 .. H_L``."""
    mats = list(per_layer)
    if not mats:
        if n is None:
            raise ValueError("empty product needs an explicit size")
        return np.eye(n)
    s = _stack(mats)
    if n is not None and s.shape[-1] != n:
        raise ValueError(f"matrices are {s.shape[-1]}x{s.shape[-1]}, expected n={n}")
    out = s[0].copy()
    for h in s[1:]:
        out = h @ out
    return out


def emit_report(stats, path, fmt: str | None = None) -> None:
    """Write stats to ``path`` as JSON (default) or CSV (``.csv`` suffix or ``fmt='csv'``)."""
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix.lower() == ".csv" else "json")
    try:
        if fmt == "json":
            path.write_text(json.dumps([s.to_dict() for s in stats], indent=1))
        elif fmt == "csv":
            with path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(STAT_FIELDS)
                for s in stats:
                    w.writerow([s.label, s.n] + [f"{getattr(s, k):.17g}" for k in STAT_FIELDS[2:7]]
                               + [" ".join(f"{o:.17g}" for o in s.outliers)])
        else:
            raise ValueError(f"unknown report format {fmt!r}")
    except OSError as e:
        raise OSError(f"cannot write report to {path}: {e}") from e


def load_report(path) -> list[StabilityStats]:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with path.open(newline="") as fh:
            return [StabilityStats(r["label"], int(r["n"]), float(r["min"]), float(r["q1"]),
                                   float(r["median"]), float(r["q3"]), float(r["max"]),
                                   [float(o) for o in r["outliers"].split()])
                    for r in csv.DictReader(fh)]
    return [StabilityStats.from_dict(d) for d in json.loads(path.read_text())]


def stability_report(harvests: dict) -> list[StabilityStats]:
    """Per-matrix and depth-product column-sum groups for each harvested variant.

    ``harvests`` maps a name to an object with ``hres`` shaped ``(L, T, n, n)``
    and optional ``pre_sk``; variants with pre-SK matrices also get a
    ln(1/nu) group.
    """
    out = []
    for name, hv in harvests.items():
        hres = np.asarray(hv.hres)
        L, T, n, _ = hres.shape
        out.append(colsum_stats(hres.reshape(-1, n, n), f"{name}/per-matrix"))
        prods = [depth_product(hres[:, t]) for t in range(T)]
        out.append(colsum_stats(prods, f"{name}/product"))
        if getattr(hv, "pre_sk", None) is not None:
            out.append(nu_scan(np.asarray(hv.pre_sk).reshape(-1, n, n), f"{name}/log_inv_nu"))
    return out


def adversarial_logits(n: int = 4, spread: float = 30.0) -> np.ndarray:
    """Logits whose exponential embeds the slow-SK 3x3 pattern in an n x n matrix.

    Top-left block is ``[[1/2, a, a], [1/2, a, a], [a, 1, 1]]`` with
    ``a = e^-spread``; remaining streams keep a unit diagonal.
    """
    if n < 3:
        raise ValueError("the adversarial pattern needs n >= 3")
    z = np.full((n, n), -spread)
    z[0, 0] = z[1, 0] = math.log(0.5)
    z[2, 1] = z[2, 2] = 0.0
    for i in range(3, n):
        z[i, i] = 0.0
    return z


def adversarial_mhc_stack(L: int = 24, n: int = 4, C: int = 16,
                          spread: float = 30.0) -> list[BlockParams]:
    blocks = []
    for _ in range(L):
        p = init_params(Variant.MHC, n, C)
        p.b_res = adversarial_logits(n, spread).ravel()
        blocks.append(p)
    return blocks


def lite_stack(L: int = 24, n: int = 4, C: int = 16, seed: int = 0,
               spread: float = 30.0) -> list[BlockParams]:
    """Random permutation-basis blocks whose residual logits span ``spread``."""
    rng = np.random.default_rng(seed)
    blocks = []
    for _ in range(L):
        p = random_params(Variant.MHC_LITE, n, C, rng)
        p.b_res = rng.uniform(-spread, 0.0, p.b_res.shape)
        blocks.append(p)
    return blocks


def run_stack(blocks, x, f=zero_branch, sk_iters: int = SK_ITERS) -> list[np.ndarray]:
    """Propagate one token state through ``blocks``, returning each layer's H_res."""
    out = []
    for p in blocks:
        x, maps = block_forward(p, x, f, sk_iters)
        out.append(maps.H_res)
    return out
