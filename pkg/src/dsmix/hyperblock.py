"""Multi-stream residual block with three residual-mixing variants.

A block carries ``n`` residual streams of width ``C`` and updates them as::

    x_next = H_res @ x + outer(H_post, f(H_pre @ x))

``H_pre`` and ``H_post`` are sigmoid gates computed from the RMS-normalized
flattened state. ``H_res`` depends on the variant:

* ``UNCONSTRAINED``: the raw reshaped logits (no constraint at all);
* ``MHC``: Sinkhorn-Knopp applied to ``exp`` of the reshaped logits;
* ``MHC_LITE``: softmax weights over all n! permutation matrices.

Every function accepts a single state of shape ``(n, C)`` or a stack
``(..., n, C)``; maps and gradients then carry the same leading axes.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .birkhoff import PermBasis, build_basis, combine
from .matcore import DSError, RMS_EPS, ds_error, sigmoid_map, softmax_map
from .sinkhorn import SKReport, SKStep, sk_forward_batch

SK_ITERS = 20
LOGIT_CLAMP = 40.0
INIT_ALPHA = 0.01
INIT_OFF_LOGIT = -8.0

Branch = Callable[[np.ndarray], np.ndarray]
BranchBackward = Callable[[np.ndarray, np.ndarray], np.ndarray]


class Variant(str, enum.Enum):
    UNCONSTRAINED = "unconstrained"
    MHC = "mhc"
    MHC_LITE = "mhc-lite"

    @classmethod
    def parse(cls, v) -> "Variant":
        if isinstance(v, cls):
            return v
        key = str(v).strip().lower().replace("_", "-")
        for member in cls:
            if member.value == key or member.name.lower().replace("_", "-") == key:
                return member
        raise ValueError(f"unknown variant {v!r}; choose from {[m.value for m in cls]}")


def res_width(variant: Variant, n: int) -> int:
    return math.factorial(n) if variant is Variant.MHC_LITE else n * n


ARRAY_FIELDS = ("W_pre", "W_post", "W_res", "b_pre", "b_post", "b_res")
SCALAR_FIELDS = ("alpha_pre", "alpha_post", "alpha_res")
PARAM_GROUPS = ARRAY_FIELDS + SCALAR_FIELDS


@dataclass
class BlockParams:
    """Learnable parameters of one block.

    ``W_*`` have shape ``(n*C, k)`` and ``b_*`` shape ``(k,)`` with
    ``k = n`` for the gates and ``k = n*n`` (``n!`` for ``MHC_LITE``) for
    the residual map. The same container holds gradients.
    """

    variant: Variant
    W_pre: np.ndarray
    W_post: np.ndarray
    W_res: np.ndarray
    b_pre: np.ndarray
    b_post: np.ndarray
    b_res: np.ndarray
    alpha_pre: float
    alpha_post: float
    alpha_res: float

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        for name in ARRAY_FIELDS:
            setattr(self, name, np.array(getattr(self, name), dtype=np.float64))
        for name in SCALAR_FIELDS:
            setattr(self, name, float(getattr(self, name)))
        self.validate()

    @property
    def n(self) -> int:
        return self.b_pre.shape[0]

    @property
    def C(self) -> int:
        return self.W_pre.shape[0] // self.n

    def validate(self) -> None:
        n = self.n
        nC = self.W_pre.shape[0]
        if n < 1 or nC % n:
            raise ValueError(f"W_pre rows ({nC}) must be a multiple of n={n}")
        r = res_width(self.variant, n)
        want = {"W_pre": (nC, n), "W_post": (nC, n), "W_res": (nC, r),
                "b_pre": (n,), "b_post": (n,), "b_res": (r,)}
        for name, shape in want.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"{name} has shape {got}, expected {shape} for {self.variant.value}")

    def copy(self) -> "BlockParams":
        return replace(self, **{k: getattr(self, k).copy() for k in ARRAY_FIELDS})

    def zeros_like(self) -> "BlockParams":
        return replace(self, **{k: np.zeros_like(getattr(self, k)) for k in ARRAY_FIELDS},
                       **{k: 0.0 for k in SCALAR_FIELDS})

    def group(self, name: str) -> np.ndarray:
        return np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.group(k).ravel() for k in PARAM_GROUPS])

    def from_vector(self, v) -> "BlockParams":
        v = np.asarray(v, dtype=np.float64)
        out, pos = {}, 0
        for k in PARAM_GROUPS:
            ref = self.group(k)
            chunk = v[pos:pos + ref.size]
            pos += ref.size
            out[k] = float(chunk[0]) if k in SCALAR_FIELDS else chunk.reshape(ref.shape).copy()
        if pos != v.size:
            raise ValueError(f"vector has {v.size} entries, expected {pos}")
        return replace(self, **out)

    def to_dict(self) -> dict:
        d = {"variant": self.variant.value, "n": self.n, "C": self.C,
             "res_width": self.b_res.shape[0]}
        for k in ARRAY_FIELDS:
            d[k] = getattr(self, k).tolist()
        for k in SCALAR_FIELDS:
            d[k] = getattr(self, k)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BlockParams":
        variant = Variant.parse(d["variant"])
        n, C = int(d["n"]), int(d["C"])
        kw = {}
        for k in ARRAY_FIELDS:
            a = np.array(d[k], dtype=np.float64)
            if k.startswith("W_"):
                a = a.reshape(n * C, -1)
            kw[k] = a
        kw.update({k: float(d[k]) for k in SCALAR_FIELDS})
        p = cls(variant=variant, **kw)
        if p.b_res.shape[0] != int(d.get("res_width", p.b_res.shape[0])):
            raise ValueError("res_width does not match b_res length")
        return p

    def to_json(self) -> str:
        # json emits floats with repr(), the shortest string that round-trips exactly
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "BlockParams":
        return cls.from_dict(json.loads(text))


ParamGrads = BlockParams


def init_params(variant, n: int = 4, C: int = 16, pick_index: int = 0) -> BlockParams:
    """Parameters under which the block behaves like a plain residual connection.

    Weights start at zero, gate scales at 0.01, gate biases at -1 except
    ``+1`` at ``pick_index``. The residual bias puts logit 0 on the identity
    (diagonal for ``MHC``, permutation 0 for ``MHC_LITE``) and -8 everywhere
    else. ``UNCONSTRAINED`` uses its bias as the matrix itself, so it starts
    at the flattened identity.
    """
    variant = Variant.parse(variant)
    if not 0 <= pick_index < n:
        raise ValueError(f"pick_index must be in [0, {n}), got {pick_index}")
    nC, r = n * C, res_width(variant, n)
    gate = np.full(n, -1.0)
    gate[pick_index] = 1.0
    if variant is Variant.MHC_LITE:
        b_res = np.full(r, INIT_OFF_LOGIT)
        b_res[0] = 0.0
    elif variant is Variant.UNCONSTRAINED:
        b_res = np.eye(n).ravel()
    else:
        b_res = np.full((n, n), INIT_OFF_LOGIT)
        np.fill_diagonal(b_res, 0.0)
        b_res = b_res.ravel()
    return BlockParams(variant, np.zeros((nC, n)), np.zeros((nC, n)), np.zeros((nC, r)),
                       gate, gate.copy(), b_res,
                       INIT_ALPHA, INIT_ALPHA, INIT_ALPHA)


def random_params(variant, n: int, C: int, rng: np.random.Generator,
                  w_scale: float = 1.0) -> BlockParams:
    """Dense random parameters with O(1) logits, for property and gradient tests.

    Weights are drawn with standard deviation ``w_scale / sqrt(n*C)`` so the
    projections of a unit-RMS state stay O(w_scale) whatever the width.
    """
    variant = Variant.parse(variant)
    nC, r = n * C, res_width(variant, n)
    sd = w_scale / np.sqrt(nC)
    return BlockParams(
        variant,
        rng.normal(0, sd, (nC, n)), rng.normal(0, sd, (nC, n)),
        rng.normal(0, sd, (nC, r)),
        rng.normal(0, 1, n), rng.normal(0, 1, n), rng.normal(0, 1, r),
        rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5))


@dataclass
class MixMaps:
    H_pre: np.ndarray
    H_post: np.ndarray
    H_res: np.ndarray
    a_weights: np.ndarray | None = None
    sk_report: SKReport | None = None
    pre_sk: np.ndarray | None = None

    def res_error(self) -> DSError:
        return ds_error(self.H_res)


@dataclass
class _Cache:
    x: np.ndarray
    flat: np.ndarray
    inv_rms: np.ndarray
    xn: np.ndarray
    proj: dict
    maps: MixMaps
    clip_mask: np.ndarray | None = None
    sk_steps: list[SKStep] = field(default_factory=list)
    h: np.ndarray | None = None
    y: np.ndarray | None = None


def _check_state(p: BlockParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2:] != (p.n, p.C):
        raise ValueError(f"state has shape {x.shape}, expected (..., {p.n}, {p.C})")
    return x


def _maps(p: BlockParams, x: np.ndarray, sk_iters: int, basis: PermBasis | None,
          report: bool = True) -> _Cache:
    n = p.n
    flat = x.reshape(x.shape[:-2] + (n * p.C,))
    inv_rms = 1.0 / np.sqrt(np.mean(flat * flat, axis=-1, keepdims=True) + RMS_EPS)
    xn = flat * inv_rms
    proj = {"pre": xn @ p.W_pre, "post": xn @ p.W_post, "res": xn @ p.W_res}
    H_pre = sigmoid_map(p.alpha_pre * proj["pre"] + p.b_pre)
    H_post = 2.0 * sigmoid_map(p.alpha_post * proj["post"] + p.b_post)
    z_res = p.alpha_res * proj["res"] + p.b_res
    cache = _Cache(x, flat, inv_rms, xn, proj, MixMaps(H_pre, H_post, None))

    if p.variant is Variant.MHC:
        if sk_iters < 1:
            raise ValueError("sk_iters must be >= 1")
        logits = z_res.reshape(z_res.shape[:-1] + (n, n))
        cache.clip_mask = np.abs(logits) <= LOGIT_CLAMP
        pre_sk = np.exp(np.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP))
        H_res, cache.sk_steps = sk_forward_batch(pre_sk, sk_iters)
        cache.maps.pre_sk = pre_sk
        if report and x.ndim == 2:
            trace = [ds_error(st.out) for st in cache.sk_steps]
            cache.maps.sk_report = SKReport(H_res, sk_iters, trace,
                                            trace[-1].total <= 0.0, cache.sk_steps)
    elif p.variant is Variant.MHC_LITE:
        if basis is None:
            basis = build_basis(n)
        a = softmax_map(z_res)
        H_res = combine(basis, a)
        cache.maps.a_weights = a
    else:
        H_res = z_res.reshape(z_res.shape[:-1] + (n, n))
    cache.maps.H_res = H_res
    return cache


def compute_maps(p: BlockParams, x, sk_iters: int = SK_ITERS,
                 basis: PermBasis | None = None) -> MixMaps:
    """Gates and residual map for a state ``(n, C)`` or a stack of them."""
    return _maps(p, _check_state(p, x), sk_iters, basis).maps


def apply_maps(maps: MixMaps, x: np.ndarray, f: Branch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    h = np.einsum("...i,...ic->...c", maps.H_pre, x)
    y = np.asarray(f(h), dtype=np.float64)
    if y.shape != h.shape:
        raise ValueError(f"branch returned shape {y.shape}, expected {h.shape}")
    out = maps.H_res @ x + maps.H_post[..., :, None] * y[..., None, :]
    return out, h, y


def forward_cached(p: BlockParams, x, f: Branch, sk_iters: int = SK_ITERS,
                   basis: PermBasis | None = None,
                   report: bool = False) -> tuple[np.ndarray, _Cache]:
    """Forward pass that also returns the intermediates needed by the backward pass.

    The per-iteration SK error trace is only assembled when ``report`` is set.
    """
    x = _check_state(p, x)
    cache = _maps(p, x, sk_iters, basis, report)
    out, cache.h, cache.y = apply_maps(cache.maps, x, f)
    return out, cache


def block_forward(p: BlockParams, x, f: Branch, sk_iters: int = SK_ITERS,
                  basis: PermBasis | None = None) -> tuple[np.ndarray, MixMaps]:
    out, cache = forward_cached(p, x, f, sk_iters, basis, report=True)
    return out, cache.maps


def identity_branch(h: np.ndarray) -> np.ndarray:
    return h


def zero_branch(h: np.ndarray) -> np.ndarray:
    return np.zeros_like(h)
