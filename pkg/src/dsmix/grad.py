"""Reverse-mode gradients of the block and a central-difference checker."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .birkhoff import PermBasis, build_basis
from .hyperblock import (
    PARAM_GROUPS,
    SK_ITERS,
    BlockParams,
    Branch,
    BranchBackward,
    ParamGrads,
    Variant,
    _Cache,
    forward_cached,
    random_params,
)
from .sinkhorn import sk_backward

# 1e-5 leaves entries with |grad| ~ 1e-7 dominated by rounding noise
FD_EPS = 1e-4
REL_FLOOR = 1e-8
DEFAULT_THRESHOLD = 1e-4


def _sum_to(g: np.ndarray, ndim: int) -> np.ndarray:
    """Sum a batched gradient over its leading axes."""
    extra = g.ndim - ndim
    return g.sum(axis=tuple(range(extra))) if extra > 0 else g


def res_logit_grad(p: BlockParams, cache: _Cache, dH_res: np.ndarray,
                   basis: PermBasis | None = None) -> np.ndarray:
    """Gradient with respect to the residual logits ``alpha_res * xn W_res + b_res``."""
    n = p.n
    lead = dH_res.shape[:-2]
    if p.variant is Variant.MHC:
        d_pre = sk_backward(cache.sk_steps, dH_res)
        d_logits = d_pre * cache.maps.pre_sk * cache.clip_mask
        return d_logits.reshape(lead + (n * n,))
    if p.variant is Variant.MHC_LITE:
        if basis is None:
            basis = build_basis(n)
        a = cache.maps.a_weights
        da = dH_res.reshape(lead + (n * n,)) @ basis.combo_matrix.T
        return a * (da - (a * da).sum(-1, keepdims=True))
    return dH_res.reshape(lead + (n * n,))


def backward_cached(p: BlockParams, cache: _Cache, f_backward: BranchBackward,
                    upstream: np.ndarray, basis: PermBasis | None = None
                    ) -> tuple[ParamGrads, np.ndarray]:
    x, maps = cache.x, cache.maps
    G = np.asarray(upstream, dtype=np.float64)
    if G.shape != x.shape:
        raise ValueError(f"upstream has shape {G.shape}, expected {x.shape}")

    dH_res = np.einsum("...ic,...jc->...ij", G, x)
    dx = np.swapaxes(maps.H_res, -1, -2) @ G
    dH_post = np.einsum("...ic,...c->...i", G, cache.y)
    dy = np.einsum("...i,...ic->...c", maps.H_post, G)
    dh = np.asarray(f_backward(cache.h, dy), dtype=np.float64)
    if dh.shape != cache.h.shape:
        raise ValueError(f"branch backward returned {dh.shape}, expected {cache.h.shape}")
    dx = dx + maps.H_pre[..., :, None] * dh[..., None, :]
    dH_pre = np.einsum("...ic,...c->...i", x, dh)

    dz = {
        "pre": dH_pre * maps.H_pre * (1.0 - maps.H_pre),
        "post": dH_post * maps.H_post * (1.0 - 0.5 * maps.H_post),
        "res": res_logit_grad(p, cache, dH_res, basis),
    }
    nC = cache.xn.shape[-1]
    xn2 = cache.xn.reshape(-1, nC)
    grads = {}
    dxn = np.zeros_like(cache.xn)
    for key in ("pre", "post", "res"):
        alpha = getattr(p, f"alpha_{key}")
        W = getattr(p, f"W_{key}")
        g = dz[key]
        grads[f"b_{key}"] = _sum_to(g, 1)
        grads[f"W_{key}"] = alpha * (xn2.T @ g.reshape(-1, W.shape[1]))
        grads[f"alpha_{key}"] = float((cache.proj[key] * g).sum())
        dxn = dxn + alpha * (g @ W.T)

    # xn = flat * r with r = (mean(flat^2) + eps)^(-1/2)
    r = cache.inv_rms
    dflat = r * dxn - (r ** 3 / nC) * (dxn * cache.flat).sum(-1, keepdims=True) * cache.flat
    dx = dx + dflat.reshape(x.shape)
    return BlockParams(p.variant, **grads), dx


def block_backward(p: BlockParams, x, f: Branch, f_backward: BranchBackward,
                   upstream, sk_iters: int = SK_ITERS,
                   basis: PermBasis | None = None) -> tuple[ParamGrads, np.ndarray]:
    """Gradients of ``<upstream, block_forward(p, x, f)>`` w.r.t. params and ``x``."""
    _, cache = forward_cached(p, x, f, sk_iters, basis)
    return backward_cached(p, cache, f_backward, upstream, basis)


def finite_diff_grad(loss: Callable[[BlockParams], float], p: BlockParams,
                     eps: float = FD_EPS) -> ParamGrads:
    """Central differences of ``loss`` over every scalar parameter."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    v0 = p.to_vector()
    g = np.empty_like(v0)
    for i in range(v0.size):
        v = v0.copy()
        v[i] = v0[i] + eps
        fp = loss(p.from_vector(v))
        v[i] = v0[i] - eps
        fm = loss(p.from_vector(v))
        g[i] = (fp - fm) / (2 * eps)
    return p.from_vector(g)


def finite_diff_linear(fn: Callable[[BlockParams], np.ndarray], upstream,
                       p: BlockParams, eps: float = FD_EPS) -> ParamGrads:
    """Central differences of ``<upstream, fn(p)>``.

    Outputs are differenced before the contraction, so entries untouched
    by a perturbation cancel exactly instead of feeding rounding noise
    from the full scalar loss.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    G = np.asarray(upstream, dtype=np.float64)
    v0 = p.to_vector()
    g = np.empty_like(v0)
    for i in range(v0.size):
        v = v0.copy()
        v[i] = v0[i] + eps
        fp = fn(p.from_vector(v))
        v[i] = v0[i] - eps
        fm = fn(p.from_vector(v))
        g[i] = np.sum(G * (fp - fm)) / (2 * eps)
    return p.from_vector(g)


def finite_diff_input(fn: Callable[[np.ndarray], np.ndarray], upstream, x,
                      eps: float = FD_EPS) -> np.ndarray:
    """Central differences of ``<upstream, fn(x)>`` with respect to ``x``."""
    G = np.asarray(upstream, dtype=np.float64)
    x0 = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x0)
    for idx in np.ndindex(x0.shape):
        xp = x0.copy()
        xp[idx] += eps
        xm = x0.copy()
        xm[idx] -= eps
        g[idx] = np.sum(G * (fn(xp) - fn(xm))) / (2 * eps)
    return g


def rel_error(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - b) / np.maximum(REL_FLOOR, np.abs(a) + np.abs(b))


def tanh_branch(rng: np.random.Generator, C: int) -> tuple[Branch, BranchBackward]:
    """``h -> tanh(h @ W)`` with a random ``W`` and its exact adjoint."""
    W = rng.normal(0.0, 1.0 / np.sqrt(C), (C, C))

    def f(h):
        return np.tanh(h @ W)

    def f_backward(h, dy):
        t = np.tanh(h @ W)
        return (dy * (1.0 - t * t)) @ W.T

    return f, f_backward


@dataclass
class GradCheckReport:
    variant: Variant
    seed: int
    errors: dict[str, float]
    threshold: float

    @property
    def passed(self) -> bool:
        return all(e <= self.threshold for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    def to_dict(self) -> dict:
        return {"variant": self.variant.value, "seed": self.seed,
                "threshold": self.threshold, "passed": self.passed,
                "errors": dict(self.errors)}

    def table(self) -> str:
        w = max(len(k) for k in self.errors)
        lines = [f"{'group':<{w}}  {'max_rel_err':>12}  status"]
        for k, e in self.errors.items():
            lines.append(f"{k:<{w}}  {e:12.3e}  {'pass' if e <= self.threshold else 'FAIL'}")
        return "\n".join(lines)


def grad_check(p: BlockParams, seed: int = 0, sk_iters: int = SK_ITERS,
               threshold: float | None = None, eps: float = FD_EPS) -> GradCheckReport:
    """Compare ``block_backward`` with central differences on a random probe.

    The probe draws the input state, a tanh branch, and the upstream
    gradient from ``seed``; the loss is ``<upstream, block_forward(...)>``.
    """
    rng = np.random.default_rng(seed)
    n, C = p.n, p.C
    x = rng.normal(size=(n, C))
    f, f_backward = tanh_branch(rng, C)
    G = rng.normal(size=(n, C))
    basis = build_basis(n) if p.variant is Variant.MHC_LITE else None

    def out_p(q):
        return forward_cached(q, x, f, sk_iters, basis)[0]

    def out_x(xx):
        return forward_cached(p, xx, f, sk_iters, basis)[0]

    grads, dx = block_backward(p, x, f, f_backward, G, sk_iters, basis)
    num = finite_diff_linear(out_p, G, p, eps)
    errors = {k: float(rel_error(grads.group(k), num.group(k)).max()) for k in PARAM_GROUPS}
    errors["input"] = float(rel_error(dx, finite_diff_input(out_x, G, x, eps)).max())
    if threshold is None:
        threshold = DEFAULT_THRESHOLD
    return GradCheckReport(p.variant, seed, errors, threshold)


def grad_check_seed(variant, seed: int, n: int = 4, C: int = 8, sk_iters: int = SK_ITERS,
                    threshold: float | None = None, eps: float = FD_EPS) -> GradCheckReport:
    """Grad check on ``random_params`` drawn from ``seed``.

    Parameters and probe come from separate streams so they are not
    correlated draws.
    """
    p = random_params(variant, n, C, np.random.default_rng((1, seed)))
    return grad_check(p, seed, sk_iters, threshold, eps)
