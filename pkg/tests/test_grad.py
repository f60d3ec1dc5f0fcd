import numpy as np
import pytest

from dsmix.birkhoff import build_basis
from dsmix.grad import (
    GradCheckReport,
    backward_cached,
    block_backward,
    finite_diff_grad,
    finite_diff_input,
    finite_diff_linear,
    grad_check,
    grad_check_seed,
    rel_error,
    res_logit_grad,
    tanh_branch,
)
from dsmix.hyperblock import (
    PARAM_GROUPS,
    Variant,
    block_forward,
    forward_cached,
    init_params,
    random_params,
    zero_branch,
)

ALL = list(Variant)


def _zero_adjoint(h, dy):
    return np.zeros_like(h)


def _probe(v, seed=0, n=4, C=8):
    rng = np.random.default_rng(seed)
    p = random_params(v, n, C, rng)
    f, fb = tanh_branch(rng, C)
    return p, rng.normal(size=(n, C)), f, fb, rng.normal(size=(n, C))


def test_lite_init_input_grad_is_column_sums():
    p = init_params(Variant.MHC_LITE, 4, 16)
    x = np.random.default_rng(0).normal(size=(4, 16))
    _, dx = block_backward(p, x, zero_branch, _zero_adjoint, np.ones((4, 16)))
    assert np.abs(dx - 1.0).max() <= 1e-10


@pytest.mark.parametrize("v", ALL)
def test_zero_upstream_zero_grads(v):
    p, x, f, fb, _ = _probe(v)
    g, dx = block_backward(p, x, f, fb, np.zeros_like(x))
    assert not g.to_vector().any() and not dx.any()


@pytest.mark.parametrize("v", ALL)
def test_alpha_res_grad_zero_at_init(v):
    p = init_params(v, 4, 8)
    rng = np.random.default_rng(1)
    f, fb = tanh_branch(rng, 8)
    g, _ = block_backward(p, rng.normal(size=(4, 8)), f, fb, rng.normal(size=(4, 8)))
    assert g.alpha_res == 0.0


def test_upstream_shape_checked():
    p, x, f, fb, _ = _probe(Variant.MHC)
    with pytest.raises(ValueError, match="upstream"):
        block_backward(p, x, f, fb, np.ones((4, 3)))


# --- finite differences -------------------------------------------------

def test_fd_constant_loss():
    p = init_params(Variant.MHC, 4, 4)
    assert not finite_diff_grad(lambda q: 3.0, p).to_vector().any()


def test_fd_quadratic():
    p = init_params(Variant.MHC_LITE, 2, 2)
    p.alpha_pre = 0.7
    g = finite_diff_grad(lambda q: q.alpha_pre ** 2, p, eps=1e-5)
    assert g.alpha_pre == pytest.approx(1.4, abs=1e-9)
    assert not np.delete(g.to_vector(), PARAM_GROUPS.index("alpha_pre") - len(PARAM_GROUPS)).any()


def test_fd_rejects_bad_eps():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda q: 0.0, init_params(Variant.MHC, 2, 2), eps=0.0)


def test_rel_error_floor():
    assert rel_error(0.0, 0.0) == 0.0
    assert rel_error(1e-12, 0.0) == pytest.approx(1e-4)
    assert rel_error(1.0, -1.0) == 1.0


def test_fd_scalar_loss_matches_analytic():
    # squared-error loss through the full block, via the plain scalar differencer
    p, x, f, fb, _ = _probe(Variant.MHC_LITE, seed=3)
    target = np.random.default_rng(4).normal(size=x.shape)

    def loss(q):
        return 0.5 * float(((block_forward(q, x, f)[0] - target) ** 2).sum())

    out, _ = block_forward(p, x, f)
    g, _ = block_backward(p, x, f, fb, out - target)
    num = finite_diff_grad(loss, p, eps=1e-5)
    assert rel_error(g.to_vector(), num.to_vector()).max() <= 1e-4


# --- grad_check ---------------------------------------------------------

@pytest.mark.parametrize("v,bound", [(Variant.MHC_LITE, 1e-5), (Variant.MHC, 1e-4),
                                     (Variant.UNCONSTRAINED, 1e-6)])
@pytest.mark.parametrize("seed", range(10))
def test_grad_check_per_variant_bounds(v, bound, seed):
    r = grad_check_seed(v, seed, n=4, C=8)
    assert set(r.errors) == set(PARAM_GROUPS) | {"input"}
    assert r.max_error <= bound, r.table()


@pytest.mark.parametrize("iters", [1, 2, 5])
def test_grad_check_short_sk(iters):
    p = random_params(Variant.MHC, 4, 4, np.random.default_rng(iters))
    assert grad_check(p, seed=iters, sk_iters=iters).passed


@pytest.mark.parametrize("v", ALL)
def test_backward_at_init_absolute(v):
    # At init many W_res entries are ~1e-9, below what the relative metric can
    # resolve against differencing noise, so compare absolute errors here.
    p = init_params(v, 4, 4)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 4))
    f, fb = tanh_branch(rng, 4)
    G = rng.normal(size=(4, 4))
    g, _ = block_backward(p, x, f, fb, G)
    num = finite_diff_linear(lambda q: forward_cached(q, x, f)[0], G, p)
    assert np.abs(g.to_vector() - num.to_vector()).max() <= 1e-8


def test_report_formatting():
    r = GradCheckReport(Variant.MHC, 3, {"W_pre": 1e-9, "input": 2e-3}, 1e-4)
    assert not r.passed and r.max_error == 2e-3
    assert "FAIL" in r.table().splitlines()[2]
    assert r.to_dict()["variant"] == "mhc"


# --- structure of the backward pass ------------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_softmax_logit_grad_sums_to_zero(seed):
    p, x, f, fb, G = _probe(Variant.MHC_LITE, seed)
    basis = build_basis(4)
    _, cache = forward_cached(p, x, f, basis=basis)
    dH = np.random.default_rng(seed + 100).normal(size=(4, 4))
    assert abs(res_logit_grad(p, cache, dH, basis).sum()) <= 1e-12


@pytest.mark.parametrize("v", ALL)
def test_batched_backward_sums_tokens(v):
    p, _, f, fb, _ = _probe(v, seed=5)
    rng = np.random.default_rng(6)
    xs, Gs = rng.normal(size=(3, 4, 8)), rng.normal(size=(3, 4, 8))
    g, dx = block_backward(p, xs, f, fb, Gs)
    parts = [block_backward(p, xs[t], f, fb, Gs[t]) for t in range(3)]
    np.testing.assert_allclose(g.to_vector(), sum(q.to_vector() for q, _ in parts),
                               rtol=1e-11, atol=1e-14)
    for t in range(3):
        np.testing.assert_allclose(dx[t], parts[t][1], rtol=1e-12, atol=1e-14)


def test_input_fd_helper():
    G = np.arange(6.0).reshape(2, 3)
    g = finite_diff_input(lambda x: 2 * x, G, np.zeros((2, 3)))
    np.testing.assert_allclose(g, 2 * G, rtol=1e-10)


def test_cached_backward_reuses_forward():
    p, x, f, fb, G = _probe(Variant.MHC, seed=7)
    _, cache = forward_cached(p, x, f)
    a = backward_cached(p, cache, fb, G)
    b = block_backward(p, x, f, fb, G)
    assert np.array_equal(a[0].to_vector(), b[0].to_vector())
