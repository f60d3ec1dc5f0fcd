import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dsmix.birkhoff import build_basis, combine, random_simplex
from dsmix.matcore import DomainError, col_sums, ds_error, row_sums
from dsmix.sinkhorn import (
    adverse_matrix,
    sk_backward,
    sk_forward_batch,
    sk_normalize,
    sk_step,
)

# Exact-rational reference for 20 iterations on adverse_matrix(1e-13)
ADVERSE_SK20 = np.array([
    [0.909868880094482, 0.04506555995275903, 0.04506555995275903],
    [0.909868880094482, 0.04506555995275903, 0.04506555995275903],
    [2.0189894035451289e-25, 0.5, 0.5],
])
# and for a single iteration
ADVERSE_SK1_COLSUMS = (1.99999999999925, 0.500000000000375, 0.500000000000375)

pos_mats = arrays(np.float64, st.tuples(st.integers(1, 5)).map(lambda t: (t[0], t[0])),
                  elements=st.floats(1e-3, 1e3))


def _well_conditioned(seed, n=4):
    # entries in [0.1, 1] give relative range >= 0.1
    return np.random.default_rng(seed).uniform(0.1, 1.0, (n, n))


# --- sk_step ------------------------------------------------------------

def test_step_fixed_point_and_scaling():
    assert np.array_equal(sk_step(np.eye(3)), np.eye(3))
    assert np.array_equal(sk_step(2 * np.eye(3)), np.eye(3))


def test_step_adverse_rows_exact_columns_off():
    out = sk_step(adverse_matrix())
    np.testing.assert_allclose(row_sums(out), 1.0, atol=1e-15)
    np.testing.assert_allclose(col_sums(out), ADVERSE_SK1_COLSUMS, rtol=1e-13)


@pytest.mark.parametrize("m,where", [
    (np.array([[1.0, 0.0], [1.0, 0.0]]), "column 1"),
    (np.array([[0.0, 0.0], [1.0, 1.0]]), "row 0"),
])
def test_step_zero_sum_names_index(m, where):
    with pytest.raises(DomainError, match=where):
        sk_step(m)


@pytest.mark.parametrize("bad,exc", [(np.ones((2, 3)), ValueError), (-np.eye(2), DomainError)])
def test_step_rejects(bad, exc):
    with pytest.raises(exc):
        sk_step(bad)


@settings(max_examples=200)
@given(pos_mats)
def test_step_rows_sum_to_one(m):
    out = sk_step(m)
    assert np.abs(row_sums(out) - 1).max() <= 1e-12
    assert (out >= 0).all() and np.isfinite(out).all()


# --- sk_normalize -------------------------------------------------------

def test_adverse_twenty_iterations():
    rep = sk_normalize(adverse_matrix(1e-13), max_iters=20, tol=0.0)
    assert rep.iterations_run == 20 and len(rep.l1_trace) == 20
    assert not rep.converged
    np.testing.assert_allclose(rep.result, ADVERSE_SK20, rtol=1e-12, atol=1e-18)
    np.testing.assert_allclose(rep.result, [[0.91, 0.045, 0.045]] * 2 + [[0, 0.5, 0.5]], atol=0.01)
    assert rep.final_error == ds_error(rep.result)


def test_ds_input_converges_at_once():
    m = combine(build_basis(4), random_simplex(np.random.default_rng(3), 24))
    rep = sk_normalize(m, 20, tol=1e-12)
    assert rep.converged and rep.iterations_run == 1
    assert np.abs(rep.result - m).max() <= 1e-14


def test_exact_ds_input_converges_with_zero_tol():
    rep = sk_normalize(np.full((4, 4), 0.25), 20, tol=0.0)
    assert rep.converged and rep.iterations_run == 1


@pytest.mark.parametrize("seed", range(100))
def test_well_conditioned_converges_in_budget(seed):
    m = _well_conditioned(seed)
    short = sk_normalize(m, 20)
    long = sk_normalize(m, 1000)
    assert short.final_error.total <= 1e-6
    assert long.final_error.total <= 1e-14
    assert np.abs(short.result - long.result).max() <= 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_trace_brackets(seed):
    rng = np.random.default_rng(seed)
    m = np.exp(rng.uniform(-6, 0, (4, 4)))
    tr = sk_normalize(m, 1000).l1_trace  # may stop early on an exact zero error
    assert tr[-1].total <= tr[min(19, len(tr) - 1)].total <= tr[0].total


@pytest.mark.parametrize("seed", range(10))
def test_limit_invariant_to_diagonal_prescaling(seed):
    rng = np.random.default_rng(seed)
    m = rng.uniform(0.05, 1.0, (4, 4))
    d1, d2 = rng.uniform(0.1, 10, 4), rng.uniform(0.1, 10, 4)
    a = sk_normalize(m, 1000).result
    b = sk_normalize(d1[:, None] * m * d2[None, :], 1000).result
    assert np.abs(a - b).max() <= 1e-8


@pytest.mark.parametrize("kw", [{"max_iters": 0}, {"tol": -1.0}])
def test_normalize_rejects_bad_budget(kw):
    with pytest.raises(ValueError):
        sk_normalize(np.eye(2), **kw)


def test_batch_matches_single():
    rng = np.random.default_rng(0)
    ms = np.exp(rng.normal(size=(5, 4, 4)))
    out, steps = sk_forward_batch(ms, 20)
    assert len(steps) == 20
    for k in range(5):
        np.testing.assert_allclose(out[k], sk_normalize(ms[k], 20).result, rtol=1e-14)


# --- backward -----------------------------------------------------------

def _one_iter_jacobian(m):
    """d out[i,j] / d m[p,q] for out = (m / c) / r, written out by hand."""
    n = m.shape[0]
    c = m.sum(0)
    r = (m / c).sum(1)
    J = np.zeros((n, n, n, n))
    for i in range(n):
        for j in range(n):
            for p in range(n):
                for q in range(n):
                    dr = (i == p) / c[q] - m[i, q] / c[q] ** 2
                    J[i, j, p, q] = ((i == p) * (j == q) / (c[j] * r[i])
                                     - m[i, j] * (j == q) / (c[j] ** 2 * r[i])
                                     - m[i, j] / (c[j] * r[i] ** 2) * dr)
    return J


@pytest.mark.parametrize("seed", range(5))
def test_backward_one_iteration_matches_hand_adjoint(seed):
    rng = np.random.default_rng(seed)
    m = np.exp(rng.normal(size=(4, 4)))
    G = rng.normal(size=(4, 4))
    _, steps = sk_forward_batch(m, 1)
    want = np.einsum("ij,ijpq->pq", G, _one_iter_jacobian(m))
    assert np.abs(sk_backward(steps, G) - want).max() <= 1e-12


@pytest.mark.parametrize("iters", [1, 3, 20])
def test_backward_annihilates_column_scaling(iters):
    # the first column pass removes any column rescaling of the input
    rng = np.random.default_rng(iters)
    m = np.exp(rng.normal(size=(4, 4)))
    _, steps = sk_forward_batch(m, iters)
    g = sk_backward(steps, rng.normal(size=(4, 4)))
    assert np.abs((g * m).sum(0)).max() <= 1e-12


def test_adverse_log_range():
    assert math.log(adverse_matrix(1e-13).max() / 1e-13) == pytest.approx(13 * math.log(10))
