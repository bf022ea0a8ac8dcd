import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import SMALL_CHART, fields, polys, sympy_bracket, to_sympy
from distflag.geometry import (
    Chart,
    FieldEvaluator,
    Frame,
    batched_rank,
    lie_bracket,
    numerical_rank,
    parallel_map,
    span_residual,
)

C = SMALL_CHART
F = fields(C)


@settings(max_examples=100)
@given(F, F)
def test_bracket_antisymmetry(X, Y):
    assert lie_bracket(X, Y) == -lie_bracket(Y, X)
    assert lie_bracket(X, X).is_zero()


@settings(max_examples=100, deadline=None)
@given(F, F, F)
def test_bracket_jacobi(X, Y, Z):
    total = lie_bracket(X, lie_bracket(Y, Z)) + lie_bracket(Y, lie_bracket(Z, X)) + lie_bracket(Z, lie_bracket(X, Y))
    assert total.is_zero()


@settings(max_examples=100)
@given(F, F, polys())
def test_bracket_leibniz(X, Y, f):
    # [X, fY] = X(f) Y + f [X, Y]
    assert lie_bracket(X, Y * f) == Y * X.apply(f) + lie_bracket(X, Y) * f


@settings(max_examples=50)
@given(F, F)
def test_bracket_matches_sympy(X, Y):
    want = sympy_bracket(X, Y)
    got = [to_sympy(p) for p in lie_bracket(X, Y).components]
    assert all(sp.expand(g - w) == 0 for g, w in zip(got, want))


def test_coordinate_fields_commute():
    assert lie_bracket(C.partial("a"), C.partial("b")).is_zero()
    X = C.field({"a": 1, "c": "b"})
    Y = C.partial("b")
    assert lie_bracket(X, Y) == C.field({"c": -1})


def test_chart_mismatch_refused():
    other = Chart(("x", "y", "z"))
    with pytest.raises(ValueError):
        lie_bracket(C.partial("a"), other.partial("x"))


def test_symbolic_parameters_block_numeric_evaluation():
    ch = Chart(("a", "b"), ("eps",))
    X = ch.field({"a": "eps"})
    with pytest.raises(ValueError):
        FieldEvaluator([X])
    assert FieldEvaluator([X.subs({"eps": 2})])(np.array([0.3, 0.4]))[0, 0] == 2.0


@settings(max_examples=30)
@given(st.lists(F, min_size=1, max_size=3))
def test_batched_evaluator_matches_componentwise(fs):
    pts = np.random.default_rng(1).uniform(-1, 1, size=(4, 3))
    got = FieldEvaluator(fs)(pts)
    for k, p in enumerate(pts):
        for j, X in enumerate(fs):
            assert np.allclose(got[k, :, j], [c.eval(p) for c in X.components], rtol=1e-12, atol=1e-12)


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


@settings(max_examples=100)
@given(arrays(float, (5, 3), elements=finite), st.integers(0, 2**31 - 1))
def test_rank_invariant_under_invertible_recombination(M, seed):
    rng = np.random.default_rng(seed)
    Q1, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    Q2, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    assert numerical_rank(M) == numerical_rank(Q1 @ M @ Q2)


def test_rank_tolerance_is_relative():
    M = np.diag([1.0, 1e-6, 1e-12])
    assert numerical_rank(M) == 2
    assert numerical_rank(1e8 * M) == 2
    assert numerical_rank(M, tol_rel=1e-5) == 1
    assert numerical_rank(np.zeros((3, 3))) == 0


def test_batched_rank_agrees_with_single():
    mats = np.random.default_rng(2).normal(size=(20, 4, 3))
    mats[::3, :, 2] = mats[::3, :, 0] + mats[::3, :, 1]
    assert list(batched_rank(mats)) == [numerical_rank(m) for m in mats]


def test_span_residual():
    G = np.eye(3)[:, :2]
    assert span_residual(G, np.array([1.0, 2.0, 0.0])) == pytest.approx(0.0, abs=1e-15)
    assert span_residual(G, np.array([0.0, 0.0, 3.0])) == pytest.approx(3.0)


def test_frame_rank_violations():
    X, Y = C.partial("a"), C.field({"a": "b"})
    fr = Frame(C, (X, Y), 2)
    pts = np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    bad = fr.rank_violations(pts)
    assert len(bad) == 2  # X and bY are always parallel


def test_parallel_map_preserves_order(monkeypatch):
    monkeypatch.setenv("DISTFLAG_THREADS", "3")
    assert parallel_map(lambda v: v * v, range(10)) == [v * v for v in range(10)]
