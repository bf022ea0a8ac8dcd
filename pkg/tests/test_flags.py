import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distflag.flags import (
    C3_SIZES,
    C3_TABLE,
    DerivedFlag,
    SymbolError,
    c3_model_algebra,
    check_c3_symbol,
    frobenius_check,
    frobenius_integrable,
    growth_csv,
    growth_vector_at,
    growth_vectors,
    symbol_algebra_at,
    weak_derived_flag,
)
from distflag.geometry import Chart
from distflag.models import builtin_model, epsilon_family

RNG = np.random.default_rng(11)
X_SAMPLES = RNG.uniform(-1, 1, size=(20, 7))
Z_SAMPLES = RNG.uniform(-1, 1, size=(20, 9))


@pytest.mark.parametrize("name", ["grassmannian", "elliptic-nilpotent"])
def test_distribution_growth_is_4_7(name):
    flag = weak_derived_flag(builtin_model(name).frame)
    for p in X_SAMPLES[:5]:
        g = growth_vector_at(flag, p)
        assert str(g) == "4-7" and g.complete


def test_integrable_frame_growth_stalls():
    ch = Chart(("a", "b", "c"))
    flag = DerivedFlag([ch.partial("a"), ch.partial("b")])
    g = growth_vector_at(flag, np.zeros(3))
    assert g.ranks == (2,) and not g.complete


def test_generators_dedupe_up_to_rational_scaling():
    ch = Chart(("a", "b", "c"))
    X = ch.field({"a": 1})
    Y = ch.field({"b": 1, "c": "a"})
    flag = DerivedFlag([X, Y, Y * 3])
    assert len(flag.base) == 2
    assert len(flag.new_at(2)) == 1


def test_prolongation_flag_level_sizes(prolong_eps0, prolong_eps1, prolong_grass):
    sizes = lambda P: [len(P.flag().new_at(r)) for r in range(1, 6)]
    assert sizes(prolong_eps0) == [3, 2, 2, 1, 1]
    assert sizes(prolong_grass) == [3, 2, 2, 1, 1]
    assert sizes(prolong_eps1)[:4] == [3, 2, 2, 2]


def test_parallel_growth_matches_serial(prolong_eps1, monkeypatch):
    monkeypatch.setenv("DISTFLAG_THREADS", "4")
    flag = prolong_eps1.flag()
    par = growth_vectors(flag, Z_SAMPLES)
    ser = [growth_vector_at(flag, p) for p in Z_SAMPLES]
    assert [g.ranks for g in par] == [g.ranks for g in ser]
    csv_text = growth_csv(par, prolong_eps1.chart.coords)
    assert csv_text.splitlines()[0].endswith(",growth")
    assert len(csv_text.splitlines()) == len(Z_SAMPLES) + 1


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_growth_invariant_under_frame_recombination(seed):
    # replace (zeta1, zeta2, zeta3) by an invertible polynomial recombination
    P = _P0()
    rng = np.random.default_rng(seed)
    z1, z2, z3 = P.zeta[:3]
    ch = P.chart
    c = [int(v) for v in rng.integers(-3, 4, size=4)]
    f = ch.var("x") * c[0] + ch.var("theta") * c[1]
    g = ch.var("phi") * c[2] + c[3]
    recombined = [z1 + z2 * f, z2 * 2 + z3 * g, z3 - z1]
    pt = rng.uniform(-1, 1, size=9)
    assert growth_vector_at(DerivedFlag(recombined), pt).ranks == growth_vector_at(P.flag(), pt).ranks


_CACHE = {}


def _P0():
    if "p" not in _CACHE:
        from distflag.prolong import build_prolongation

        _CACHE["p"] = build_prolongation(epsilon_family(0))
    return _CACHE["p"]


def test_c3_model_table_is_a_lie_algebra():
    S = c3_model_algebra()
    assert S.sizes == C3_SIZES
    assert S.antisymmetry_residual() == 0
    assert S.grading_residual() == 0
    assert S.jacobi_residual() == 0


def test_c3_table_matches_generator_definitions():
    # v4 = [v1,v2], v5 = [v2,v3], v6 = [v1,v5], v7 = [v2,v5], v8 = [v2,v6], v9 = [v1,v8]
    assert C3_TABLE[(0, 1)] == {3: 1}
    assert C3_TABLE[(1, 2)] == {4: 1}
    assert C3_TABLE[(0, 4)] == {5: 1}
    assert C3_TABLE[(1, 4)] == {6: 1}
    assert C3_TABLE[(1, 5)] == {7: 1}
    assert C3_TABLE[(0, 7)] == {8: 1}


def test_symbol_algebra_of_flat_prolongation(prolong_eps0):
    for p in Z_SAMPLES[:5]:
        S = symbol_algebra_at(prolong_eps0.flag(), p)
        assert S.sizes == C3_SIZES
        assert S.antisymmetry_residual() < 1e-12
        assert S.grading_residual() == 0
        assert S.jacobi_residual() < 1e-9
        w = check_c3_symbol(S)
        assert w.found, w.diagnostic
        assert w.table_error < 1e-8


def test_symbol_algebra_of_perturbed_prolongation(prolong_eps1):
    z = np.array([0, 0, 0, 0, 0, 0, 0, 1.0, 0.0])
    S = symbol_algebra_at(prolong_eps1.flag(), z)
    assert S.sizes == (3, 2, 2, 2)
    assert S.jacobi_residual() < 1e-9
    w = check_c3_symbol(S)
    assert not w.found and "grading" in w.diagnostic


def test_symbol_needs_full_growth():
    ch = Chart(("a", "b", "c"))
    with pytest.raises(SymbolError):
        symbol_algebra_at(DerivedFlag([ch.partial("a"), ch.partial("b")]), np.zeros(3))


def test_frobenius_basic():
    ch = Chart(("a", "b", "c"))
    pts = np.random.default_rng(0).uniform(-1, 1, size=(10, 3))
    assert frobenius_integrable([ch.partial("a"), ch.partial("b")], pts)
    contact = [ch.field({"a": 1, "c": "b"}), ch.partial("b")]
    rep = frobenius_check(contact, pts)
    assert not rep.integrable and rep.worst_pair == (0, 1)


@settings(max_examples=50)
@given(st.integers(-3, 3).filter(bool), st.integers(-3, 3), st.integers(-3, 3).filter(bool))
def test_frobenius_invariant_under_recombination(a, b, d):
    ch = Chart(("a", "b", "c"))
    pts = np.random.default_rng(1).uniform(-1, 1, size=(8, 3))
    X, Y = ch.partial("a"), ch.field({"b": 1, "c": "a"})
    base = frobenius_integrable([X, Y], pts)
    # (X, Y) -> (aX + bY, dY) has the same span wherever a*d != 0
    assert frobenius_integrable([X * a + Y * b, Y * d], pts) == base
    Xi, Yi = ch.partial("a"), ch.partial("c")
    assert frobenius_integrable([Xi * a + Yi * b, Yi * d], pts)


def test_frobenius_reports_dependent_generators():
    ch = Chart(("a", "b"))
    rep = frobenius_check([ch.partial("a"), ch.partial("a") * 2], np.zeros((1, 2)))
    assert not rep.integrable and "dependent" in rep.diagnostic


def test_rank_two_subsystem_not_integrable(prolong_eps0):
    z = prolong_eps0.zeta
    assert not frobenius_integrable([z[1], z[2]], Z_SAMPLES)


def test_rank_four_subsystem_integrable(prolong_eps0):
    z = prolong_eps0.zeta
    gens = [z[1], z[2], z[4], z[6]]
    assert frobenius_integrable(gens, Z_SAMPLES)
    # growth of the rank-two system inside it: 2, 3, 4
    assert DerivedFlag([z[1], z[2]]).ranks_at(Z_SAMPLES[0], stop_at_full=False)[:3] == [2, 3, 4]
