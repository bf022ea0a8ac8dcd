import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from distflag.geometry import lie_bracket
from distflag.models import epsilon_family
from distflag.prolong import (
    C3_GROWTH,
    CHART_PERMUTATIONS,
    REGULAR_GROWTH,
    ChartBoundaryError,
    GridSpec,
    ProlongationError,
    best_chart,
    build_prolongation,
    c3_locus_scan,
    cone_vector,
    direction_type,
    fiber_coords,
    numeric_c_d,
    transition,
)

RNG = np.random.default_rng(21)


def xi_lift(P, k, coeff=1):
    """k-th field of the model (1-based) on the prolonged chart, times a polynomial in the chart ring."""
    f = P.model.fields[k - 1].lift(P.chart)
    return f * (P.chart.parse(coeff) if isinstance(coeff, str) else coeff)


def bracket_xi(P, i, j):
    return lie_bracket(P.model.fields[i - 1], P.model.fields[j - 1]).lift(P.chart)


def test_c_function_symbolic(prolong_symbolic):
    P = prolong_symbolic
    assert P.c_fn == P.chart.parse("-3*eps*(phi + 1)*theta")
    assert P.d_fn == P.chart.parse("-3*eps*(phi + 1)")


def test_c_function_sympy_oracle(eps_symbolic):
    # independent route: rebuild the cascade in sympy and solve the linear system there
    coords = sp.symbols("x y s t z w u theta phi")
    eps = sp.Symbol("eps")
    loc = {str(c): c for c in coords} | {"eps": eps}
    xi = []
    for f in eps_symbolic.fields:
        comps = [sp.sympify(str(p).replace("^", "**"), locals=loc) for p in f.components]
        xi.append(sp.Matrix(comps + [0, 0]))
    th, ph = coords[-2], coords[-1]

    def br(X, Y):
        return sp.Matrix([sum(X[i] * sp.diff(Y[k], coords[i]) - Y[i] * sp.diff(X[k], coords[i]) for i in range(9))
                          for k in range(9)]).applyfunc(sp.expand)

    z1 = sp.Matrix([0] * 7 + [1, 0])
    z3 = sp.Matrix([0] * 8 + [1])
    z2 = xi[0] + th * xi[1] + ph * xi[2] + th * ph * xi[3]
    z4, z5 = br(z1, z2), br(z2, z3)
    z6, z7 = br(z1, z5), br(z2, z5)
    z8 = br(z2, z6)
    z9 = br(xi[1], xi[3])
    M = sp.Matrix.hstack(z1, z2, z3, z4, z5, z6, z7, z8, z9)
    sol = M.LUsolve(br(z2, z7)).applyfunc(sp.factor)
    c, d = sol[8], sol[7]
    assert sp.expand(c - (-3 * eps * (ph + 1) * th)) == 0
    assert sp.expand(d - (-3 * eps * (ph + 1))) == 0


def test_zeta_cascade_goldens(prolong_symbolic):
    P = prolong_symbolic
    z = P.zeta
    X = lambda k, c=1: xi_lift(P, k, c)
    assert z[3] == X(2) + X(4, "phi")
    assert z[4] == -X(3) - X(4, "theta")
    assert z[5] == -X(4)
    xi5, xi6, xi7 = bracket_xi(P, 1, 3), bracket_xi(P, 1, 4), bracket_xi(P, 2, 4)
    th = P.chart.var("theta")
    # the displayed zeta_7 has +xi5; the computed bracket has -xi5
    assert z[6] == -xi5 - xi6 * (2 * th) - xi7 * (th * th)
    assert z[7] == -xi6 - xi7 * th
    assert lie_bracket(z[0], z[2]).is_zero()
    assert lie_bracket(z[0], z[3]).is_zero()
    assert lie_bracket(z[1], z[3]).is_zero()
    assert lie_bracket(z[2], z[3]) == X(4)
    assert lie_bracket(z[0], z[5]).is_zero()
    assert lie_bracket(z[0], z[6]) == (-xi6 - xi7 * th) * 2
    assert lie_bracket(z[2], z[5]).is_zero() and lie_bracket(z[2], z[6]).is_zero()
    assert lie_bracket(z[0], z[7]) == -xi7


def test_flat_and_grassmannian_have_no_c(prolong_eps0, prolong_grass):
    for P in (prolong_eps0, prolong_grass):
        assert P.c_fn is not None and P.c_fn.is_zero()
        assert P.d_fn.is_zero()


def test_numeric_c_d_matches_symbolic(prolong_eps1):
    for z in RNG.uniform(-1, 1, size=(10, 9)):
        c, d = numeric_c_d(prolong_eps1, z)
        assert c == pytest.approx(prolong_eps1.c_fn.eval(z), abs=1e-9)
        assert d == pytest.approx(prolong_eps1.d_fn.eval(z), abs=1e-9)


def test_other_charts(eps1):
    for k in (2, 3, 4):
        P = build_prolongation(eps1, k)
        assert P.c_fn is not None
        for z in RNG.uniform(-1, 1, size=(5, 9)):
            assert str(P.growth_at(z)) in ("3-5-7-9", "3-5-7-8-9")


def test_growth_goldens(prolong_eps0, prolong_grass, prolong_eps1):
    for P in (prolong_eps0, prolong_grass):
        for z in RNG.uniform(-1, 1, size=(20, 9)):
            assert P.growth_at(z).ranks == C3_GROWTH
    for z in RNG.uniform(-1, 1, size=(20, 9)):
        if abs(z[7]) > 0.1 and abs(z[8] + 1) > 0.1:
            assert prolong_eps1.growth_at(z).ranks == REGULAR_GROWTH


def test_growth_drops_exactly_on_c_zero_set(prolong_eps1):
    for th, ph in [(0.0, 0.3), (0.7, -1.0), (0.0, -1.0), (-1.2, -1.0)]:
        assert prolong_eps1.growth_at([0.1] * 7 + [th, ph]).ranks == C3_GROWTH


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_growth_gauge_independence(seed):
    rng = np.random.default_rng(seed)
    names = ["x", "y", "theta", "phi", "1"]
    a = " + ".join(f"{int(c)}*{n}" for c, n in zip(rng.integers(-2, 3, 5), names))
    b = " + ".join(f"{int(c)}*{n}" for c, n in zip(rng.integers(-2, 3, 5), names[::-1]))
    eps = int(rng.integers(0, 2))
    base = _plain(eps)
    P = build_prolongation(base.model, 1, a, b, check_adapted=False)
    z = rng.uniform(-1, 1, size=9)
    assert P.growth_at(z).ranks == base.growth_at(z).ranks
    # c itself does not see the gauge on this family
    assert P.c_fn == base.c_fn


_PLAIN = {}


def _plain(eps):
    if eps not in _PLAIN:
        _PLAIN[eps] = build_prolongation(epsilon_family(eps))
    return _PLAIN[eps]


@settings(max_examples=100)
@given(st.sampled_from([1, 2, 3, 4]), st.floats(-5, 5), st.floats(-5, 5))
def test_cone_vector_and_fiber_coords_round_trip(k, th, ph):
    u = cone_vector(k, th, ph)
    assert abs(u[0] * u[3] - u[1] * u[2]) <= 1e-12 * max(1.0, u @ u)
    th2, ph2 = fiber_coords(k, u)
    assert th2 == pytest.approx(th, abs=1e-12) and ph2 == pytest.approx(ph, abs=1e-12)
    assert fiber_coords(k, -3.5 * u) == pytest.approx((th, ph), abs=1e-12)


@settings(max_examples=100)
@given(st.sampled_from([1, 2, 3, 4]), st.sampled_from([1, 2, 3, 4]),
       st.floats(0.2, 3), st.floats(0.2, 3))
def test_chart_transitions_compose(a, b, th, ph):
    z = np.concatenate([RNG.uniform(-1, 1, 7), [th, ph]])
    w = transition(z, a, b)
    assert np.allclose(transition(w, b, a), z, rtol=1e-10, atol=1e-12)
    ua, ub = cone_vector(a, th, ph), cone_vector(b, *w[-2:])
    assert abs(np.dot(ua, ub)) == pytest.approx(np.linalg.norm(ua) * np.linalg.norm(ub), rel=1e-10)


def test_chart_boundary_suggests_chart():
    u = np.array([0.0, 1.0, 0.0, 2.0])
    with pytest.raises(ChartBoundaryError) as err:
        fiber_coords(1, u)
    assert err.value.suggested_chart == best_chart(u)
    fiber_coords(err.value.suggested_chart, u)


def test_permutations_cover_every_leading_coefficient():
    assert sorted(p[0] for p in CHART_PERMUTATIONS.values()) == [0, 1, 2, 3]


def test_non_adapted_frame_refused(elliptic):
    with pytest.raises(ProlongationError, match="not adapted"):
        build_prolongation(elliptic)


def test_bad_chart_index(eps0):
    with pytest.raises(ProlongationError):
        build_prolongation(eps0, 5)


def test_direction_types(prolong_eps0, prolong_eps1):
    x = [0.0] * 7
    assert direction_type(prolong_eps0, x + [0.3, 0.4]).value == "C3"
    assert direction_type(prolong_eps1, x + [1.0, 0.0]).value == "Regular"
    mixed = direction_type(prolong_eps1, x + [0.0, 0.5])
    assert mixed.value == "Mixed"
    assert set(mixed.neighbourhood) == {"3-5-7-9", "3-5-7-8-9"} or "3-5-7-9" in mixed.neighbourhood


def test_scan_flat_is_all_c3(prolong_eps0, prolong_grass):
    for P in (prolong_eps0, prolong_grass):
        rep = c3_locus_scan(P, GridSpec(n=5), ball_samples=16)
        assert rep.summary["fraction_C3"] == 1.0


def test_scan_perturbed_mixed_exactly_on_c_zero_set(prolong_eps1):
    rep = c3_locus_scan(prolong_eps1, GridSpec(n=9), ball_samples=32)
    assert rep.summary["c_zero_set_description"] == "{theta=0} u {phi=-1}"
    assert rep.summary["growth_type_mismatches"] == 0
    for row in rep.rows:
        th, ph = row["point"][-2:]
        on_zero = th == 0 or ph == -1
        assert (row["type"] == "Mixed") == on_zero
        assert (row["type"] == "Regular") == (not on_zero)
    csv_text = rep.to_csv(prolong_eps1.chart.coords)
    assert csv_text.splitlines()[0].endswith("theta,phi,growth,c,type")
