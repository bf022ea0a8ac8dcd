import numpy as np
import pytest
import sympy as sp
from hypothesis import strategies as st

from distflag.geometry import Chart, VectorField
from distflag.models import builtin_model, epsilon_family
from distflag.poly import Poly
from distflag.prolong import build_prolongation


# ---------------------------------------------------------------------------
# shared fixtures (construction is exact and moderately costly, so cache per session)


@pytest.fixture(scope="session")
def grassmannian():
    return builtin_model("grassmannian")


@pytest.fixture(scope="session")
def elliptic():
    return builtin_model("elliptic-nilpotent")


@pytest.fixture(scope="session")
def eps_symbolic():
    return epsilon_family()


@pytest.fixture(scope="session")
def eps0():
    return epsilon_family(0)


@pytest.fixture(scope="session")
def eps1():
    return epsilon_family(1)


@pytest.fixture(scope="session")
def prolong_eps0(eps0):
    return build_prolongation(eps0)


@pytest.fixture(scope="session")
def prolong_eps1(eps1):
    return build_prolongation(eps1)


@pytest.fixture(scope="session")
def prolong_grass(grassmannian):
    return build_prolongation(grassmannian)


@pytest.fixture(scope="session")
def prolong_symbolic(eps_symbolic):
    return build_prolongation(eps_symbolic)


# ---------------------------------------------------------------------------
# sympy as an independent oracle


def to_sympy(p: Poly):
    syms = {v: sp.Symbol(v) for v in p.vars}
    return sp.expand(sp.sympify(str(p).replace("^", "**"), locals=syms))


def sympy_bracket(X: VectorField, Y: VectorField):
    """[X, Y]^k = X(Y^k) - Y(X^k), computed by sympy from the printed components."""
    syms = [sp.Symbol(c) for c in X.chart.coords]
    Xs = [to_sympy(p) for p in X.components]
    Ys = [to_sympy(p) for p in Y.components]
    out = []
    for k in range(len(syms)):
        val = sum(Xs[i] * sp.diff(Ys[k], syms[i]) - Ys[i] * sp.diff(Xs[k], syms[i]) for i in range(len(syms)))
        out.append(sp.expand(val))
    return out


# ---------------------------------------------------------------------------
# hypothesis strategies

SMALL_VARS = ("a", "b", "c")


def polys(vars=SMALL_VARS, max_terms=4, max_deg=2):
    exps = st.tuples(*[st.integers(0, max_deg) for _ in vars])
    coefs = st.fractions(min_value=-5, max_value=5, max_denominator=4)
    return st.dictionaries(exps, coefs, max_size=max_terms).map(lambda t: Poly(vars, t))


def fields(chart: Chart, max_terms=3, max_deg=2):
    return st.tuples(*[polys(chart.ring, max_terms, max_deg) for _ in chart.coords]).map(
        lambda comps: VectorField(chart, tuple(comps))
    )


SMALL_CHART = Chart(SMALL_VARS)


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "notes": []})
    entry["ok"] = entry["ok"] and rep.passed
    entry["notes"] += [f"{k}={v}" for k, v in item.user_properties]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        notes = ("  " + ", ".join(e["notes"])) if e["notes"] else ""
        terminalreporter.write_line(f"{'PASS' if e['ok'] else 'FAIL'}  {number:>2}. {e['title']}{notes}")
