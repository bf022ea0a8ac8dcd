"""Prolongation of a hyperbolic (4,7) frame to the projectivized cone (dimension 9).

Chart k of the torus fiber keeps the k-th cone coefficient equal to 1. Each
chart is the chart-1 template applied to a permuted adapted frame, so a single
construction serves all four.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .class47 import verify_adapted
from .flags import DerivedFlag, GrowthVector, growth_vector_at, weak_derived_flag
from .geometry import Chart, FieldEvaluator, Frame, VectorField, lie_bracket, parallel_map, sample_points
from .models import ModelSpec
from .poly import Poly, PolyEvaluator

THETA, PHI = "theta", "phi"

# frame permutation per chart index; u[perm[i]] = (1, theta, phi, theta*phi)[i]
CHART_PERMUTATIONS = {
    1: (0, 1, 2, 3),
    2: (1, 0, 3, 2),
    3: (2, 3, 0, 1),
    4: (3, 2, 1, 0),
}

C3_GROWTH = (3, 5, 7, 8, 9)
REGULAR_GROWTH = (3, 5, 7, 9)
BOUNDARY_LIMIT = 1e4


class ProlongationError(ValueError):
    pass


class ChartBoundaryError(ProlongationError):
    def __init__(self, message, suggested_chart: int):
        super().__init__(message)
        self.suggested_chart = suggested_chart


def cone_vector(chart_index: int, theta: float, phi: float) -> np.ndarray:
    """Cone coefficients u (in the original adapted frame) of the chart point (theta, phi)."""
    perm = CHART_PERMUTATIONS[chart_index]
    u = np.zeros(4)
    for i, val in enumerate((1.0, theta, phi, theta * phi)):
        u[perm[i]] = val
    return u


def fiber_coords(chart_index: int, u) -> tuple[float, float]:
    u = np.asarray(u, float)
    perm = CHART_PERMUTATIONS[chart_index]
    lead = u[perm[0]]
    if lead == 0:
        raise ChartBoundaryError(f"u{perm[0] + 1} = 0 is outside chart {chart_index}", best_chart(u))
    return u[perm[1]] / lead, u[perm[2]] / lead


def best_chart(u) -> int:
    """Chart in which the direction [u] has the smallest fiber coordinates."""
    return int(np.argmax(np.abs(np.asarray(u, float)))) + 1


def transition(z, from_index: int, to_index: int) -> np.ndarray:
    """Re-express a Z point (x..., theta, phi) in another chart."""
    z = np.asarray(z, float)
    u = cone_vector(from_index, z[-2], z[-1])
    th, ph = fiber_coords(to_index, u)
    return np.concatenate([z[:-2], [th, ph]])


def _solve_exact(columns: list[VectorField], rhs: VectorField):
    """Coefficients f_k with sum f_k columns_k = rhs, by elimination with constant pivots.

    Returns None if at some stage no constant pivot is available.
    """
    n = len(columns)
    dim = rhs.chart.dim
    rows = [[columns[k].components[i] for k in range(n)] + [rhs.components[i]] for i in range(dim)]
    pivots = {}
    free_rows = set(range(dim))
    for _ in range(n):
        choice = None
        for k in range(n):
            if k in pivots:
                continue
            for i in sorted(free_rows):
                e = rows[i][k]
                if e.is_constant() and not e.is_zero():
                    choice = (i, k)
                    break
            if choice:
                break
        if choice is None:
            return None
        i, k = choice
        inv = 1 / rows[i][k].constant_value()
        rows[i] = [e * inv for e in rows[i]]
        for r in range(dim):
            if r != i and not rows[r][k].is_zero():
                f = rows[r][k]
                rows[r] = [a - f * b for a, b in zip(rows[r], rows[i])]
        pivots[k] = i
        free_rows.discard(i)
    for r in free_rows:
        if not rows[r][-1].is_zero():
            return None  # inconsistent: rhs not in the span
    return [rows[pivots[k]][-1] for k in range(n)]


@dataclass
class ProlongedSystem:
    model: ModelSpec
    chart_index: int
    chart: Chart
    base_frame: tuple[VectorField, ...]  # permuted adapted frame on X
    zeta: tuple[VectorField, ...]  # zeta_1 .. zeta_9
    a: Poly
    b: Poly
    c_fn: Poly | None = None
    d_fn: Poly | None = None
    _flag: DerivedFlag | None = field(default=None, repr=False)

    @property
    def permutation(self) -> tuple[int, ...]:
        return CHART_PERMUTATIONS[self.chart_index]

    @property
    def frame(self) -> Frame:
        return Frame(self.chart, self.zeta[:3], 3)

    def z(self, n: int) -> VectorField:
        """zeta_n with 1-based index."""
        return self.zeta[n - 1]

    def flag(self) -> DerivedFlag:
        if self._flag is None:
            self._flag = weak_derived_flag(self.frame)
        return self._flag

    def bind(self, **values) -> "ProlongedSystem":
        return build_prolongation(self.model.bind(**values), self.chart_index,
                                  self.a.subs(values) if values else self.a,
                                  self.b.subs(values) if values else self.b)

    def project(self, z) -> tuple[np.ndarray, np.ndarray]:
        """(x, u): base point and cone coefficients in the original frame."""
        z = np.asarray(z, float)
        return z[:-2], cone_vector(self.chart_index, z[-2], z[-1])

    def point(self, x, theta, phi) -> np.ndarray:
        return np.concatenate([np.asarray(x, float), [theta, phi]])

    def c_at(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, float))
        if self.c_fn is not None:
            if self.chart.params:
                raise ProlongationError(f"bind parameters {self.chart.params} before numeric evaluation")
            return PolyEvaluator([self.c_fn], self.chart.ring)(pts)[:, 0]
        return np.array([numeric_c_d(self, p)[0] for p in pts])

    def growth_at(self, z, tol: float = 1e-9) -> GrowthVector:
        _check_boundary(self, z)
        return growth_vector_at(self.flag(), z, tol)


def build_prolongation(model: ModelSpec, chart_index: int = 1, a: Poly | str | None = None,
                       b: Poly | str | None = None, check_adapted: bool = True,
                       samples=None) -> ProlongedSystem:
    """Assemble zeta_1..zeta_3 on the 9-dimensional chart and the bracket cascade zeta_4..zeta_9.

    zeta_4 = [z1,z2], zeta_5 = [z2,z3], zeta_6 = [z1,z5], zeta_7 = [z2,z5],
    zeta_8 = [z2,z6], and zeta_9 is the lift of [xi'_2, xi'_4] of the permuted frame.
    """
    if chart_index not in CHART_PERMUTATIONS:
        raise ProlongationError(f"chart index must be 1..4, got {chart_index}")
    if len(model.fields) != 4 or model.chart.dim != 7:
        raise ProlongationError("prolongation needs a 4-field frame on a 7-dimensional chart")
    if check_adapted:
        numeric = model
        if model.is_symbolic:
            numeric = model.bind(**{p: model.params.get(p, 1) for p in model.chart.params})
        pts = sample_points(7, 30, lattice=None, seed=0) if samples is None else samples
        if not verify_adapted(numeric.frame, pts):
            raise ProlongationError(f"frame of model {model.name!r} is not adapted")
    base = model.chart
    if THETA in base.ring or PHI in base.ring:
        raise ProlongationError("model already uses the fiber coordinate names theta/phi")
    chart = Chart(base.coords + (THETA, PHI), base.params)
    perm = CHART_PERMUTATIONS[chart_index]
    xi = tuple(model.fields[perm[i]].lift(chart) for i in range(4))
    th, ph = chart.var(THETA), chart.var(PHI)

    def as_poly(v):
        if v is None:
            return chart.zero()
        if isinstance(v, str):
            return chart.parse(v)
        if isinstance(v, Poly):
            return v.to_ring(chart.ring)
        return chart.const(v)

    a, b = as_poly(a), as_poly(b)
    z1 = chart.partial(THETA)
    z3 = chart.partial(PHI)
    z2 = xi[0] + xi[1] * th + xi[2] * ph + xi[3] * (th * ph) + z1 * a + z3 * b
    z4 = lie_bracket(z1, z2)
    z5 = lie_bracket(z2, z3)
    z6 = lie_bracket(z1, z5)
    z7 = lie_bracket(z2, z5)
    z8 = lie_bracket(z2, z6)
    z9 = lie_bracket(xi[1], xi[3])
    P = ProlongedSystem(model, chart_index, chart, xi, (z1, z2, z3, z4, z5, z6, z7, z8, z9), a, b)
    c, d = extract_c_d(P)
    P.c_fn, P.d_fn = c, d
    return P


def extract_c_d(P: ProlongedSystem):
    """Symbolic (c, d): the zeta_9 and zeta_8 coefficients of [zeta_2, zeta_7] over zeta_1..zeta_9.

    Returns (None, None) when the decomposition is not exact over polynomials;
    use ``numeric_c_d`` at points in that case.
    """
    target = lie_bracket(P.z(2), P.z(7))
    coef = _solve_exact(list(P.zeta), target)
    if coef is None:
        return None, None
    return coef[8], coef[7]


def numeric_c_d(P: ProlongedSystem, z) -> tuple[float, float]:
    z = np.asarray(z, float)
    cols = FieldEvaluator(list(P.zeta))(z)
    rhs = lie_bracket(P.z(2), P.z(7)).eval(z)
    s = np.linalg.svd(cols, compute_uv=False)
    if s[-1] < 1e-12 * s[0]:
        raise ProlongationError(f"zeta_1..zeta_9 are dependent at {z.tolist()}")
    coef = np.linalg.solve(cols, rhs)
    return float(coef[8]), float(coef[7])


def zeta9_decomposition(P: ProlongedSystem):
    """Full exact coefficient list of [zeta_2, zeta_7] over zeta_1..zeta_9 (or None)."""
    return _solve_exact(list(P.zeta), lie_bracket(P.z(2), P.z(7)))


# ---------------------------------------------------------------------------
# typing


@dataclass
class DirectionType:
    value: str  # "C3" | "Regular" | "Mixed" | "Other"
    growth: GrowthVector
    neighbourhood: dict  # growth string -> count
    c_value: float | None
    radius: float
    samples: int

    def as_dict(self) -> dict:
        return {
            "type": self.value,
            "growth": str(self.growth),
            "neighbourhood_growth_counts": dict(sorted(self.neighbourhood.items())),
            "c_value": self.c_value,
            "radius": self.radius,
            "samples": self.samples,
            "evidence": "sampled",
        }


def _check_boundary(P: ProlongedSystem, z):
    z = np.asarray(z, float)
    if max(abs(z[-2]), abs(z[-1])) > BOUNDARY_LIMIT:
        _, u = P.project(z)
        k = best_chart(u)
        raise ChartBoundaryError(
            f"fiber coordinates {z[-2]:.3g}, {z[-1]:.3g} are near the edge of chart {P.chart_index}; use chart {k}",
            k,
        )


def classify_growth(at_point: tuple, neighbourhood: list[tuple]) -> str:
    if at_point == REGULAR_GROWTH:
        return "Regular"
    if at_point == C3_GROWTH:
        return "C3" if all(g == C3_GROWTH for g in neighbourhood) else "Mixed"
    return "Other"


def direction_type(P: ProlongedSystem, z, radius: float = 0.25, samples: int = 200, seed: int = 0,
                   tol: float = 1e-9) -> DirectionType:
    """Type of the direction z from growth at z and on a sampled ball of the given radius."""
    z = np.asarray(z, float)
    g0 = P.growth_at(z, tol)
    rng = np.random.default_rng(seed)
    ball = rng.normal(size=(samples, z.size))
    ball *= (radius * rng.uniform(size=(samples, 1)) ** (1 / z.size)) / np.linalg.norm(ball, axis=1, keepdims=True)
    flag = P.flag()
    flag.ensure(flag.depth_cap)
    growths = parallel_map(lambda q: growth_vector_at(flag, q, tol).ranks, z + ball)
    counts: dict[str, int] = {}
    for g in growths:
        key = "-".join(map(str, g))
        counts[key] = counts.get(key, 0) + 1
    c = None
    try:
        c = float(P.c_at(z)[0])
    except ProlongationError:
        pass
    return DirectionType(classify_growth(g0.ranks, growths), g0, counts, c, radius, samples)


# ---------------------------------------------------------------------------
# locus scan


@dataclass
class GridSpec:
    theta: tuple[float, float] = (-2.0, 2.0)
    phi: tuple[float, float] = (-2.0, 2.0)
    n: int = 21
    base: tuple = ()  # base point x (defaults to the chart origin)

    def axes(self) -> tuple[list[Fraction], list[Fraction]]:
        def axis(lo, hi):
            lo, hi = Fraction(str(lo)), Fraction(str(hi))
            if self.n == 1:
                return [lo]
            return [lo + (hi - lo) * k / (self.n - 1) for k in range(self.n)]

        return axis(*self.theta), axis(*self.phi)


@dataclass
class LocusReport:
    rows: list[dict]
    summary: dict

    def to_csv(self, coord_names) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(coord_names) + ["growth", "c", "type"])
        for r in self.rows:
            w.writerow([repr(float(v)) for v in r["point"]] + [r["growth"], repr(r["c"]), r["type"]])
        return buf.getvalue()


def _describe_zero_set(theta_axis, phi_axis, zero) -> tuple[str, list, list]:
    th_lines = [th for i, th in enumerate(theta_axis) if all(zero[i])]
    ph_lines = [ph for j, ph in enumerate(phi_axis) if all(zero[i][j] for i in range(len(theta_axis)))]
    covered = {(i, j) for i, th in enumerate(theta_axis) for j, ph in enumerate(phi_axis) if th in th_lines or ph in ph_lines}
    stray = [(float(theta_axis[i]), float(phi_axis[j]))
             for i in range(len(theta_axis)) for j in range(len(phi_axis)) if zero[i][j] and (i, j) not in covered]
    if len(th_lines) == len(theta_axis):
        return "entire grid", [], []
    parts = [f"{{theta={_fmt(v)}}}" for v in th_lines] + [f"{{phi={_fmt(v)}}}" for v in ph_lines]
    desc = " u ".join(parts) if parts else "empty"
    if stray:
        desc += f" plus {len(stray)} isolated grid points"
    return desc, [float(v) for v in th_lines], [float(v) for v in ph_lines]


def _fmt(v: Fraction) -> str:
    return str(v.numerator) if v.denominator == 1 else f"{v.numerator}/{v.denominator}"


def c3_locus_scan(P: ProlongedSystem, grid: GridSpec | None = None, radius: float = 0.25, ball_samples: int = 64,
                  seed: int = 0, tol: float = 1e-9, c_tol: float = 1e-9) -> LocusReport:
    """Growth, c and type over a (theta, phi) grid at a fixed base point.

    Types follow the c-function: c != 0 at the point gives Regular; c = 0 there and
    on a sampled ball gives C3; c = 0 at the point only gives Mixed. Grid values are
    exact rationals so c is evaluated exactly on the grid.
    """
    grid = grid or GridSpec()
    if P.c_fn is None:
        raise ProlongationError("c is not available symbolically; scan needs a polynomial c")
    if P.chart.params:
        raise ProlongationError(f"bind parameters {P.chart.params} before scanning")
    base = [Fraction(str(v)) for v in grid.base] if grid.base else [Fraction(0)] * (P.chart.dim - 2)
    th_axis, ph_axis = grid.axes()
    rng = np.random.default_rng(seed)
    flag = P.flag()
    flag.ensure(flag.depth_cap)
    pts_exact = [base + [th, ph] for th in th_axis for ph in ph_axis]

    def one(pt):
        c_exact = P.c_fn.eval_exact(pt)
        zf = np.array([float(v) for v in pt])
        return c_exact, growth_vector_at(flag, zf, tol)

    results = parallel_map(one, pts_exact)
    ball = rng.normal(size=(ball_samples, P.chart.dim))
    ball *= radius / np.linalg.norm(ball, axis=1, keepdims=True) * rng.uniform(size=(ball_samples, 1)) ** (1 / P.chart.dim)
    rows = []
    zero = [[False] * len(ph_axis) for _ in th_axis]
    counts = {"C3": 0, "Regular": 0, "Mixed": 0, "Other": 0}
    mismatches = 0
    for n, (pt, (c_exact, g)) in enumerate(zip(pts_exact, results)):
        i, j = divmod(n, len(ph_axis))
        zf = np.array([float(v) for v in pt])
        if c_exact != 0:
            kind = "Regular"
        else:
            zero[i][j] = True
            near = np.abs(P.c_at(zf + ball))
            kind = "C3" if np.all(near < c_tol) else "Mixed"
        if kind in ("C3", "Mixed") and g.ranks != C3_GROWTH or kind == "Regular" and g.ranks != REGULAR_GROWTH:
            mismatches += 1
        counts[kind] += 1
        rows.append({"point": zf, "growth": str(g), "c": float(c_exact), "type": kind})
    total = len(rows)
    desc, th_lines, ph_lines = _describe_zero_set(th_axis, ph_axis, zero)
    summary = {
        "points": total,
        "fraction_C3": counts["C3"] / total,
        "fraction_regular": counts["Regular"] / total,
        "fraction_mixed": counts["Mixed"] / total,
        "c_zero_set_description": desc,
        "c_zero_theta_lines": th_lines,
        "c_zero_phi_lines": ph_lines,
        "growth_type_mismatches": mismatches,
        "c_function": str(P.c_fn),
        "evidence": "sampled",
    }
    return LocusReport(rows, summary)
