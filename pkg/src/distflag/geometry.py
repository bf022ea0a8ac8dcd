"""Polynomial vector fields on coordinate charts, Lie brackets and pointwise rank."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .poly import Poly, PolyEvaluator

DEFAULT_RANK_TOL = 1e-9


@dataclass(frozen=True)
class Coord:
    name: str
    index: int


@dataclass(frozen=True)
class Chart:
    """Ordered coordinates plus optional symbolic parameters.

    Parameters (such as ``eps``) are extra polynomial indeterminates that are
    constant along the chart: vector fields have no component along them and
    brackets never differentiate by them.
    """

    coords: tuple[str, ...]
    params: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "coords", tuple(self.coords))
        object.__setattr__(self, "params", tuple(self.params))
        names = self.coords + self.params
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate names in chart {names}")
        if not self.coords:
            raise ValueError("a chart needs at least one coordinate")

    @property
    def dim(self) -> int:
        return len(self.coords)

    @property
    def ring(self) -> tuple[str, ...]:
        return self.coords + self.params

    def coord(self, name: str) -> Coord:
        return Coord(name, self.coords.index(name))

    def index(self, name: str) -> int:
        return self.coords.index(name)

    def var(self, name: str) -> Poly:
        return Poly.var(name, self.ring)

    def const(self, c) -> Poly:
        return Poly.const(c, self.ring)

    def zero(self) -> Poly:
        return Poly.zero(self.ring)

    def parse(self, text: str, line: int | None = None) -> Poly:
        return Poly.parse(text, self.ring, line)

    def partial(self, name: str) -> "VectorField":
        comps = [self.const(1) if c == name else self.zero() for c in self.coords]
        if name not in self.coords:
            raise KeyError(f"unknown coordinate {name!r}")
        return VectorField(self, tuple(comps))

    def field(self, components: Mapping[str, object]) -> "VectorField":
        """Build a field from ``{coord: Poly | str | number}``; missing entries are 0."""
        unknown = set(components) - set(self.coords)
        if unknown:
            raise KeyError(f"unknown coordinates {sorted(unknown)}")
        comps = []
        for c in self.coords:
            v = components.get(c, 0)
            if isinstance(v, str):
                v = self.parse(v)
            elif not isinstance(v, Poly):
                v = self.const(v)
            comps.append(v)
        return VectorField(self, tuple(comps))

    def without_params(self) -> "Chart":
        return Chart(self.coords)


@dataclass(frozen=True)
class VectorField:
    chart: Chart
    components: tuple[Poly, ...]

    def __post_init__(self):
        comps = tuple(self.components)
        object.__setattr__(self, "components", comps)
        if len(comps) != self.chart.dim:
            raise ValueError(f"{len(comps)} components for a chart of dimension {self.chart.dim}")
        for p in comps:
            if p.vars != self.chart.ring:
                raise ValueError("component ring differs from chart ring")

    def __getitem__(self, name: str) -> Poly:
        return self.components[self.chart.index(name)]

    def _check(self, other: "VectorField"):
        if other.chart != self.chart:
            raise ValueError("chart mismatch")

    def __add__(self, other: "VectorField") -> "VectorField":
        self._check(other)
        return VectorField(self.chart, tuple(a + b for a, b in zip(self.components, other.components)))

    def __sub__(self, other: "VectorField") -> "VectorField":
        self._check(other)
        return VectorField(self.chart, tuple(a - b for a, b in zip(self.components, other.components)))

    def __neg__(self) -> "VectorField":
        return VectorField(self.chart, tuple(-a for a in self.components))

    def __mul__(self, f) -> "VectorField":
        """Multiply by a function (Poly) or a constant."""
        return VectorField(self.chart, tuple(a * f for a in self.components))

    __rmul__ = __mul__

    def is_zero(self) -> bool:
        return all(c.is_zero() for c in self.components)

    def apply(self, f: Poly) -> Poly:
        """Directional derivative X(f)."""
        out = self.chart.zero()
        for name, comp in zip(self.chart.coords, self.components):
            if not comp.is_zero():
                df = f.diff(name)
                if not df.is_zero():
                    out = out + comp * df
        return out

    def subs(self, values: Mapping[str, object]) -> "VectorField":
        chart = Chart(self.chart.coords, tuple(p for p in self.chart.params if p not in values))
        return VectorField(chart, tuple(c.subs(values).to_ring(chart.ring) for c in self.components))

    def lift(self, chart: Chart) -> "VectorField":
        """Re-express on a larger chart; new coordinates get zero components."""
        comps = []
        for name in chart.coords:
            if name in self.chart.coords:
                comps.append(self[name].to_ring(chart.ring))
            else:
                comps.append(Poly.zero(chart.ring))
        return VectorField(chart, tuple(comps))

    def normalized(self) -> "VectorField":
        """Scale so the leading coefficient of the first nonzero component is 1."""
        for c in self.components:
            if not c.is_zero():
                lead = c.leading_coefficient()
                return self * (1 / lead)
        return self

    def eval(self, point) -> np.ndarray:
        return _evaluator(self)(point)

    def __str__(self):
        parts = [f"({c})*d/d{n}" for n, c in zip(self.chart.coords, self.components) if not c.is_zero()]
        return " + ".join(parts) if parts else "0"


_EVAL_CACHE: dict[VectorField, "FieldEvaluator"] = {}


def _evaluator(vf: VectorField) -> "FieldEvaluator":
    ev = _EVAL_CACHE.get(vf)
    if ev is None:
        ev = FieldEvaluator([vf])
        if len(_EVAL_CACHE) > 4096:
            _EVAL_CACHE.clear()
        _EVAL_CACHE[vf] = ev
    return ev.single


class FieldEvaluator:
    """Evaluate a list of fields at many points: ``(..., dim) -> (..., dim, nfields)``."""

    def __init__(self, fields: Sequence[VectorField]):
        fields = list(fields)
        if not fields:
            raise ValueError("no fields to evaluate")
        chart = fields[0].chart
        if chart.params:
            raise ValueError(f"bind parameters {chart.params} before numeric evaluation")
        for f in fields:
            if f.chart != chart:
                raise ValueError("chart mismatch")
        self.chart = chart
        self.nfields = len(fields)
        polys = [f.components[i] for i in range(chart.dim) for f in fields]
        self._ev = PolyEvaluator(polys, chart.ring)

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        vals = self._ev(pts)
        return vals.reshape(pts.shape[:-1] + (self.chart.dim, self.nfields))

    def single(self, point) -> np.ndarray:
        pts = np.asarray(point, dtype=float)
        return self(pts)[..., 0]


def lie_bracket(X: VectorField, Y: VectorField) -> VectorField:
    """Exact bracket [X, Y]_k = sum_i X_i dY_k/dx_i - Y_i dX_k/dx_i."""
    if X.chart != Y.chart:
        raise ValueError("chart mismatch in lie_bracket")
    chart = X.chart
    comps = []
    for k in range(chart.dim):
        comps.append(X.apply(Y.components[k]) - Y.apply(X.components[k]))
    return VectorField(chart, tuple(comps))


@dataclass(frozen=True)
class Frame:
    chart: Chart
    fields: tuple[VectorField, ...]
    expected_rank: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        for f in self.fields:
            if f.chart != self.chart:
                raise ValueError("frame field on a different chart")
        if self.expected_rank is None:
            object.__setattr__(self, "expected_rank", len(self.fields))

    def __len__(self):
        return len(self.fields)

    def __getitem__(self, i) -> VectorField:
        return self.fields[i]

    def evaluator(self) -> FieldEvaluator:
        return FieldEvaluator(self.fields)

    def eval(self, point) -> np.ndarray:
        return eval_frame(self, point)

    def rank_violations(self, points, tol_rel: float = DEFAULT_RANK_TOL) -> list[np.ndarray]:
        mats = self.evaluator()(np.atleast_2d(points))
        return [p for p, m in zip(np.atleast_2d(points), mats) if numerical_rank(m, tol_rel) != self.expected_rank]


def eval_frame(F: Frame, point) -> np.ndarray:
    point = np.asarray(point, dtype=float)
    if point.shape != (F.chart.dim,):
        raise ValueError(f"point of shape {point.shape} for a chart of dimension {F.chart.dim}")
    return F.evaluator()(point)


def singular_values(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return np.zeros(0)
    return np.linalg.svd(M, compute_uv=False)


def numerical_rank(M, tol_rel: float = DEFAULT_RANK_TOL) -> int:
    """Count singular values above ``tol_rel * sigma_max`` (0 for a zero matrix)."""
    s = singular_values(M)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > tol_rel * s[0]))


def batched_rank(mats: np.ndarray, tol_rel: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """numerical_rank over a stack of matrices ``(npoints, m, n)``."""
    mats = np.asarray(mats, dtype=float)
    if mats.shape[-1] == 0:
        return np.zeros(mats.shape[0], dtype=int)
    s = np.linalg.svd(mats, compute_uv=False)
    smax = s[..., :1]
    ranks = np.sum(s > tol_rel * smax, axis=-1)
    ranks[smax[..., 0] == 0.0] = 0
    return ranks


def span_residual(G: np.ndarray, v: np.ndarray) -> float:
    """Norm of the component of ``v`` orthogonal to the column span of ``G``."""
    coef, *_ = np.linalg.lstsq(G, v, rcond=None)
    return float(np.linalg.norm(v - G @ coef))


def sample_points(
    dim: int,
    n_random: int = 100,
    lattice: int | None = 3,
    scale: float = 0.5,
    box: float = 1.0,
    seed: int = 0,
    center=None,
) -> np.ndarray:
    """Working-region samples: a ``lattice**dim`` grid scaled by ``scale`` plus uniform points."""
    center = np.zeros(dim) if center is None else np.asarray(center, dtype=float)
    parts = []
    if lattice:
        axis = np.linspace(-scale, scale, lattice) if lattice > 1 else np.zeros(1)
        grid = np.stack(np.meshgrid(*([axis] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
        parts.append(grid)
    if n_random:
        rng = np.random.default_rng(seed)
        parts.append(rng.uniform(-box, box, size=(n_random, dim)))
    pts = np.concatenate(parts) if parts else np.zeros((0, dim))
    return pts + center


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("DISTFLAG_THREADS", "")))
    except ValueError:
        return os.cpu_count() or 1


def parallel_map(fn: Callable, items: Iterable) -> list:
    """Order-preserving map over a thread pool capped by DISTFLAG_THREADS."""
    items = list(items)
    n = min(thread_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def as_fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(str(value))
    return Fraction(value)
