"""Cotangent lifts, constrained Hamiltonian integration and singular-curve certificates.

Two independent routes decide whether a D-integral curve is singular: the adjoint
route looks for a costate in D-perp solving the linear adjoint equation while
staying in D-perp, the endpoint route measures the rank of the discretized
endpoint map under piecewise-linear control perturbations.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicHermiteSpline, CubicSpline

from .class47 import annihilator
from .geometry import Chart, FieldEvaluator, Frame, VectorField, lie_bracket, numerical_rank, parallel_map, thread_count
from .poly import PolyEvaluator
from .prolong import (
    C3_GROWTH,
    REGULAR_GROWTH,
    ProlongedSystem,
    best_chart,
    cone_vector,
    direction_type,
    fiber_coords,
)

DEFAULT_STEP = 1e-3
DEFAULT_HORIZON = 1.0
DEFAULT_CONSTRAINT_TOL = 1e-8
ADJOINT_TOL = 1e-6
ENDPOINT_TOL = 1e-6
FD_STEP = 1e-5
COSTATE_FLOOR = 1e-10
IMMERSION_TOL = 1e-6


class IntegrationError(RuntimeError):
    pass


class RefusedByTheory(RuntimeError):
    """The requested synthesis cannot exist at this point (regular or mixed direction)."""

    def __init__(self, message: str, witness: dict | None = None):
        super().__init__(message)
        self.witness = witness or {}


class NotIntegralError(ValueError):
    pass


# ---------------------------------------------------------------------------
# data types


@dataclass(frozen=True)
class CotangentPoint:
    base: np.ndarray
    costate: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.base, float)
        p = np.asarray(self.costate, float)
        if b.shape != p.shape or b.ndim != 1:
            raise ValueError(f"base {b.shape} and costate {p.shape} must be vectors of equal length")
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(p))):
            raise ValueError("non-finite cotangent point")
        object.__setattr__(self, "base", b)
        object.__setattr__(self, "costate", p)


@dataclass
class ControlCurve:
    """Piecewise-linear controls: values[k] at times[k]."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, float)
        self.values = np.atleast_2d(np.asarray(self.values, float))
        if self.values.shape[0] != self.times.size:
            raise ValueError("one control vector per node is required")
        if self.times.size < 2 or np.any(np.diff(self.times) <= 0):
            raise ValueError("control times must be strictly increasing with at least two nodes")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite control values")

    @classmethod
    def uniform(cls, values, horizon: float = DEFAULT_HORIZON) -> "ControlCurve":
        values = np.atleast_2d(np.asarray(values, float))
        return cls(np.linspace(0.0, horizon, values.shape[0]), values)

    @classmethod
    def constant(cls, value, horizon: float = DEFAULT_HORIZON, nodes: int = 2) -> "ControlCurve":
        return cls.uniform(np.tile(np.asarray(value, float), (nodes, 1)), horizon)

    @property
    def nodes(self) -> int:
        return self.times.size

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def horizon(self) -> tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    def hat_weights(self, t: float) -> np.ndarray:
        """Weights w with controls(t) = w @ values (clamped outside the grid)."""
        w = np.zeros(self.nodes)
        t = min(max(t, self.times[0]), self.times[-1])
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        k = min(max(k, 0), self.nodes - 2)
        s = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
        w[k] = 1.0 - s
        w[k + 1] = s
        return w

    def __call__(self, t: float) -> np.ndarray:
        return self.hat_weights(t) @ self.values


@dataclass
class SampledPath:
    chart: Chart
    times: np.ndarray
    points: np.ndarray
    velocities: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, float)
        self.points = np.asarray(self.points, float)
        self.velocities = np.asarray(self.velocities, float)

    def speeds(self) -> np.ndarray:
        return np.linalg.norm(self.velocities, axis=1)

    def is_immersive(self, tol: float = IMMERSION_TOL) -> bool:
        s = self.speeds()
        return bool(s.max() > 0 and s.min() > tol * s.max())

    def reparametrize(self, c: float):
        """Samples of t -> gamma(c t), time-ordered."""
        if c == 0:
            raise ValueError("c must be nonzero")
        order = np.argsort(self.times / c)
        return type(self)(self.chart, (self.times / c)[order], self.points[order], (c * self.velocities)[order])

    def initial_direction(self) -> np.ndarray:
        v = self.velocities[0]
        return v / np.linalg.norm(v)

    def to_csv(self, extra: dict | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        extra = extra or {}
        w.writerow(["t"] + list(self.chart.coords) + list(extra))
        for k, t in enumerate(self.times):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in self.points[k]]
                       + [repr(float(np.asarray(col)[k])) for col in extra.values()])
        return buf.getvalue()


class PathOnX(SampledPath):
    pass


class PathOnZ(SampledPath):
    pass


@dataclass
class BiCharacteristic:
    chart: Chart
    times: np.ndarray
    states: np.ndarray
    costates: np.ndarray
    controls: np.ndarray
    residuals: np.ndarray  # per step, before re-projection (relative)
    stratum: str | None = None
    tol: float = DEFAULT_CONSTRAINT_TOL
    nonvanishing: np.ndarray | None = None  # stratum-defining quantity along the curve

    @property
    def max_residual(self) -> float:
        return float(np.max(self.residuals)) if self.residuals.size else 0.0

    @property
    def costate_floor(self) -> float:
        return float(np.min(np.linalg.norm(self.costates, axis=1)))

    @property
    def ok(self) -> bool:
        return self.max_residual < self.tol and self.costate_floor > COSTATE_FLOOR

    def certificate(self) -> dict:
        out = {
            "verdict": bool(self.ok),
            "max_residual": self.max_residual,
            "costate_floor": self.costate_floor,
            "stratum": self.stratum,
            "tolerance": self.tol,
        }
        if self.nonvanishing is not None:
            out["nonvanishing_min"] = float(np.min(self.nonvanishing))
        return out

    def path(self, velocities: np.ndarray | None = None) -> SampledPath:
        return SampledPath(self.chart, self.times, self.states, velocities if velocities is not None else np.gradient(self.states, self.times, axis=0))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = list(self.chart.coords)
        w.writerow(["t"] + names + [f"p_{n}" for n in names] + ["residual"])
        res = np.concatenate([[0.0], self.residuals])
        for k, t in enumerate(self.times):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in self.states[k]]
                       + [repr(float(v)) for v in self.costates[k]] + [repr(float(res[k]))])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# Hamiltonians


def ham_lift(xi: VectorField, q: CotangentPoint) -> float:
    """H_xi(x, p) = <p, xi(x)>."""
    return float(q.costate @ xi.eval(q.base))


def cotangent_chart(chart: Chart) -> Chart:
    return Chart(chart.coords + tuple(f"p_{c}" for c in chart.coords), chart.params)


def ham_field(xi: VectorField) -> VectorField:
    """Symbolic Hamiltonian field (dH/dp, -dH/dx) of H = <p, xi> on the cotangent chart."""
    base = xi.chart
    T = cotangent_chart(base)
    lifted = [c.to_ring(T.ring) for c in xi.components]
    ps = [T.var(f"p_{c}") for c in base.coords]
    comps = list(lifted)
    for name in base.coords:
        acc = T.zero()
        for pj, cj in zip(ps, xi.components):
            d = cj.diff(name)
            if not d.is_zero():
                acc = acc + pj * d.to_ring(T.ring)
        comps.append(-acc)
    return VectorField(T, tuple(comps))


class JacobianEvaluator:
    """d(field_f)^k / dx_i at points: ``(..., dim) -> (..., nfields, dim, dim)``."""

    def __init__(self, fields: Sequence[VectorField]):
        fields = list(fields)
        chart = fields[0].chart
        if chart.params:
            raise ValueError(f"bind parameters {chart.params} before numeric evaluation")
        self.chart = chart
        self.nf = len(fields)
        polys = [f.components[k].diff(name) for f in fields for k in range(chart.dim) for name in chart.coords]
        self._ev = PolyEvaluator(polys, chart.ring)

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, float)
        n = self.chart.dim
        return self._ev(pts).reshape(pts.shape[:-1] + (self.nf, n, n))


class HamiltonianSystem:
    """Control-affine Hamiltonian H = sum_f u_f <p, field_f(x)> with numeric evaluators."""

    def __init__(self, fields: Sequence[VectorField] | Frame):
        fields = list(fields.fields if isinstance(fields, Frame) else fields)
        self.fields = fields
        self.chart = fields[0].chart
        self.F = FieldEvaluator(fields)
        self.J = JacobianEvaluator(fields)

    def rhs(self, x, p, u):
        """(xdot, pdot) for one or a batch of states."""
        Fx = self.F(x)  # (..., n, m)
        Jx = self.J(x)  # (..., m, n, n)
        xdot = np.einsum("...nm,...m->...n", Fx, u)
        pdot = -np.einsum("...m,...mki,...k->...i", u, Jx, p)
        return xdot, pdot

    def hamiltonians(self, x, p) -> np.ndarray:
        return np.einsum("...n,...nm->...m", p, self.F(x))


def _relative_constraints(G: np.ndarray, p: np.ndarray) -> float:
    """max_i |<p, g_i>| / (|p| |g_i|)."""
    pn = np.linalg.norm(p)
    if pn == 0:
        return 0.0
    gn = np.linalg.norm(G, axis=0)
    gn[gn == 0] = 1.0
    return float(np.max(np.abs(p @ G) / gn) / pn)


def _project(G: np.ndarray, p: np.ndarray) -> np.ndarray:
    coef, *_ = np.linalg.lstsq(G, p, rcond=None)
    return p - G @ coef


ControlFn = Callable[[float, np.ndarray, np.ndarray], np.ndarray]


def _integrate(system: HamiltonianSystem, x0, p0, control_fn: ControlFn, times: np.ndarray,
               constraints: FieldEvaluator | None, tol: float, stratum: str | None = None,
               abort: bool = True) -> BiCharacteristic:
    x = np.asarray(x0, float).copy()
    p = np.asarray(p0, float).copy()
    K = times.size
    m = len(system.fields)
    xs = np.zeros((K, x.size))
    ps = np.zeros((K, x.size))
    us = np.zeros((K, m))
    res = np.zeros(K - 1)
    xs[0], ps[0] = x, p
    us[0] = control_fn(times[0], x, p)
    for k in range(K - 1):
        t, h = times[k], times[k + 1] - times[k]
        u1 = control_fn(t, x, p)
        k1x, k1p = system.rhs(x, p, u1)
        xa, pa = x + 0.5 * h * k1x, p + 0.5 * h * k1p
        u2 = control_fn(t + 0.5 * h, xa, pa)
        k2x, k2p = system.rhs(xa, pa, u2)
        xb, pb = x + 0.5 * h * k2x, p + 0.5 * h * k2p
        u3 = control_fn(t + 0.5 * h, xb, pb)
        k3x, k3p = system.rhs(xb, pb, u3)
        xc, pc = x + h * k3x, p + h * k3p
        u4 = control_fn(t + h, xc, pc)
        k4x, k4p = system.rhs(xc, pc, u4)
        x = x + h / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
        p = p + h / 6 * (k1p + 2 * k2p + 2 * k3p + k4p)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(p))):
            raise IntegrationError(f"non-finite state at t={times[k + 1]:.6g}")
        if constraints is not None:
            G = constraints(x)
            res[k] = _relative_constraints(G, p)
            if abort and res[k] > 100 * tol:
                raise IntegrationError(f"constraint blow-up at t={times[k + 1]:.6g}: residual {res[k]:.3g}")
            p = _project(G, p)
        if abort and np.linalg.norm(p) < COSTATE_FLOOR:
            raise IntegrationError(f"costate vanished at t={times[k + 1]:.6g}")
        xs[k + 1], ps[k + 1] = x, p
        us[k + 1] = control_fn(times[k + 1], x, p)
    return BiCharacteristic(system.chart, times.copy(), xs, ps, us, res, stratum, tol)


def time_grid(horizon: float = DEFAULT_HORIZON, step: float = DEFAULT_STEP, start: float = 0.0) -> np.ndarray:
    n = max(1, int(round(abs(horizon) / step)))
    return np.linspace(start, start + horizon, n + 1)


def hamiltonian_flow(fields, init: CotangentPoint, controls: ControlCurve | Callable, step: float = DEFAULT_STEP,
                     horizon: float | None = None) -> BiCharacteristic:
    """Unconstrained flow of sum_f u_f(t) H_f (no projection, no constraint checks)."""
    system = HamiltonianSystem(fields)
    ctrl = controls if callable(controls) else controls
    T = horizon if horizon is not None else (controls.horizon[1] if isinstance(controls, ControlCurve) else DEFAULT_HORIZON)
    times = time_grid(T, step)
    return _integrate(system, init.base, init.costate, lambda t, x, p: ctrl(t), times, None, np.inf, abort=False)


def integrate_constrained(fields, init: CotangentPoint, controls: ControlCurve, tol: float = DEFAULT_CONSTRAINT_TOL,
                          step: float = DEFAULT_STEP) -> BiCharacteristic:
    """RK4 of the control-weighted Hamiltonian field with per-step projection onto {H_f = 0}.

    Raises IntegrationError when the costate norm drops below 1e-10 or the
    pre-projection constraint residual exceeds 100 * tol.
    """
    system = HamiltonianSystem(fields)
    if controls.width != len(system.fields):
        raise ValueError(f"{controls.width} controls for {len(system.fields)} fields")
    G0 = system.F(init.base)
    if np.linalg.norm(init.costate) < COSTATE_FLOOR:
        raise IntegrationError("initial costate vanishes")
    r0 = _relative_constraints(G0, init.costate)
    if r0 > tol:
        raise IntegrationError(f"initial costate violates the constraints: residual {r0:.3g}")
    t0, t1 = controls.horizon
    times = time_grid(t1 - t0, step, t0)
    return _integrate(system, init.base, init.costate, lambda t, x, p: controls(t), times, system.F, tol)


def constraint_derivative_check(fields, bic: BiCharacteristic, kinks=None) -> float:
    """Max deviation between d/dt H_i (five-point differences) and sum_j u_j H_[f_j, f_i].

    Samples within two steps of a control kink (e.g. the nodes of a piecewise-linear
    control) are skipped, since the difference quotient is not accurate there.
    """
    fields = list(fields.fields if isinstance(fields, Frame) else fields)
    m = len(fields)
    t = bic.times
    h = t[1] - t[0]
    if not np.allclose(np.diff(t), h):
        raise ValueError("uniform time grid required")
    H = HamiltonianSystem(fields).hamiltonians(bic.states, bic.costates)
    br = FieldEvaluator([lie_bracket(fields[j], fields[i]) for j in range(m) for i in range(m)])
    B = np.einsum("kn,knq->kq", bic.costates, br(bic.states)).reshape(-1, m, m)
    pred = np.einsum("kj,kji->ki", bic.controls, B)
    dH = (H[:-4] - 8 * H[1:-3] + 8 * H[3:-1] - H[4:]) / (12 * h)
    mask = np.ones(t.size - 4, bool)
    if kinks is not None:
        for tk in np.atleast_1d(kinks):
            mask &= np.abs(t[2:-2] - tk) > 2.5 * h
    return float(np.max(np.abs(dH - pred[2:-2])[mask]))


# ---------------------------------------------------------------------------
# prolongation strata


STRATA = {
    # stratum: (indices of H_zeta that vanish, description of the nonvanishing part)
    "a": (3, (4, 5)),
    "b": (5, (6, 7)),
    "b2": (6, (7,)),
    "c": (7, (8,)),
    "d": (8, None),
}


def _as_fn(v) -> Callable:
    if callable(v):
        return v
    return lambda t, z: float(v)


def zeta_hamiltonians(P: ProlongedSystem, z, q) -> np.ndarray:
    """H_zeta_1..H_zeta_9 at (z, q)."""
    return np.asarray(q, float) @ FieldEvaluator(list(P.zeta))(np.asarray(z, float))


def costate_from_hamiltonians(P: ProlongedSystem, z, values) -> np.ndarray:
    """Costate on Z with prescribed H_zeta_1..H_zeta_9 (the zetas frame TZ at z)."""
    Zm = FieldEvaluator(list(P.zeta))(np.asarray(z, float))
    return np.linalg.solve(Zm.T, np.asarray(values, float))


def stratum_of(P: ProlongedSystem, z, q, tol: float = 1e-8) -> str | None:
    h = zeta_hamiltonians(P, z, q)
    scale = np.linalg.norm(q) * max(1.0, float(np.max(np.linalg.norm(FieldEvaluator(list(P.zeta))(np.asarray(z, float)), axis=0))))
    small = np.abs(h) < tol * max(scale, 1e-300)
    if not np.all(small[:3]):
        return None
    if not np.all(small[3:5]):
        return "a"
    if not np.all(small[5:7]):
        return "b" if not small[5] else "b2"
    if not small[7]:
        return "c"
    if not small[8]:
        return "d"
    return None


def stratum_integrate(P: ProlongedSystem, stratum: str, init: CotangentPoint, horizon: float = DEFAULT_HORIZON,
                      step: float = DEFAULT_STEP, A=1.0, B=0.0, tol: float = DEFAULT_CONSTRAINT_TOL,
                      check_type: bool = True) -> tuple[BiCharacteristic, PathOnZ]:
    """Integrate one of the four E-singular strata on T*Z.

    (a) H5 H1-field + H4 H3-field, (b) -H7 H1-field + H6 H2-field (or, with H6 = 0,
    A H1-field + B H3-field), (c) the H3-field, (d) A H2-field + B H3-field. The
    vanishing H_zeta of the stratum are re-projected each step and certified.
    """
    if stratum not in STRATA:
        raise ValueError(f"unknown stratum {stratum!r}; choose from {sorted(STRATA)}")
    if P.chart.params:
        raise ValueError(f"bind parameters {P.chart.params} first")
    z0 = init.base
    if stratum == "d" and check_type:
        g = P.growth_at(z0).ranks
        if g == REGULAR_GROWTH:
            raise RefusedByTheory(
                "E-singular paths with costate in the annihilator of E^(4) do not exist at regular points "
                f"(growth {'-'.join(map(str, g))} at z0)",
                {"growth": "-".join(map(str, g))},
            )
    found = stratum_of(P, z0, init.costate, max(tol, 1e-8))
    if found != stratum and not (stratum == "b" and found == "b2"):
        raise ValueError(f"initial costate lies in stratum {found!r}, not {stratum!r}")
    if stratum == "b" and found == "b2":
        stratum = "b2"
    nvanish, nonzero = STRATA[stratum]
    zeta_ev = FieldEvaluator(list(P.zeta))
    cons_ev = FieldEvaluator(list(P.zeta[:nvanish]))
    Af, Bf = _as_fn(A), _as_fn(B)

    def control(t, z, q):
        h = q @ zeta_ev(z)
        if stratum == "a":
            return np.array([h[4], 0.0, h[3]])
        if stratum == "b":
            return np.array([-h[6], h[5], 0.0])
        if stratum == "b2":
            return np.array([Af(t, z), 0.0, Bf(t, z)])
        if stratum == "c":
            return np.array([0.0, 0.0, 1.0])
        return np.array([0.0, Af(t, z), Bf(t, z)])

    system = HamiltonianSystem(P.zeta[:3])
    times = time_grid(horizon, step)
    bic = _integrate(system, z0, init.costate, control, times, cons_ev, tol, stratum=stratum)
    H = np.einsum("kn,knm->km", bic.costates, zeta_ev(bic.states))
    if nonzero is None:
        bic.nonvanishing = np.linalg.norm(bic.costates, axis=1)
    else:
        bic.nonvanishing = np.linalg.norm(H[:, [i - 1 for i in nonzero]], axis=1)
    vel = np.einsum("knm,km->kn", FieldEvaluator(list(P.zeta[:3]))(bic.states), bic.controls)
    return bic, PathOnZ(P.chart, bic.times, bic.states, vel)


def stratum_costate(P: ProlongedSystem, z, stratum: str, seed: int = 0) -> np.ndarray:
    """A costate at z in the given stratum: prescribed H_zeta with the leading ones zero."""
    rng = np.random.default_rng(seed)
    nvanish, _ = STRATA[stratum]
    h = np.zeros(9)
    h[nvanish:] = rng.normal(size=9 - nvanish)
    if stratum == "b2":
        h[5] = 0.0
    h[nvanish] = np.sign(h[nvanish] or 1.0) * max(abs(h[nvanish]), 0.5)
    return costate_from_hamiltonians(P, z, h)


# ---------------------------------------------------------------------------
# lifting and synthesis


def recover_controls(frame: Frame | Sequence[VectorField], path: SampledPath, tol: float = 1e-6) -> np.ndarray:
    """Least-squares controls u with velocity = frame(x) u; raises if the path leaves the distribution."""
    F = FieldEvaluator(list(frame.fields if isinstance(frame, Frame) else frame))
    M = F(path.points)
    u = np.zeros((path.times.size, M.shape[2]))
    for k in range(path.times.size):
        u[k], *_ = np.linalg.lstsq(M[k], path.velocities[k], rcond=None)
        r = np.linalg.norm(M[k] @ u[k] - path.velocities[k]) / max(1.0, np.linalg.norm(path.velocities[k]))
        if r > tol:
            raise NotIntegralError(f"velocity leaves the distribution at t={path.times[k]:.6g}: residual {r:.3g}")
    return u


def cone_residuals(u: np.ndarray) -> np.ndarray:
    u = np.atleast_2d(u)
    n = np.sum(u * u, axis=1)
    n[n == 0] = 1.0
    return np.abs(u[:, 0] * u[:, 3] - u[:, 1] * u[:, 2]) / n


def lift_to_Z(P: ProlongedSystem, gamma: PathOnX, tol_cone: float = 1e-8, chart_index: int | None = None) -> PathOnZ:
    """t -> (gamma(t), [gamma'(t)]) in a chart of the projectivized cone."""
    if chart_index is not None and chart_index != P.chart_index:
        raise ValueError("lift into the chart of the given prolongation")
    frame = P.model.numeric().fields
    u = recover_controls(frame, gamma)
    speeds = np.linalg.norm(u, axis=1)
    if np.any(speeds == 0):
        k = int(np.argmin(speeds))
        raise NotIntegralError(f"vanishing derivative at t={gamma.times[k]:.6g}")
    res = cone_residuals(u)
    if np.max(res) > tol_cone:
        k = int(np.argmax(res))
        raise NotIntegralError(f"derivative leaves the cone at t={gamma.times[k]:.6g}: residual {res[k]:.3g}")
    th, ph = np.array([fiber_coords(P.chart_index, uk) for uk in u]).T
    pts = np.column_stack([gamma.points, th, ph])
    vel = np.column_stack([gamma.velocities, CubicSpline(gamma.times, th)(gamma.times, 1),
                           CubicSpline(gamma.times, ph)(gamma.times, 1)])
    return PathOnZ(P.chart, gamma.times, pts, vel)


def preferred_chart(u) -> int:
    return best_chart(u)


@dataclass
class SingularSynthesis:
    path_x: PathOnX
    path_z: PathOnZ
    bichar: BiCharacteristic
    controls_x: np.ndarray  # u(t) in the original frame at the sample times
    costate_x: np.ndarray
    cone_residual_max: float
    fiber_costate_max: float  # max |lambda|, |mu| (relative)
    direction: dict = field(default_factory=dict)

    def certificate(self) -> dict:
        out = self.bichar.certificate()
        out.update({
            "cone_residual_max": self.cone_residual_max,
            "fiber_costate_max": self.fiber_costate_max,
            "immersive": self.path_x.is_immersive(),
        })
        return out

    def control_curve(self, nodes: int = 50) -> ControlCurve:
        t = self.path_x.times
        grid = np.linspace(t[0], t[-1], nodes)
        vals = np.column_stack([np.interp(grid, t, self.controls_x[:, i]) for i in range(4)])
        return ControlCurve(grid, vals)


def synthesize_singular(P: ProlongedSystem, z0, v2=1.0, v3=0.0, horizon: float = DEFAULT_HORIZON,
                        step: float = DEFAULT_STEP, tol: float = DEFAULT_CONSTRAINT_TOL, radius: float = 0.25,
                        samples: int = 200, seed: int = 0, check_type: bool = True) -> SingularSynthesis:
    """Integrate an F-curve (zdot = v2 zeta_2 + v3 zeta_3) from a C3 point and certify it.

    The certificate is the stratum-(d) bi-characteristic: costate annihilating
    zeta_1..zeta_8, so lambda = mu = 0 and its x-part is a costate for the base curve.
    """
    z0 = np.asarray(z0, float)
    v2f, v3f = _as_fn(v2), _as_fn(v3)
    if abs(v2f(0.0, z0)) < 1e-12:
        raise ValueError("v2 must be nonzero")
    dtype = None
    if check_type:
        dtype = direction_type(P, z0, radius=radius, samples=samples, seed=seed)
        if dtype.value != "C3":
            raise RefusedByTheory(
                f"direction is of {dtype.value} type (growth {dtype.growth} at z0); directions that are not of C3 "
                "type do not carry singular paths of this kind, and regular directions never belong to the "
                "singular velocity cone",
                dtype.as_dict(),
            )
    q0 = stratum_costate(P, z0, "d", seed)
    q0 = q0 / np.linalg.norm(q0)
    bic, pz = stratum_integrate(P, "d", CotangentPoint(z0, q0), horizon, step, A=v2f, B=v3f, tol=tol,
                                check_type=False)
    n = P.model.chart.dim
    xs = bic.states[:, :n]
    xv = pz.velocities[:, :n]
    path_x = PathOnX(P.model.chart, bic.times, xs, xv)
    u = np.array([v2f(t, z) * cone_vector(P.chart_index, z[-2], z[-1]) for t, z in zip(bic.times, bic.states)])
    pn = np.linalg.norm(bic.costates, axis=1)
    fiber = float(np.max(np.abs(bic.costates[:, n:]) / pn[:, None]))
    return SingularSynthesis(path_x, pz, bic, u, bic.costates[:, :n], float(np.max(cone_residuals(u))), fiber,
                             dtype.as_dict() if dtype else {})


# ---------------------------------------------------------------------------
# oracles


@dataclass
class AdjointCertificate:
    verdict: bool
    residual: float
    costate: np.ndarray
    combination: np.ndarray
    tol: float
    integral_residual: float

    def as_dict(self) -> dict:
        return {"verdict": bool(self.verdict), "max_residual": self.residual, "tolerance": self.tol,
                "costate_floor": float(np.min(np.linalg.norm(self.costate, axis=1)))}


def verify_singular_adjoint(frame: Frame | Sequence[VectorField], gamma: SampledPath, tol: float = ADJOINT_TOL,
                            tol_integral: float = 1e-6) -> AdjointCertificate:
    """Search D-perp at gamma(0) for a costate whose adjoint transport stays in D-perp.

    Controls come from least squares of the velocities onto the frame; the
    fundamental solution of pdot = -sum u_f (d field_f/dx)^T p is integrated for a
    basis of D-perp and the best combination is the smallest right singular
    vector of the stacked constraint values.
    """
    fields = list(frame.fields if isinstance(frame, Frame) else frame)
    system = HamiltonianSystem(fields)
    u = recover_controls(fields, gamma, tol_integral)
    t = gamma.times
    n, m = gamma.points.shape[1], len(fields)
    moving = np.any(np.abs(u) > 0)
    P0 = annihilator(Frame(system.chart, fields), gamma.points[0])
    r = P0.shape[1]
    if moving:
        xs = CubicHermiteSpline(t, gamma.points, gamma.velocities)
        us = CubicSpline(t, u)

        def rhs(s, y):
            x = xs(s)
            J = system.J(x)
            Phi = y.reshape(n, r)
            return -np.einsum("f,fki,kr->ir", us(s), J, Phi).ravel()

        sol = solve_ivp(rhs, (t[0], t[-1]), P0.ravel(), t_eval=t, method="DOP853", rtol=1e-11, atol=1e-13)
        if not sol.success:
            raise IntegrationError(f"adjoint integration failed: {sol.message}")
        Phis = sol.y.T.reshape(-1, n, r)
    else:
        Phis = np.repeat(P0[None], t.size, axis=0)
    D = system.F(gamma.points)  # (K, n, m)
    Dn = D / np.maximum(np.linalg.norm(D, axis=1, keepdims=True), 1e-300)
    C = np.einsum("knm,knr->kmr", Dn, Phis)  # constraints per basis costate
    _, s, Vt = np.linalg.svd(C.reshape(-1, r))
    c = Vt[-1]
    costate = np.einsum("knr,r->kn", Phis, c)
    res = np.abs(np.einsum("kmr,r->km", C, c)).max(axis=1) / np.linalg.norm(costate, axis=1)
    resid = float(np.max(res))
    return AdjointCertificate(resid < tol, resid, costate, c, tol, 0.0)


@dataclass
class EndpointReport:
    rank: int
    singular_values: np.ndarray
    sigma_ratio: float
    critical: bool
    tol: float
    nodes: int

    def as_dict(self) -> dict:
        return {
            "rank": self.rank,
            "sigma_ratio": self.sigma_ratio,
            "critical": bool(self.critical),
            "tolerance": self.tol,
            "nodes": self.nodes,
            "singular_values": [float(v) for v in self.singular_values],
        }


def endpoint_map(fields, controls: ControlCurve, x0, substeps: int = 21) -> np.ndarray:
    return _endpoint_batch(FieldEvaluator(list(fields.fields if isinstance(fields, Frame) else fields)),
                           controls, controls.values[None], np.asarray(x0, float), substeps)[0]


def _endpoint_batch(F: FieldEvaluator, controls: ControlCurve, coeffs: np.ndarray, x0: np.ndarray,
                    substeps: int) -> np.ndarray:
    """Endpoints for a batch of piecewise-linear control coefficient sets (B, N, m) on a node-aligned RK4 grid."""
    B = coeffs.shape[0]
    x = np.tile(x0, (B, 1))
    times = controls.times

    def u_at(t):
        return np.einsum("k,bkm->bm", controls.hat_weights(t), coeffs)

    def f(x, u):
        return np.einsum("bnm,bm->bn", F(x), u)

    for k in range(times.size - 1):
        h = (times[k + 1] - times[k]) / substeps
        for j in range(substeps):
            t = times[k] + j * h
            # stay inside the current interval so the hat weights are exact
            ua, ub, uc = u_at(t), u_at(t + 0.5 * h), u_at(min(t + h, times[k + 1]))
            k1 = f(x, ua)
            k2 = f(x + 0.5 * h * k1, ub)
            k3 = f(x + 0.5 * h * k2, ub)
            k4 = f(x + h * k3, uc)
            x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def endpoint_jacobian_rank(frame, controls: ControlCurve, x0, fd_step: float = FD_STEP, tol: float = ENDPOINT_TOL,
                           substeps: int = 21, chunk: int | None = None) -> EndpointReport:
    """Central-difference Jacobian of the endpoint in the 4N control coefficients and its spectrum."""
    fields = list(frame.fields if isinstance(frame, Frame) else frame)
    F = FieldEvaluator(fields)
    if controls.nodes < 2:
        raise ValueError("need at least two control nodes")
    N, m = controls.values.shape
    base = controls.values
    pert = []
    for k in range(N):
        for i in range(m):
            for sgn in (1.0, -1.0):
                c = base.copy()
                c[k, i] += sgn * fd_step
                pert.append(c)
    pert = np.array(pert)
    x0 = np.asarray(x0, float)
    if chunk is None:
        chunk = -(-len(pert) // thread_count())
    chunks = [pert[s : s + chunk] for s in range(0, len(pert), chunk)]
    ends = np.concatenate(parallel_map(lambda c: _endpoint_batch(F, controls, c, x0, substeps), chunks))
    if not np.all(np.isfinite(ends)):
        raise IntegrationError("endpoint integration produced non-finite values")
    J = ((ends[0::2] - ends[1::2]) / (2 * fd_step)).T  # (n, N*m)
    s = np.linalg.svd(J, compute_uv=False)
    n = J.shape[0]
    ratio = float(s[n - 1] / s[0]) if s[0] > 0 and s.size >= n else 0.0
    return EndpointReport(numerical_rank(J, tol), s, ratio, ratio < tol, tol, N)


def smooth_random_controls(rng: np.random.Generator, nodes: int = 50, width: int = 4, modes: int = 3,
                           horizon: float = DEFAULT_HORIZON, amplitude: float = 1.0) -> ControlCurve:
    """Sums of a few random sinusoids sampled on a uniform node grid."""
    t = np.linspace(0.0, horizon, nodes)
    vals = np.zeros((nodes, width))
    for i in range(width):
        a = rng.normal(size=modes) * amplitude / np.sqrt(modes)
        ph = rng.uniform(0, 2 * np.pi, size=modes)
        vals[:, i] = rng.normal() * amplitude + sum(a[j] * np.sin((j + 1) * np.pi * t / horizon + ph[j]) for j in range(modes))
    return ControlCurve(t, vals)


def integrate_path(frame, controls: ControlCurve, x0, substeps: int = 21) -> PathOnX:
    """Base curve of piecewise-linear controls sampled on the node-aligned RK4 grid."""
    fields = list(frame.fields if isinstance(frame, Frame) else frame)
    F = FieldEvaluator(fields)
    x = np.asarray(x0, float).copy()
    ts, xs, vs = [controls.times[0]], [x.copy()], [F(x) @ controls(controls.times[0])]
    for k in range(controls.nodes - 1):
        h = (controls.times[k + 1] - controls.times[k]) / substeps
        for j in range(substeps):
            t = controls.times[k] + j * h
            ua, ub, uc = controls(t), controls(t + 0.5 * h), controls(min(t + h, controls.times[k + 1]))
            k1 = F(x) @ ua
            k2 = F(x + 0.5 * h * k1) @ ub
            k3 = F(x + 0.5 * h * k2) @ ub
            k4 = F(x + h * k3) @ uc
            x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            ts.append(t + h)
            xs.append(x.copy())
            vs.append(F(x) @ uc)
    chart = fields[0].chart
    return PathOnX(chart, np.array(ts), np.array(xs), np.array(vs))


@dataclass
class OracleCase:
    kind: str  # "singular" | "generic"
    adjoint: bool
    adjoint_residual: float
    endpoint_ratio: float
    endpoint_critical: bool

    @property
    def agree(self) -> bool:
        return self.adjoint == self.endpoint_critical


@dataclass
class OracleBattery:
    cases: list[OracleCase]
    gap: float  # min generic ratio / max singular ratio
    inconclusive: bool

    @property
    def agreement(self) -> int:
        return sum(c.agree for c in self.cases)

    def as_dict(self) -> dict:
        return {
            "cases": len(self.cases),
            "agreement": self.agreement,
            "gap": self.gap,
            "inconclusive": self.inconclusive,
            "max_singular_ratio": max((c.endpoint_ratio for c in self.cases if c.kind == "singular"), default=None),
            "min_generic_ratio": min((c.endpoint_ratio for c in self.cases if c.kind == "generic"), default=None),
        }


def random_c3_point(P: ProlongedSystem, rng: np.random.Generator, box: float = 0.5, fiber: float = 1.0) -> np.ndarray:
    x = rng.uniform(-box, box, P.chart.dim - 2)
    return np.concatenate([x, rng.uniform(-fiber, fiber, 2)])


def singular_case(P: ProlongedSystem, rng: np.random.Generator, nodes: int = 50, check_type: bool = False):
    """One synthesized singular path with random C3 start and constant controls."""
    z0 = random_c3_point(P, rng)
    v2 = rng.choice([-1, 1]) * rng.uniform(0.5, 1.5)
    v3 = rng.uniform(-1, 1)
    syn = synthesize_singular(P, z0, v2, v3, seed=int(rng.integers(1 << 31)), check_type=check_type)
    return syn, syn.control_curve(nodes)


def oracle_battery(P: ProlongedSystem, n_singular: int = 20, n_generic: int = 20, seed: int = 0, nodes: int = 50,
                   tol_adjoint: float = ADJOINT_TOL, tol_endpoint: float = ENDPOINT_TOL, check_type: bool = False) -> OracleBattery:
    """Run both oracles on synthesized singular paths and generic-control paths."""
    rng = np.random.default_rng(seed)
    frame = P.model.numeric().fields
    jobs = []
    for _ in range(n_singular):
        jobs.append(("singular", int(rng.integers(1 << 31))))
    for _ in range(n_generic):
        jobs.append(("generic", int(rng.integers(1 << 31))))

    def run(job):
        kind, s = job
        r = np.random.default_rng(s)
        if kind == "singular":
            syn, ctrl = singular_case(P, r, nodes, check_type)
            gamma, x0 = syn.path_x, syn.path_x.points[0]
        else:
            ctrl = smooth_random_controls(r, nodes)
            x0 = r.uniform(-0.5, 0.5, P.model.chart.dim)
            gamma = integrate_path(frame, ctrl, x0)
        adj = verify_singular_adjoint(frame, gamma, tol_adjoint)
        ep = endpoint_jacobian_rank(frame, ctrl, x0, tol=tol_endpoint)
        return OracleCase(kind, adj.verdict, adj.residual, ep.sigma_ratio, ep.critical)

    cases = [run(j) for j in jobs]
    sing = [c.endpoint_ratio for c in cases if c.kind == "singular"]
    gen = [c.endpoint_ratio for c in cases if c.kind == "generic"]
    gap = (min(gen) / max(max(sing), 1e-300)) if sing and gen else np.inf
    return OracleBattery(cases, gap, bool(gap < 100.0))
