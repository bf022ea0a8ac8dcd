"""Weak derived flags, growth vectors, graded symbol algebras and Frobenius tests."""

from __future__ import annotations

import csv
import io
import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
from scipy.optimize import least_squares

from .geometry import (
    DEFAULT_RANK_TOL,
    FieldEvaluator,
    Frame,
    VectorField,
    lie_bracket,
    numerical_rank,
    parallel_map,
)

DEFAULT_DEPTH_CAP = 6


def _scale_key(vf: VectorField):
    """Identify fields that differ by a nonzero rational factor."""
    return vf.normalized()


class DerivedFlag:
    """Generator sets of E^(1) c E^(2) c ... with E^(r+1) = E^(r) + [E, E^(r)].

    Levels are built lazily: a new level brackets the level-1 generators with the
    generators first added at the previous level (older brackets are already in
    E^(r)). Zero brackets and rational multiples of existing generators are dropped.
    """

    def __init__(self, fields: Sequence[VectorField] | Frame, depth_cap: int = DEFAULT_DEPTH_CAP):
        if depth_cap < 1:
            raise ValueError("depth_cap must be >= 1")
        fields = list(fields.fields if isinstance(fields, Frame) else fields)
        if not fields:
            raise ValueError("empty frame")
        self.chart = fields[0].chart
        self.depth_cap = depth_cap
        self._lock = threading.RLock()
        self._seen = set()
        base = []
        for f in fields:
            if not f.is_zero() and _scale_key(f) not in self._seen:
                self._seen.add(_scale_key(f))
                base.append(f)
        self._new: list[list[VectorField]] = [base]
        self._evaluators: dict[int, FieldEvaluator] = {}
        self._exhausted = False

    @property
    def base(self) -> list[VectorField]:
        return self._new[0]

    @property
    def depth(self) -> int:
        return len(self._new)

    def new_at(self, level: int) -> list[VectorField]:
        """Generators first added at ``level`` (1-based)."""
        self.ensure(level)
        return self._new[level - 1] if level <= len(self._new) else []

    def level(self, r: int) -> list[VectorField]:
        """All generators of E^(r)."""
        self.ensure(r)
        out = []
        for gens in self._new[: min(r, len(self._new))]:
            out.extend(gens)
        return out

    @property
    def levels(self) -> list[list[VectorField]]:
        return [self.level(r) for r in range(1, self.depth + 1)]

    def ensure(self, r: int) -> None:
        r = min(r, self.depth_cap)
        with self._lock:
            while len(self._new) < r and not self._exhausted:
                new = []
                for f in self.base:
                    for g in self._new[-1]:
                        br = lie_bracket(f, g)
                        if br.is_zero():
                            continue
                        key = _scale_key(br)
                        if key in self._seen:
                            continue
                        self._seen.add(key)
                        new.append(br)
                if not new:
                    self._exhausted = True
                    break
                self._new.append(new)

    def evaluator(self, r: int) -> FieldEvaluator:
        self.ensure(r)
        r = min(r, len(self._new))
        with self._lock:
            ev = self._evaluators.get(r)
            if ev is None:
                ev = FieldEvaluator([g for gens in self._new[:r] for g in gens])
                self._evaluators[r] = ev
        return ev

    def ranks_at(self, point, tol: float = DEFAULT_RANK_TOL, stop_at_full: bool = True) -> list[int]:
        """Pointwise ranks of E^(1), E^(2), ... (built on demand up to the depth cap)."""
        point = np.asarray(point, float)
        dim = self.chart.dim
        ranks = []
        r = 1
        while r <= self.depth_cap:
            self.ensure(r)
            if r > len(self._new):
                break
            M = self.evaluator(r)(point)
            ranks.append(numerical_rank(M, tol))
            if stop_at_full and ranks[-1] == dim:
                break
            r += 1
        return ranks


def weak_derived_flag(F: Frame | Sequence[VectorField], depth_cap: int = DEFAULT_DEPTH_CAP) -> DerivedFlag:
    return DerivedFlag(F, depth_cap)


@dataclass(frozen=True)
class GrowthVector:
    ranks: tuple[int, ...]
    point: tuple[float, ...]
    complete: bool  # reached the chart dimension

    def __str__(self):
        return "-".join(str(r) for r in self.ranks)


def _truncate(ranks: list[int], dim: int) -> tuple[tuple[int, ...], bool]:
    if dim in ranks:
        return tuple(ranks[: ranks.index(dim) + 1]), True
    out = []
    for r in ranks:
        if out and r == out[-1]:
            continue
        out.append(r)
    return tuple(out), False


def growth_vector_at(flag: DerivedFlag, point, tol: float = DEFAULT_RANK_TOL) -> GrowthVector:
    """Small growth at ``point``, truncated once the chart dimension is reached.

    If the ranks stall below the chart dimension up to the depth cap, repeated
    entries are collapsed and ``complete`` is False.
    """
    ranks = flag.ranks_at(point, tol)
    out, complete = _truncate(ranks, flag.chart.dim)
    return GrowthVector(out, tuple(float(v) for v in np.asarray(point, float)), complete)


def growth_vectors(flag: DerivedFlag, points, tol: float = DEFAULT_RANK_TOL) -> list[GrowthVector]:
    pts = np.atleast_2d(np.asarray(points, float))
    flag.ensure(flag.depth_cap)
    return parallel_map(lambda p: growth_vector_at(flag, p, tol), pts)


def growth_csv(growths: Sequence[GrowthVector], coord_names: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(coord_names) + ["growth"])
    for g in growths:
        w.writerow([repr(v) for v in g.point] + [str(g)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# symbol algebra


class SymbolError(ValueError):
    pass


@dataclass
class SymbolAlgebra:
    """Graded nilpotent algebra g_-1 + ... + g_-k at a point.

    ``constants[a, b, c]`` is the g-component of [e_a, e_b] along e_c, with basis
    elements ordered by degree; ``degrees[a]`` is the (positive) degree of e_a.
    """

    sizes: tuple[int, ...]
    constants: np.ndarray
    representatives: list[VectorField] = field(default_factory=list, repr=False)
    leakage: float = 0.0  # largest component of a bracket above its target degree (should be ~0)

    @property
    def dim(self) -> int:
        return int(sum(self.sizes))

    @property
    def degrees(self) -> np.ndarray:
        return np.repeat(np.arange(1, len(self.sizes) + 1), self.sizes)

    def bracket(self, x, y) -> np.ndarray:
        return np.einsum("a,b,abc->c", np.asarray(x, float), np.asarray(y, float), self.constants)

    def antisymmetry_residual(self) -> float:
        return float(np.max(np.abs(self.constants + self.constants.transpose(1, 0, 2)), initial=0.0))

    def grading_residual(self) -> float:
        deg = self.degrees
        mask = deg[:, None, None] + deg[None, :, None] != deg[None, None, :]
        return float(np.max(np.abs(self.constants[mask]), initial=0.0))

    def jacobi_residual(self) -> float:
        C = self.constants
        # [[a,b],c] + [[b,c],a] + [[c,a],b]
        t = np.einsum("abm,mcd->abcd", C, C)
        J = t + t.transpose(1, 2, 0, 3) + t.transpose(2, 0, 1, 3)
        scale = max(1.0, float(np.max(np.abs(C), initial=0.0)) ** 2)
        return float(np.max(np.abs(J), initial=0.0)) / scale


def symbol_algebra_at(flag: DerivedFlag, point, tol: float = DEFAULT_RANK_TOL) -> SymbolAlgebra:
    """Symbol algebra from graded representatives chosen among the flag's generators.

    At each level the new generators are projected off the span of the lower
    levels and a pivoted QR picks those completing the span; brackets of the
    representatives are expressed in the full representative basis and only the
    component of the target degree is kept.
    """
    point = np.asarray(point, float)
    ranks = flag.ranks_at(point, tol)
    dim = flag.chart.dim
    if ranks[-1] != dim:
        raise SymbolError(f"growth {ranks} does not reach dimension {dim}")
    if any(b <= a for a, b in zip(ranks, ranks[1:])):
        raise SymbolError(f"degenerate growth {ranks}: repeated ranks")
    sizes = tuple(np.diff([0] + ranks))
    reps: list[VectorField] = []
    cols = np.zeros((dim, 0))
    for level, size in enumerate(sizes, start=1):
        cand = flag.new_at(level)
        V = FieldEvaluator(cand)(point)
        if cols.shape[1]:
            Q, _ = np.linalg.qr(cols)
            R = V - Q @ (Q.T @ V)
        else:
            R = V
        _, _, piv = scipy.linalg.qr(R, pivoting=True)
        chosen = [int(k) for k in piv[:size]]
        reps.extend(cand[k] for k in chosen)
        cols = np.hstack([cols, V[:, chosen]])
    if numerical_rank(cols, tol) != dim:
        raise SymbolError("representatives do not span the tangent space")
    deg = np.repeat(np.arange(1, len(sizes) + 1), sizes)
    n = len(reps)
    pairs = [(a, b) for a in range(n) for b in range(a + 1, n)]
    brackets = FieldEvaluator([lie_bracket(reps[a], reps[b]) for a, b in pairs])(point)
    coef = np.linalg.solve(cols, brackets)
    C = np.zeros((n, n, n))
    leak = 0.0
    for k, (a, b) in enumerate(pairs):
        target = deg[a] + deg[b]
        v = coef[:, k]
        above = deg > target
        if np.any(above):
            leak = max(leak, float(np.max(np.abs(v[above]))))
        part = np.where(deg == target, v, 0.0)
        C[a, b] = part
        C[b, a] = -part
    scale = float(np.max(np.abs(coef), initial=1.0))
    return SymbolAlgebra(sizes, C, reps, leak / max(scale, 1.0))


# the C3 table, 0-based: (i, j) -> {k: coefficient}
C3_TABLE = {
    (0, 1): {3: 1},
    (0, 2): {},
    (1, 2): {4: 1},
    (0, 3): {},
    (0, 4): {5: 1},
    (1, 3): {},
    (1, 4): {6: 1},
    (2, 3): {5: -1},
    (2, 4): {},
    (0, 5): {},
    (0, 6): {7: 2},
    (1, 5): {7: 1},
    (1, 6): {},
    (2, 5): {},
    (2, 6): {},
    (0, 7): {8: 1},
    (1, 7): {},
    (2, 7): {},
    # brackets inside g_-2 + g_-3, forced by Jacobi from the ones above
    (3, 4): {7: 1},
    (3, 5): {8: 1},
    (3, 6): {},
    (4, 5): {},
    (4, 6): {},
}
C3_SIZES = (3, 2, 2, 1, 1)


def c3_model_algebra() -> SymbolAlgebra:
    """The C3 table itself as a graded algebra (remaining brackets vanish by degree)."""
    C = np.zeros((9, 9, 9))
    for (i, j), entries in C3_TABLE.items():
        for k, val in entries.items():
            C[i, j, k] = val
            C[j, i, k] = -val
    return SymbolAlgebra(C3_SIZES, C)


@dataclass
class C3Witness:
    found: bool
    basis: np.ndarray  # columns v1..v9 in the algebra's basis
    residual: float
    restarts_used: int
    table_error: float  # max deviation of the witnessed constants from the table
    diagnostic: str = ""


def _c3_basis(S: SymbolAlgebra, g1: np.ndarray) -> np.ndarray:
    v = [None] * 9
    for k in range(3):
        x = np.zeros(S.dim)
        x[:3] = g1[:, k]
        v[k] = x
    v[3] = S.bracket(v[0], v[1])
    v[4] = S.bracket(v[1], v[2])
    v[5] = S.bracket(v[0], v[4])
    v[6] = S.bracket(v[1], v[4])
    v[7] = S.bracket(v[1], v[5])
    v[8] = S.bracket(v[0], v[7])
    return np.column_stack(v)


def _c3_residuals(S: SymbolAlgebra, g1: np.ndarray) -> np.ndarray:
    B = _c3_basis(S, g1)
    defined = {(0, 1), (1, 2), (0, 4), (1, 4), (1, 5), (0, 7)}
    res = []
    for (i, j), entries in C3_TABLE.items():
        if (i, j) in defined:
            continue
        target = np.zeros(S.dim)
        for k, val in entries.items():
            target += val * B[:, k]
        res.append(S.bracket(B[:, i], B[:, j]) - target)
    res.append(np.array([B[-1, 8] - 1.0]))
    return np.concatenate(res)


def check_c3_symbol(S: SymbolAlgebra, restarts: int = 20, seed: int = 0, tol: float = 1e-9) -> C3Witness:
    """Search for a graded basis of ``S`` realizing the C3 table.

    Unknowns are the three degree-1 vectors; the higher basis vectors are their
    brackets, the remaining table relations plus a normalization of v9 are solved
    by least squares from random starts. A failed search means "not found".
    """
    if tuple(S.sizes) != C3_SIZES:
        return C3Witness(False, np.zeros((S.dim, 0)), np.inf, 0, np.inf, f"grading sizes {tuple(S.sizes)} != {C3_SIZES}")
    rng = np.random.default_rng(seed)
    best = None
    for attempt in range(1, restarts + 1):
        x0 = rng.normal(size=9)
        sol = least_squares(lambda g: _c3_residuals(S, g.reshape(3, 3)), x0, xtol=1e-15, ftol=1e-15, gtol=1e-15)
        g1 = sol.x.reshape(3, 3)
        B = _c3_basis(S, g1)
        resid = float(np.max(np.abs(_c3_residuals(S, g1))))
        indep = numerical_rank(B, 1e-9) == 9
        if best is None or (indep, -resid) > (best[2], -best[1]):
            best = (B, resid, indep, attempt)
        if indep and resid < tol:
            break
    B, resid, indep, attempt = best
    ok = indep and resid < tol
    table_error = np.inf
    if indep:
        # constants of S re-expressed in the witness basis
        Binv = np.linalg.inv(B)
        W = np.einsum("ia,jb,ijk,ck->abc", B, B, S.constants, Binv)
        table_error = float(np.max(np.abs(W - c3_model_algebra().constants)))
        ok = ok and table_error < max(tol, 1e-8) * max(1.0, float(np.linalg.cond(B)))
    diag = "" if ok else ("basis degenerate" if not indep else f"residual {resid:.3g}")
    return C3Witness(bool(ok), B, resid, attempt, table_error, diag)


# ---------------------------------------------------------------------------
# Frobenius


@dataclass
class FrobeniusReport:
    integrable: bool
    max_residual: float
    worst_pair: tuple[int, int] | None
    worst_point: np.ndarray | None
    diagnostic: str = ""

    def __bool__(self):
        return self.integrable


def frobenius_check(generators: Sequence[VectorField], samples, tol: float = 1e-9,
                    tol_rank: float = DEFAULT_RANK_TOL) -> FrobeniusReport:
    """Relative residual of every pairwise bracket after projection onto the generators' span."""
    gens = list(generators)
    pts = np.atleast_2d(np.asarray(samples, float))
    pairs = [(i, j) for i in range(len(gens)) for j in range(i + 1, len(gens))]
    G = FieldEvaluator(gens)(pts)
    if not pairs:
        return FrobeniusReport(True, 0.0, None, None)
    B = FieldEvaluator([lie_bracket(gens[i], gens[j]) for i, j in pairs])(pts)
    worst = (0.0, None, None)
    for p, Gp, Bp in zip(pts, G, B):
        if numerical_rank(Gp, tol_rank) != len(gens):
            return FrobeniusReport(False, np.inf, None, p, "generators are pointwise dependent")
        coef, *_ = np.linalg.lstsq(Gp, Bp, rcond=None)
        R = Bp - Gp @ coef
        rel = np.linalg.norm(R, axis=0) / np.maximum(1.0, np.linalg.norm(Bp, axis=0))
        k = int(np.argmax(rel))
        if rel[k] > worst[0]:
            worst = (float(rel[k]), pairs[k], p)
    return FrobeniusReport(worst[0] < tol, worst[0], worst[1], worst[2])


def frobenius_integrable(generators: Sequence[VectorField], samples, tol: float = 1e-9) -> bool:
    return frobenius_check(generators, samples, tol).integrable
