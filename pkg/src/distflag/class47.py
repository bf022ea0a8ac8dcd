"""Rank-4 distributions on 7-dimensional charts: (4,7) test, adapted frames,
constraint matrices, the characteristic cone and the conformal quadric."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import scipy.linalg
from scipy.optimize import brentq

from .geometry import (
    FieldEvaluator,
    Frame,
    VectorField,
    lie_bracket,
    numerical_rank,
    span_residual,
)

PAIRS = tuple(combinations(range(4), 2))
CONE_TOL = 1e-8
EIG_TOL = 1e-6
FIT_TOL = 1e-6


class NotA47Error(ValueError):
    pass


def _check_shape(F: Frame):
    if len(F) != 4 or F.chart.dim != 7:
        raise NotA47Error(f"expected 4 fields on a 7-dimensional chart, got {len(F)} on {F.chart.dim}")


@dataclass(frozen=True)
class BracketTable:
    """All six brackets of a 4-field frame plus a fixed complement of D in TX."""

    frame: Frame
    brackets: dict
    complement: np.ndarray = field(repr=False)

    def __getitem__(self, ij) -> VectorField:
        i, j = ij
        if i == j:
            return self.frame.chart.field({})
        if i < j:
            return self.brackets[(i, j)]
        return -self.brackets[(j, i)]

    def classes_at(self, x) -> dict:
        """Coefficients of each bracket modulo D in the complement basis, at ``x``."""
        D = self.frame.eval(x)
        basis = np.hstack([D, self.complement])
        out = {}
        for key, vf in self.brackets.items():
            coef = np.linalg.solve(basis, vf.eval(x))
            out[key] = coef[4:]
        return out


def bracket_table(F: Frame, base_point=None) -> BracketTable:
    """Brackets [xi_i, xi_j] (1-based keys) and a complement chosen by pivoted QR at the base point."""
    _check_shape(F)
    brackets = {(i + 1, j + 1): lie_bracket(F[i], F[j]) for i, j in PAIRS}
    x0 = np.zeros(F.chart.dim) if base_point is None else np.asarray(base_point, float)
    D = F.eval(x0)
    B = np.column_stack([brackets[k].eval(x0) for k in sorted(brackets)])
    Q, _ = np.linalg.qr(D)
    resid = B - Q @ (Q.T @ B)
    _, _, piv = scipy.linalg.qr(resid, pivoting=True)
    complement = B[:, piv[:3]]
    return BracketTable(F, brackets, complement)


def _bracket_evaluator(F: Frame) -> FieldEvaluator:
    return FieldEvaluator([lie_bracket(F[i], F[j]) for i, j in PAIRS])


def is_47_failures(F: Frame, samples, tol_rel: float = 1e-9) -> list:
    """Sample points where the frame is not rank 4 or fields + brackets do not span rank 7."""
    _check_shape(F)
    pts = np.atleast_2d(np.asarray(samples, float))
    fields = F.evaluator()(pts)
    brackets = _bracket_evaluator(F)(pts)
    bad = []
    for p, D, B in zip(pts, fields, brackets):
        r4 = numerical_rank(D, tol_rel)
        if r4 != 4:
            bad.append((p, f"frame rank {r4} != 4"))
            continue
        r7 = numerical_rank(np.hstack([D, B]), tol_rel)
        if r7 != 7:
            bad.append((p, f"fields and brackets span rank {r7} != 7"))
    return bad


def is_47(F: Frame, samples, tol_rel: float = 1e-9) -> bool:
    return not is_47_failures(F, samples, tol_rel)


def _relative_residual(D: np.ndarray, v: np.ndarray) -> float:
    return span_residual(D, v) / max(1.0, float(np.linalg.norm(v)))


def adapted_residuals(F: Frame, samples) -> np.ndarray:
    """Per sample: residuals of [1,2], [3,4] and [1,4]-[2,3] modulo D."""
    _check_shape(F)
    pts = np.atleast_2d(np.asarray(samples, float))
    br = {(i, j): lie_bracket(F[i], F[j]) for i, j in PAIRS}
    checks = FieldEvaluator([br[(0, 1)], br[(2, 3)], br[(0, 3)] - br[(1, 2)]])(pts)
    fields = F.evaluator()(pts)
    out = np.zeros((len(pts), 3))
    for n, (D, C) in enumerate(zip(fields, checks)):
        out[n] = [_relative_residual(D, C[:, k]) for k in range(3)]
    return out


def verify_adapted(F: Frame, samples, tol: float = 1e-9, tol_rank: float = 1e-9) -> bool:
    """Adapted-frame congruences hold mod D and xi_1..4, [1,3], [1,4], [2,4] frame TX."""
    pts = np.atleast_2d(np.asarray(samples, float))
    if np.max(adapted_residuals(F, pts)) >= tol:
        return False
    ext = FieldEvaluator(list(F.fields) + [lie_bracket(F[0], F[2]), lie_bracket(F[0], F[3]), lie_bracket(F[1], F[3])])
    return all(numerical_rank(M, tol_rank) == 7 for M in ext(pts))


def constraint_matrix(F: Frame, x, p) -> np.ndarray:
    """4x4 skew matrix with entries <p, [xi_i, xi_j](x)>."""
    _check_shape(F)
    p = np.asarray(p, float)
    vals = _bracket_evaluator(F)(np.asarray(x, float))
    h = p @ vals
    A = np.zeros((4, 4))
    for k, (i, j) in enumerate(PAIRS):
        A[i, j] = h[k]
        A[j, i] = -h[k]
    return A


def annihilator(F: Frame, x) -> np.ndarray:
    """Orthonormal basis (as columns) of the covectors vanishing on D at ``x``."""
    D = F.eval(x)
    U, s, _ = np.linalg.svd(D, full_matrices=True)
    r = int(np.sum(s > 1e-12 * s[0]))
    return U[:, r:]


def _cone_blocks(F: Frame, x) -> np.ndarray:
    """Stack of constraint matrices A_k for an orthonormal basis p_k of D-perp: shape (k, 4, 4)."""
    P = annihilator(F, x)
    vals = _bracket_evaluator(F)(np.asarray(x, float))
    blocks = []
    for k in range(P.shape[1]):
        h = P[:, k] @ vals
        A = np.zeros((4, 4))
        for n, (i, j) in enumerate(PAIRS):
            A[i, j] = h[n]
            A[j, i] = -h[n]
        blocks.append(A)
    return np.array(blocks)


def cone_matrix(blocks: np.ndarray, u) -> np.ndarray:
    """Columns A_k u; a nonzero costate in D-perp with A(p) u = 0 exists iff this drops rank."""
    return np.einsum("kij,j->ik", blocks, np.asarray(u, float))


def cone_indicator(blocks: np.ndarray, u) -> float:
    s = np.linalg.svd(cone_matrix(blocks, u), compute_uv=False)
    return float(s[-1] / s[0]) if s[0] > 0 else 0.0


def cone_membership(F: Frame, x, u, tol: float = CONE_TOL, adapted: bool = False) -> bool:
    u = np.asarray(u, float)
    if not np.any(u):
        return True
    if adapted:
        return abs(u[0] * u[3] - u[1] * u[2]) < tol * float(u @ u)
    blocks = _cone_blocks(F, x)
    return numerical_rank(cone_matrix(blocks, u), tol) <= blocks.shape[0] - 1


def adapted_cone_residual(u) -> float:
    u = np.asarray(u, float)
    n = float(u @ u)
    return abs(u[0] * u[3] - u[1] * u[2]) / n if n > 0 else 0.0


# ---------------------------------------------------------------------------
# conformal quadric

_SYM_INDEX = [(i, j) for i in range(4) for j in range(i, 4)]


def _quadric_features(U: np.ndarray) -> np.ndarray:
    """Monomials u_i u_j (i <= j, off-diagonal doubled) so that features @ q = u^T Q u."""
    cols = []
    for i, j in _SYM_INDEX:
        cols.append(U[:, i] * U[:, j] * (1.0 if i == j else 2.0))
    return np.column_stack(cols)


def _sym_from_vec(q: np.ndarray) -> np.ndarray:
    Q = np.zeros((4, 4))
    for k, (i, j) in enumerate(_SYM_INDEX):
        Q[i, j] = Q[j, i] = q[k]
    return Q


def _minors(M: np.ndarray) -> np.ndarray:
    """The four maximal minors of a 4x3 matrix (row k deleted)."""
    return np.array([np.linalg.det(np.delete(M, k, axis=0)) for k in range(4)])


@dataclass
class Signature:
    kind: str  # "elliptic" | "hyperbolic" | "degenerate"
    quadric: np.ndarray
    eigenvalues: np.ndarray
    residual: float
    samples_used: int
    cone_samples: np.ndarray
    diagnostic: str = ""

    def as_dict(self) -> dict:
        return {
            "type": self.kind,
            "quadric_matrix": np.round(self.quadric, 12).tolist(),
            "eigenvalues": np.round(self.eigenvalues, 12).tolist(),
            "residual": float(self.residual),
            "samples_used": int(self.samples_used),
            "cone_samples_found": int(len(self.cone_samples)),
            "diagnostic": self.diagnostic,
        }


def fit_quadric(blocks: np.ndarray, rng: np.random.Generator, n: int = 60):
    """Recover Q with minors(M(u)) = Q(u) * L u.

    The linear forms L are the 1-dimensional solution of m_i (Lu)_j = m_j (Lu)_i
    on sampled u; Q then follows from a linear least-squares fit.
    """
    U = rng.normal(size=(n, 4))
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    m = np.array([_minors(cone_matrix(blocks, u)) for u in U])
    scale = np.max(np.abs(m)) or 1.0
    m = m / scale
    rows = []
    for u, mu in zip(U, m):
        for i, j in combinations(range(4), 2):
            row = np.zeros(16)
            row[j * 4 : j * 4 + 4] += mu[i] * u
            row[i * 4 : i * 4 + 4] -= mu[j] * u
            rows.append(row)
    A = np.array(rows)
    _, s, Vt = np.linalg.svd(A)
    L = Vt[-1].reshape(4, 4)
    null_gap = s[-1] / s[0], (s[-2] / s[0] if len(s) > 1 else 1.0)
    lu = U @ L.T
    feats = _quadric_features(U)
    design = np.vstack([feats * lu[:, [i]] for i in range(4)])
    target = np.concatenate([m[:, i] for i in range(4)])
    q, *_ = np.linalg.lstsq(design, target, rcond=None)
    resid = float(np.max(np.abs(design @ q - target)))
    Q = _sym_from_vec(q)
    normQ = np.linalg.norm(Q)
    if normQ > 0:
        Q = Q / normQ
        resid = resid / max(normQ, 1e-300)
    return Q, resid, null_gap


def sample_cone_directions(blocks: np.ndarray, rng: np.random.Generator, circles: int = 12, resolution: int = 360,
                           tol: float = 1e-10) -> np.ndarray:
    """Cone directions on random great circles of the unit 3-sphere.

    Near each local minimum of the rank indicator the minors vector flips
    orientation, so the crossing is refined with brentq on its projection.
    """
    found = []
    s_grid = np.linspace(0.0, np.pi, resolution, endpoint=False)
    h = s_grid[1] - s_grid[0]
    for _ in range(circles):
        a, b = np.linalg.qr(rng.normal(size=(4, 2)))[0].T

        def point(s):
            return np.cos(s) * a + np.sin(s) * b

        vals = np.array([cone_indicator(blocks, point(s)) for s in s_grid])
        for k in range(resolution):
            lo, hi = vals[k - 1], vals[(k + 1) % resolution]
            if not (vals[k] <= lo and vals[k] <= hi and vals[k] < 1e-2):
                continue
            ref = _minors(cone_matrix(blocks, point(s_grid[k] - h)))

            def signed(s):
                return float(_minors(cone_matrix(blocks, point(s))) @ ref)

            left, right = s_grid[k] - h, s_grid[k] + h
            if signed(left) * signed(right) > 0:
                continue
            root = brentq(signed, left, right, xtol=1e-15)
            u = point(root)
            if cone_indicator(blocks, u) < tol:
                found.append(u)
    return np.array(found).reshape(-1, 4)


def metric_signature(F: Frame, x, seed: int = 0, eig_tol: float = EIG_TOL, fit_tol: float = FIT_TOL) -> Signature:
    """Classify the conformal quadric on D at ``x`` as elliptic, hyperbolic or degenerate."""
    _check_shape(F)
    rng = np.random.default_rng(seed)
    blocks = _cone_blocks(F, x)
    if blocks.shape[0] != 3:
        return Signature("degenerate", np.zeros((4, 4)), np.zeros(4), np.inf, 0, np.zeros((0, 4)),
                         f"D-perp has dimension {blocks.shape[0]}, expected 3")
    Q, resid, (gap1, gap2) = fit_quadric(blocks, rng)
    cone = sample_cone_directions(blocks, rng)
    samples_used = 60 + 12 * 360
    if len(cone):
        cone_resid = float(np.max(np.abs(np.einsum("ni,ij,nj->n", cone, Q, cone))))
        resid = max(resid, cone_resid)
    eig = np.linalg.eigvalsh(Q)
    big = np.abs(eig) > eig_tol * np.linalg.norm(Q)
    pos, neg = int(np.sum(eig[big] > 0)), int(np.sum(eig[big] < 0))
    diag = ""
    if gap2 < 1e-6:
        kind, diag = "degenerate", "linear factor of the minors is not unique"
    elif resid >= fit_tol:
        kind, diag = "degenerate", f"quadric fit residual {resid:.3g} exceeds {fit_tol:g}"
    elif (pos, neg) in ((4, 0), (0, 4)):
        kind = "elliptic"
        if len(cone):
            kind, diag = "degenerate", "definite quadric but cone directions were found"
    elif (pos, neg) == (2, 2):
        kind = "hyperbolic"
        if not len(cone):
            diag = "no cone directions met on the sampled great circles"
    else:
        kind, diag = "degenerate", f"quadric signature ({pos},{neg})"
    return Signature(kind, Q, eig, resid, samples_used, cone, diag)


def ruling_planes(u) -> tuple[np.ndarray, np.ndarray]:
    """Two 2-planes through a cone direction of an adapted frame.

    A cone vector is the rank-1 matrix [[u1, u2], [u3, u4]] = phi theta^T; the
    planes are {phi a^T} and {b theta^T}. Columns give spanning vectors in u-coordinates.
    """
    u = np.asarray(u, float)
    M = u.reshape(2, 2)
    Us, s, Vt = np.linalg.svd(M)
    phi = Us[:, 0] * s[0]
    theta = Vt[0]
    P1 = np.column_stack([np.outer(phi, e).ravel() for e in np.eye(2)])
    P2 = np.column_stack([np.outer(e, theta).ravel() for e in np.eye(2)])
    return P1, P2
