"""Exact sparse multivariate polynomials over named variables.

Coefficients are :class:`fractions.Fraction`; every ring operation is exact.
A polynomial is bound to an ordered tuple of variable names (its *ring*) and
two polynomials can only be combined when their rings agree.

Text format used in model files and reports::

    -3*theta*phi*eps - 3*theta*eps + 1/2*x^2

Terms print in graded-lexicographic order (highest total degree first, ties
broken lexicographically on the exponent vector in ring order).
"""

from __future__ import annotations

import re
from fractions import Fraction
from numbers import Rational
from typing import Iterable, Mapping, Sequence

import numpy as np

Exponent = tuple[int, ...]


class PolyParseError(ValueError):
    def __init__(self, message: str, text: str, pos: int, line: int | None = None):
        self.text = text
        self.pos = pos
        self.line = line
        self.column = pos + 1
        where = f"column {self.column}" if line is None else f"line {line}, column {self.column}"
        super().__init__(f"{message} at {where}: {text!r}")


def _as_fraction(c) -> Fraction:
    if isinstance(c, Fraction):
        return c
    if isinstance(c, (int, Rational)):
        return Fraction(c)
    if isinstance(c, str):
        return Fraction(c)
    if isinstance(c, float):
        # binary floats convert exactly; pass strings such as "0.1" for decimal values
        return Fraction(c)
    raise TypeError(f"cannot use {type(c).__name__} as an exact coefficient")


def _grlex_key(exp: Exponent):
    return (-sum(exp), tuple(-e for e in exp))


class Poly:
    """Immutable polynomial with exact rational coefficients."""

    __slots__ = ("vars", "_terms", "_hash")

    def __init__(self, vars: Sequence[str], terms: Mapping[Exponent, object] | None = None):
        self.vars = tuple(vars)
        clean: dict[Exponent, Fraction] = {}
        if terms:
            n = len(self.vars)
            for exp, c in terms.items():
                exp = tuple(int(e) for e in exp)
                if len(exp) != n:
                    raise ValueError(f"exponent {exp} does not match ring of {n} variables")
                if any(e < 0 for e in exp):
                    raise ValueError(f"negative exponent in {exp}")
                c = _as_fraction(c)
                if c:
                    clean[exp] = clean.get(exp, Fraction(0)) + c
            clean = {e: c for e, c in clean.items() if c}
        self._terms = dict(sorted(clean.items(), key=lambda kv: _grlex_key(kv[0])))
        self._hash = None

    # construction -------------------------------------------------------
    @classmethod
    def zero(cls, vars: Sequence[str]) -> "Poly":
        return cls(vars)

    @classmethod
    def const(cls, c, vars: Sequence[str]) -> "Poly":
        return cls(vars, {(0,) * len(tuple(vars)): c})

    @classmethod
    def var(cls, name: str, vars: Sequence[str]) -> "Poly":
        vars = tuple(vars)
        if name not in vars:
            raise KeyError(f"unknown variable {name!r}")
        exp = [0] * len(vars)
        exp[vars.index(name)] = 1
        return cls(vars, {tuple(exp): 1})

    @classmethod
    def parse(cls, text: str, vars: Sequence[str], line: int | None = None) -> "Poly":
        return _Parser(text, tuple(vars), line).parse()

    # inspection ---------------------------------------------------------
    @property
    def terms(self) -> Mapping[Exponent, Fraction]:
        return dict(self._terms)

    def items(self):
        return self._terms.items()

    def __len__(self):
        return len(self._terms)

    def is_zero(self) -> bool:
        return not self._terms

    def is_constant(self) -> bool:
        return all(not any(e) for e in self._terms)

    def constant_value(self) -> Fraction:
        return self._terms.get((0,) * len(self.vars), Fraction(0))

    def degree(self) -> int:
        return max((sum(e) for e in self._terms), default=-1)

    def variables_used(self) -> tuple[str, ...]:
        used = set()
        for exp in self._terms:
            used.update(i for i, e in enumerate(exp) if e)
        return tuple(self.vars[i] for i in sorted(used))

    def leading_coefficient(self) -> Fraction:
        return next(iter(self._terms.values())) if self._terms else Fraction(0)

    # ring operations ----------------------------------------------------
    def _coerce(self, other) -> "Poly":
        if isinstance(other, Poly):
            if other.vars != self.vars:
                raise ValueError(
                    f"dimension mismatch: ring {self.vars} vs {other.vars}"
                )
            return other
        return Poly.const(other, self.vars)

    def __add__(self, other):
        other = self._coerce(other)
        out = dict(self._terms)
        for e, c in other._terms.items():
            out[e] = out.get(e, Fraction(0)) + c
        return Poly(self.vars, out)

    __radd__ = __add__

    def __neg__(self):
        return Poly(self.vars, {e: -c for e, c in self._terms.items()})

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        if not isinstance(other, Poly):
            c = _as_fraction(other)
            return Poly(self.vars, {e: c * v for e, v in self._terms.items()})
        other = self._coerce(other)
        out: dict[Exponent, Fraction] = {}
        for e1, c1 in self._terms.items():
            for e2, c2 in other._terms.items():
                e = tuple(a + b for a, b in zip(e1, e2))
                out[e] = out.get(e, Fraction(0)) + c1 * c2
        return Poly(self.vars, out)

    __rmul__ = __mul__

    def __truediv__(self, other):
        # division by a nonzero scalar only
        c = _as_fraction(other.constant_value() if isinstance(other, Poly) and other.is_constant() else other)
        if not c:
            raise ZeroDivisionError("polynomial division by zero")
        return self * (1 / c)

    def __pow__(self, k: int):
        if not isinstance(k, int) or k < 0:
            raise ValueError("only non-negative integer powers")
        result = Poly.const(1, self.vars)
        base = self
        while k:
            if k & 1:
                result = result * base
            base = base * base
            k >>= 1
        return result

    def __eq__(self, other):
        if isinstance(other, Poly):
            return self.vars == other.vars and self._terms == other._terms
        try:
            return self == Poly.const(other, self.vars)
        except TypeError:
            return NotImplemented

    def __hash__(self):
        if self._hash is None:
            self._hash = hash((self.vars, frozenset(self._terms.items())))
        return self._hash

    # calculus and evaluation -------------------------------------------
    def diff(self, var) -> "Poly":
        """Formal partial derivative with respect to ``var`` (name or Coord)."""
        name = getattr(var, "name", var)
        if name not in self.vars:
            raise KeyError(f"unknown coordinate {name!r}")
        i = self.vars.index(name)
        out = {}
        for e, c in self._terms.items():
            if e[i]:
                ne = list(e)
                ne[i] -= 1
                out[tuple(ne)] = c * e[i]
        return Poly(self.vars, out)

    def __call__(self, point) -> float:
        return self.eval(point)

    def eval(self, point) -> float:
        """Evaluate in double precision at a point given in ring order."""
        point = [float(v) for v in point]
        if len(point) != len(self.vars):
            raise ValueError(f"point has length {len(point)}, ring has {len(self.vars)} variables")
        total = 0.0
        for e, c in self._terms.items():
            m = float(c)
            for v, k in zip(point, e):
                if k:
                    m *= v**k
            total += m
        return total

    def eval_exact(self, point) -> Fraction:
        point = [_as_fraction(v) for v in point]
        if len(point) != len(self.vars):
            raise ValueError("length mismatch")
        total = Fraction(0)
        for e, c in self._terms.items():
            m = c
            for v, k in zip(point, e):
                if k:
                    m *= v**k
            total += m
        return total

    def subs(self, values: Mapping[str, object]) -> "Poly":
        """Substitute exact constants for some variables; they leave the ring."""
        idx = {self.vars.index(k): _as_fraction(v) for k, v in values.items() if k in self.vars}
        keep = [i for i in range(len(self.vars)) if i not in idx]
        out: dict[Exponent, Fraction] = {}
        for e, c in self._terms.items():
            m = c
            for i, v in idx.items():
                if e[i]:
                    m *= v ** e[i]
            ne = tuple(e[i] for i in keep)
            out[ne] = out.get(ne, Fraction(0)) + m
        return Poly(tuple(self.vars[i] for i in keep), out)

    def to_ring(self, vars: Sequence[str]) -> "Poly":
        """Re-express in a ring containing every variable this polynomial uses."""
        vars = tuple(vars)
        pos = {}
        for i, name in enumerate(self.vars):
            if name in vars:
                pos[i] = vars.index(name)
        out = {}
        for e, c in self._terms.items():
            ne = [0] * len(vars)
            for i, k in enumerate(e):
                if k:
                    if i not in pos:
                        raise ValueError(f"variable {self.vars[i]!r} missing from target ring")
                    ne[pos[i]] = k
            out[tuple(ne)] = c
        return Poly(vars, out)

    # printing -----------------------------------------------------------
    def __str__(self):
        if not self._terms:
            return "0"
        parts = []
        for e, c in self._terms.items():
            mono = "*".join(
                (name if k == 1 else f"{name}^{k}") for name, k in zip(self.vars, e) if k
            )
            mag = abs(c)
            if mono:
                body = mono if mag == 1 else f"{_fmt_frac(mag)}*{mono}"
            else:
                body = _fmt_frac(mag)
            parts.append(("-" if c < 0 else "+", body))
        sign, body = parts[0]
        out = ("-" if sign == "-" else "") + body
        for sign, body in parts[1:]:
            out += f" {sign} {body}"
        return out

    def __repr__(self):
        return f"Poly({str(self)!r}, vars={self.vars})"


def _fmt_frac(c: Fraction) -> str:
    return str(c.numerator) if c.denominator == 1 else f"{c.numerator}/{c.denominator}"


# ---------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+(?:\.\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>\*\*|[-+*/^()]))"
)


class _Parser:
    def __init__(self, text: str, vars: tuple[str, ...], line: int | None):
        self.text = text
        self.vars = vars
        self.line = line
        self.tokens = []
        pos = 0
        while pos < len(text):
            if text[pos:].strip() == "":
                break
            m = _TOKEN.match(text, pos)
            if not m or m.end() == pos:
                raise PolyParseError("unexpected character", text, len(text) - len(text[pos:].lstrip()), line)
            kind = m.lastgroup
            start = m.start(kind)
            self.tokens.append((kind, m.group(kind), start))
            pos = m.end()
        self.i = 0

    def error(self, msg, pos=None):
        if pos is None:
            pos = self.tokens[self.i][2] if self.i < len(self.tokens) else len(self.text)
        return PolyParseError(msg, self.text, pos, self.line)

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else (None, None, len(self.text))

    def take(self):
        tok = self.peek()
        self.i += 1
        return tok

    def parse(self) -> Poly:
        if not self.tokens:
            raise self.error("empty polynomial", 0)
        p = self.expr()
        if self.i != len(self.tokens):
            raise self.error("unexpected token")
        return p

    def expr(self):
        p = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            q = self.term()
            p = p + q if op == "+" else p - q
        return p

    def term(self):
        p = self.unary()
        while self.peek()[1] in ("*", "/"):
            _, op, pos = self.take()
            q = self.unary()
            if op == "*":
                p = p * q
            else:
                if not q.is_constant() or q.is_zero():
                    raise self.error("division only by nonzero constants", pos)
                p = p / q.constant_value()
        return p

    def unary(self):
        if self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            p = self.unary()
            return -p if op == "-" else p
        return self.power()

    def power(self):
        p = self.atom()
        if self.peek()[1] in ("^", "**"):
            self.take()
            kind, val, pos = self.take()
            if kind != "num" or "." in val:
                raise self.error("exponent must be a non-negative integer", pos)
            p = p ** int(val)
        return p

    def atom(self):
        kind, val, pos = self.take()
        if kind == "num":
            return Poly.const(Fraction(val), self.vars)
        if kind == "name":
            if val not in self.vars:
                raise self.error(f"unknown variable {val!r}", pos)
            return Poly.var(val, self.vars)
        if val == "(":
            p = self.expr()
            if self.take()[1] != ")":
                raise self.error("missing ')'")
            return p
        raise self.error("expected a number, variable or '('", pos)


# ---------------------------------------------------------------------------
# vectorised numeric evaluation

class PolyEvaluator:
    """Evaluate a fixed list of polynomials (one ring) at many points at once.

    Calling with an array of shape ``(..., nvars)`` returns ``(..., npolys)``.
    """

    def __init__(self, polys: Iterable[Poly], vars: Sequence[str] | None = None):
        polys = list(polys)
        if vars is None:
            if not polys:
                raise ValueError("need a ring for an empty polynomial list")
            vars = polys[0].vars
        self.vars = tuple(vars)
        self.npolys = len(polys)
        monos: dict[Exponent, int] = {}
        entries = []
        for j, p in enumerate(polys):
            if p.vars != self.vars:
                raise ValueError("all polynomials must share one ring")
            for e, c in p.items():
                k = monos.setdefault(e, len(monos))
                entries.append((k, j, float(c)))
        self.exponents = np.array(list(monos), dtype=np.int64).reshape(len(monos), len(self.vars))
        self.coeffs = np.zeros((len(monos), self.npolys))
        for k, j, c in entries:
            self.coeffs[k, j] += c
        self._maxdeg = self.exponents.max(axis=0) if len(monos) else np.zeros(len(self.vars), int)
        self._active = [i for i in range(len(self.vars)) if self._maxdeg[i] > 0]

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        if pts.shape[-1] != len(self.vars):
            raise ValueError(f"points have {pts.shape[-1]} coordinates, ring has {len(self.vars)}")
        lead = pts.shape[:-1]
        if not len(self.exponents):
            return np.zeros(lead + (self.npolys,))
        mono = np.ones(lead + (len(self.exponents),))
        for i in self._active:
            col = pts[..., i]
            powers = [np.ones_like(col), col]
            for _ in range(2, self._maxdeg[i] + 1):
                powers.append(powers[-1] * col)
            table = np.stack(powers, axis=-1)
            mono = mono * table[..., self.exponents[:, i]]
        return mono @ self.coeffs
