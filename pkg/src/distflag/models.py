"""Built-in (4,7) model frames and the plain-text model file format.

Model files are INI-like::

    [model]
    name = grassmannian

    [chart]
    coords = x13, x14, x15, x16, x23, x24, x25
    params = eps            # optional symbolic parameters

    [params]
    eps = 1/2               # optional bindings

    [field.1]
    x13 = 1
    x15 = x24

    [bracket.1.3]           # optional golden brackets, checked on load
    x16 = -2

Components not listed are zero.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping

import numpy as np

from .geometry import Chart, Frame, VectorField, as_fraction, lie_bracket, sample_points
from .poly import Poly, PolyParseError


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    name: str
    chart: Chart
    fields: tuple[VectorField, ...]
    params: Mapping[str, Fraction] = field(default_factory=dict)
    brackets: Mapping[tuple[int, int], VectorField] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        object.__setattr__(self, "params", dict(self.params))
        object.__setattr__(self, "brackets", dict(self.brackets))

    @property
    def frame(self) -> Frame:
        return Frame(self.chart, self.fields, 4)

    @property
    def is_symbolic(self) -> bool:
        return bool(self.chart.params)

    def bind(self, **values) -> "ModelSpec":
        """Substitute exact values for symbolic parameters."""
        values = {k: as_fraction(v) for k, v in values.items()}
        unknown = set(values) - set(self.chart.params)
        if unknown:
            raise ModelError(f"model {self.name!r} has no parameters {sorted(unknown)}")
        fields = tuple(f.subs(values) for f in self.fields)
        brackets = {k: v.subs(values) for k, v in self.brackets.items()}
        return ModelSpec(self.name, fields[0].chart, fields, {**self.params, **values}, brackets)

    def numeric(self) -> "ModelSpec":
        """Bind every remaining parameter from ``params``; fail if any is unbound."""
        missing = [p for p in self.chart.params if p not in self.params]
        if missing:
            raise ModelError(f"parameters {missing} of model {self.name!r} need values")
        if not self.chart.params:
            return self
        return self.bind(**{p: self.params[p] for p in self.chart.params})

    def bracket_table(self) -> dict[tuple[int, int], VectorField]:
        return {
            (i + 1, j + 1): lie_bracket(self.fields[i], self.fields[j])
            for i in range(4)
            for j in range(i + 1, 4)
        }

    def golden_mismatches(self) -> list[tuple[int, int]]:
        table = self.bracket_table()
        bad = []
        for (i, j), expected in self.brackets.items():
            got = table[(i, j)] if i < j else -table[(j, i)]
            if got != expected:
                bad.append((i, j))
        return bad

    def __eq__(self, other):
        if not isinstance(other, ModelSpec):
            return NotImplemented
        return (
            self.name == other.name
            and self.chart == other.chart
            and self.fields == other.fields
            and self.params == other.params
            and self.brackets == other.brackets
        )

    def __hash__(self):
        return hash((self.name, self.chart, self.fields))


# ---------------------------------------------------------------------------
# built-in fixtures

GRASSMANNIAN_COORDS = ("x13", "x14", "x15", "x16", "x23", "x24", "x25")

# symplectic form on R^6 in the basis e1..e6
SYMPLECTIC_MATRIX = np.array(
    [
        [0, 0, 0, 0, 0, 1],
        [0, 0, 0, 0, 1, 0],
        [0, 0, 0, 1, 0, 0],
        [0, 0, -1, 0, 0, 0],
        [0, -1, 0, 0, 0, 0],
        [-1, 0, 0, 0, 0, 0],
    ]
)


def grassmannian_model() -> ModelSpec:
    """Canonical distribution on the isotropic Grassmannian of 2-planes in (R^6, Omega)."""
    ch = Chart(GRASSMANNIAN_COORDS)
    fields = (
        ch.field({"x13": 1, "x15": "x24", "x16": "x14"}),
        ch.field({"x23": 1, "x25": "x24"}),
        ch.field({"x14": 1, "x15": "-x23", "x16": "-x13"}),
        ch.field({"x24": 1, "x25": "-x23"}),
    )
    brackets = {
        (1, 2): ch.field({}),
        (1, 3): ch.field({"x16": -2}),
        (1, 4): ch.field({"x15": -1}),
        (2, 3): ch.field({"x15": -1}),
        (2, 4): ch.field({"x25": -2}),
        (3, 4): ch.field({}),
    }
    return ModelSpec("grassmannian", ch, fields, {}, brackets)


def isotropy_x26(chart: Chart | None = None) -> Poly:
    """Dependent coordinate solving Omega(h1, h2) = 0 for x26."""
    ring = GRASSMANNIAN_COORDS + ("x26",) if chart is None else chart.ring
    return Poly.parse("x15 - x13*x24 + x14*x23", ring)


def grassmannian_pfaff_forms(chart: Chart | None = None) -> list[dict[str, Poly]]:
    """The three 1-forms cutting out the canonical distribution, as ``{coord: coefficient}``."""
    ch = chart or Chart(GRASSMANNIAN_COORDS)
    P = ch.parse
    return [
        {"x16": P("1"), "x14": P("x13"), "x13": P("-x14")},
        {"x15": P("1"), "x14": P("x23"), "x13": P("-x24")},
        {"x25": P("1"), "x24": P("x23"), "x23": P("-x24")},
    ]


def pair_form(form: Mapping[str, Poly], vf: VectorField) -> Poly:
    out = vf.chart.zero()
    for name, coef in form.items():
        out = out + coef * vf[name]
    return out


def grassmannian_pfaff_check(model: ModelSpec | None = None) -> bool:
    """All Pfaff forms annihilate all frame fields, and the dropped equation is implied.

    With x26 eliminated through the isotropy relation, the equation
    ``dx26 + x13 dx24 - x14 dx23 = 0`` must reduce to the second retained form.
    """
    model = model or grassmannian_model()
    forms = grassmannian_pfaff_forms(model.chart)
    for form in forms:
        for vf in model.fields:
            if not pair_form(form, vf).is_zero():
                return False
    ext = GRASSMANNIAN_COORDS + ("x26",)
    x26 = isotropy_x26()
    implied: dict[str, Poly] = {}
    for name in GRASSMANNIAN_COORDS:
        implied[name] = x26.diff(name)
    implied["x24"] = implied["x24"] + Poly.parse("x13", ext)
    implied["x23"] = implied["x23"] - Poly.parse("x14", ext)
    second = {k: v.to_ring(ext) for k, v in forms[1].items()}
    for name in GRASSMANNIAN_COORDS:
        lhs = implied.get(name, Poly.zero(ext))
        rhs = second.get(name, Poly.zero(ext))
        if lhs != rhs:
            return False
    return True


EPSILON_COORDS = ("x", "y", "s", "t", "z", "w", "u")


def epsilon_family(eps=None) -> ModelSpec:
    """The one-parameter perturbation of the flat model; ``eps=None`` keeps eps symbolic."""
    ch = Chart(EPSILON_COORDS, ("eps",))
    fields = (
        ch.field({"x": 1, "s": "w + eps*t", "t": "y"}),
        ch.field({"z": 1, "u": "w"}),
        ch.field({"y": 1, "s": "-(z - eps*t)", "t": "-x"}),
        ch.field({"w": 1, "u": "-z"}),
    )
    brackets = {
        (1, 2): ch.field({}),
        (1, 3): ch.field({"t": -2, "s": "eps*(x + y)"}),
        (1, 4): ch.field({"s": -1}),
        (2, 3): ch.field({"s": -1}),
        (2, 4): ch.field({"u": -2}),
        (3, 4): ch.field({}),
    }
    name = "epsilon"
    spec = ModelSpec(name, ch, fields, {}, brackets)
    if eps is None or (isinstance(eps, str) and eps == "eps"):
        return spec
    return spec.bind(eps=eps)


ELLIPTIC_COORDS = ("x1", "x2", "x3", "x4", "x5", "x6", "x7")

# desired brackets [xi_i, xi_j] = sum_k B[k][(i, j)] d/dx_{4+k}
_ELLIPTIC_BRACKETS = {
    5: {(1, 2): 1, (3, 4): -1},
    6: {(1, 3): 1, (2, 4): 1},
    7: {(1, 4): 1, (2, 3): -1},
}


def elliptic_nilpotent_model() -> ModelSpec:
    """Nilpotent frame with [x1,x2] = -[x3,x4], [x1,x3] = [x2,x4], [x1,x4] = -[x2,x3] exactly.

    xi_i = d_i - 1/2 sum_{j,k} b^k_{ij} x_j d_{4+k}, so [xi_i, xi_j] = b^k_{ij} d_{4+k}.
    """
    ch = Chart(ELLIPTIC_COORDS)
    half = Fraction(1, 2)
    fields = []
    for i in range(1, 5):
        comps = {f"x{i}": ch.const(1)}
        for k, table in _ELLIPTIC_BRACKETS.items():
            acc = ch.zero()
            for (a, b), val in table.items():
                if a == i:
                    acc = acc - half * val * ch.var(f"x{b}")
                elif b == i:
                    acc = acc + half * val * ch.var(f"x{a}")
            if not acc.is_zero():
                comps[f"x{k}"] = acc
        fields.append(ch.field(comps))
    brackets = {}
    for k, table in _ELLIPTIC_BRACKETS.items():
        for pair, val in table.items():
            brackets[pair] = ch.field({f"x{k}": val})
    return ModelSpec("elliptic-nilpotent", ch, tuple(fields), {}, brackets)


BUILTIN = {
    "grassmannian": lambda eps=None: grassmannian_model(),
    "epsilon": lambda eps=None: epsilon_family(eps),
    "elliptic-nilpotent": lambda eps=None: elliptic_nilpotent_model(),
}


def builtin_model(name: str, eps=None) -> ModelSpec:
    try:
        factory = BUILTIN[name]
    except KeyError:
        raise ModelError(f"unknown built-in model {name!r}; choose from {sorted(BUILTIN)}") from None
    return factory(eps)


# ---------------------------------------------------------------------------
# model files

_SECTION = re.compile(r"^\[(?P<name>[^\]]+)\]\s*$")
_ENTRY = re.compile(r"^(?P<key>[^=]+?)\s*=\s*(?P<value>.*?)\s*$")


def _strip_comment(line: str) -> str:
    return line.split("#", 1)[0].rstrip()


def _read_sections(text: str, source: str):
    sections: dict[str, list[tuple[str, str, int, int]]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if not line.strip():
            continue
        m = _SECTION.match(line.strip())
        if m:
            current = m.group("name").strip()
            if current in sections:
                raise ModelError(f"{source}:{lineno}:1: duplicate section [{current}]")
            sections[current] = []
            continue
        m = _ENTRY.match(line)
        if not m or current is None:
            raise ModelError(f"{source}:{lineno}:1: expected 'key = value' inside a section")
        col = raw.index("=") + 2
        while col <= len(raw) and raw[col - 1] == " ":
            col += 1
        sections[current].append((m.group("key").strip(), m.group("value"), lineno, col))
    return sections


def loads_model(text: str, source: str = "<model>", validate: bool = True) -> ModelSpec:
    sections = _read_sections(text, source)
    if "chart" not in sections:
        raise ModelError(f"{source}: missing [chart] section")
    chart_entries = {k: (v, ln) for k, v, ln, _ in sections["chart"]}
    if "coords" not in chart_entries:
        raise ModelError(f"{source}: [chart] needs 'coords'")
    coords = tuple(c.strip() for c in chart_entries["coords"][0].split(",") if c.strip())
    params = ()
    if "params" in chart_entries:
        params = tuple(c.strip() for c in chart_entries["params"][0].split(",") if c.strip())
    try:
        chart = Chart(coords, params)
    except ValueError as exc:
        raise ModelError(f"{source}:{chart_entries['coords'][1]}: {exc}") from None

    name = "model"
    for k, v, _, _ in sections.get("model", []):
        if k == "name":
            name = v

    def parse_field(section: str) -> VectorField:
        comps = {}
        for key, value, lineno, col in sections[section]:
            if key not in chart.coords:
                raise ModelError(f"{source}:{lineno}:1: unknown coordinate {key!r} in [{section}]")
            try:
                comps[key] = Poly.parse(value, chart.ring, line=lineno)
            except PolyParseError as exc:
                raise ModelError(f"{source}:{lineno}:{col + exc.pos}: {exc}") from None
        return chart.field(comps)

    field_names = sorted(
        (s for s in sections if re.fullmatch(r"field\.\d+", s)), key=lambda s: int(s.split(".")[1])
    )
    if len(field_names) != 4:
        raise ModelError(f"{source}: frame must have 4 fields (found {len(field_names)})")
    if [int(s.split(".")[1]) for s in field_names] != [1, 2, 3, 4]:
        raise ModelError(f"{source}: fields must be numbered field.1 .. field.4")
    fields = tuple(parse_field(s) for s in field_names)

    brackets = {}
    for s in sections:
        m = re.fullmatch(r"bracket\.(\d)\.(\d)", s)
        if m:
            brackets[(int(m.group(1)), int(m.group(2)))] = parse_field(s)

    values = {}
    for key, value, lineno, _ in sections.get("params", []):
        try:
            values[key] = Fraction(value)
        except ValueError:
            raise ModelError(f"{source}:{lineno}:1: parameter value {value!r} is not rational") from None

    extra = {k: v for k, v in values.items() if k not in chart.params}
    model = ModelSpec(name, chart, fields, extra, brackets)
    bindable = {k: v for k, v in values.items() if k in chart.params}
    if bindable:
        model = model.bind(**bindable)
    if validate:
        validate_model(model)
    return model


def load_model(path, validate: bool = True) -> ModelSpec:
    path = Path(path)
    return loads_model(path.read_text(), str(path), validate)


def validate_model(model: ModelSpec, samples=None, tol_rel: float = 1e-9) -> None:
    """Raise ModelError unless the declared brackets match and the frame is (4,7)."""
    from .class47 import is_47_failures

    bad = model.golden_mismatches()
    if bad:
        i, j = bad[0]
        raise ModelError(f"declared bracket [{i},{j}] does not match the computed bracket")
    numeric = model
    if model.chart.params:
        # validation of symbolic families happens at parameter value 1
        numeric = model.bind(**{p: 1 for p in model.chart.params})
    if samples is None:
        samples = sample_points(numeric.chart.dim, n_random=50, lattice=None, seed=0)
    failures = is_47_failures(numeric.frame, samples, tol_rel)
    if failures:
        point, reason = failures[0]
        raise ModelError(
            f"model {model.name!r} is not a (4,7) frame at sample point "
            f"{np.array2string(np.asarray(point), precision=4)}: {reason}"
        )


def dumps_model(model: ModelSpec) -> str:
    lines = ["[model]", f"name = {model.name}", "", "[chart]", "coords = " + ", ".join(model.chart.coords)]
    if model.chart.params:
        lines.append("params = " + ", ".join(model.chart.params))
    if model.params:
        lines += ["", "[params]"]
        for k in sorted(model.params):
            lines.append(f"{k} = {model.params[k]}")

    def emit(header: str, vf: VectorField):
        lines.extend(["", f"[{header}]"])
        for name, comp in zip(vf.chart.coords, vf.components):
            if not comp.is_zero():
                lines.append(f"{name} = {comp}")

    for i, vf in enumerate(model.fields, start=1):
        emit(f"field.{i}", vf)
    for (i, j) in sorted(model.brackets):
        emit(f"bracket.{i}.{j}", model.brackets[(i, j)])
    return "\n".join(lines) + "\n"


def save_model(model: ModelSpec, path) -> None:
    Path(path).write_text(dumps_model(model))
